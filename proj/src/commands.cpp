#include "senformer/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "senformer/config.hpp"
#include "senformer/format.hpp"
#include "senformer/gradcheck_suite.hpp"
#include "senformer/kernels.hpp"
#include "senformer/report.hpp"
#include "senformer/tensor_io.hpp"
#include "senformer/training.hpp"

namespace senf {

namespace fs = std::filesystem;

std::vector<std::size_t> parse_levels(const std::string& text) {
  std::vector<std::size_t> levels;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v < 2 || v > 5) {
      throw std::invalid_argument("bad learner level '" + item + "' (expected 2..5)");
    }
    if (std::find(levels.begin(), levels.end(), v) == levels.end()) levels.push_back(v);
  }
  if (levels.empty()) throw std::invalid_argument("empty learner list");
  std::sort(levels.begin(), levels.end());
  return levels;
}

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void apply_thread_env() {
  const char* env = std::getenv("SENFORMER_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 0) throw UsageError(std::string("SENFORMER_THREADS must be a non-negative integer, got '") + env + "'");
  kernels::set_threads(static_cast<int>(n));
}

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<EnsembleModel<float>> model;
  std::string checkpoint_id;
};

LoadedModel load_model(const fs::path& checkpoint) {
  const auto meta = read_checkpoint_meta(checkpoint);
  if (!meta.contains("config") || !meta["config"].is_string()) {
    throw std::runtime_error(checkpoint.string() + " carries no model configuration");
  }
  LoadedModel m;
  m.config = parse_config_text(meta["config"].get<std::string>(), checkpoint.string() + "#config");
  m.model = std::make_unique<EnsembleModel<float>>(m.config.model);
  load_checkpoint(checkpoint, *m.model, nullptr);
  m.checkpoint_id = checkpoint.filename().string() + "@" + file_digest(checkpoint);
  return m;
}

Dataset load_eval_data(const fs::path& path, const ModelConfig& model) {
  Dataset data = load_dataset(path.string());
  if (data.n_classes != model.n_classes) {
    throw std::runtime_error("dataset has " + std::to_string(data.n_classes) + " classes, model expects " +
                             std::to_string(model.n_classes));
  }
  return data;
}

std::vector<std::size_t> learner_levels(const EnsembleModel<float>& model) {
  std::vector<std::size_t> levels;
  for (const auto& l : model.learners) levels.push_back(l.level);
  return levels;
}

std::string learner_label(const EnsembleModel<float>& model, std::size_t i) {
  const auto levels = learner_levels(model);
  std::string name = "d" + std::to_string(levels[i]);
  if (std::count(levels.begin(), levels.end(), levels[i]) > 1) name += "_" + std::to_string(i);
  return name;
}

int cmd_synth(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t classes, const fs::path& out_path,
              std::ostream& out) {
  if (count == 0) throw UsageError("--count must be positive");
  if (classes < 2 || classes > 254) throw UsageError("--classes must be in 2..254");
  check_input_extent(size, size);
  const Dataset data = synth_dataset(seed, count, size, classes);
  save_dataset(out_path.string(), data);
  out << "wrote " << out_path.string() << " id=" << data.id << '\n';
  return 0;
}

Dataset training_data(const DataConfig& d, std::size_t classes, bool validation) {
  const std::string& path = validation ? d.val_path : d.train_path;
  if (!path.empty()) {
    Dataset data = load_dataset(path);
    if (data.n_classes != classes) {
      throw std::runtime_error(path + " has " + std::to_string(data.n_classes) + " classes, config expects " +
                               std::to_string(classes));
    }
    return data;
  }
  const std::uint64_t seed = validation ? Rng::derive(d.synth_seed, 0x76616c) : d.synth_seed;
  return synth_dataset(seed, validation ? d.val_count : d.train_count, d.size, classes);
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir, const fs::path& resume, std::ostream& out) {
  const RunConfig config = parse_config(config_path);
  fs::create_directories(out_dir);
  const std::string echo = echo_config(config);
  write_file_atomic(out_dir / "config.toml",
                    std::span(reinterpret_cast<const std::uint8_t*>(echo.data()), echo.size()));

  const Dataset train = training_data(config.data, config.model.n_classes, false);
  const Dataset val = training_data(config.data, config.model.n_classes, true);
  EnsembleModel<float> model(config.model);

  LoopOptions options;
  options.checkpoint = out_dir / "checkpoint.senf";
  options.resume = resume;
  options.meta = {{"config", echo}, {"train_dataset", train.id}, {"val_dataset", val.id}};
  options.on_row = [&](const MetricsRow& row) {
    if (!row.eval) return;
    out << "iter " << row.step.iter + 1 << " loss " << format_number(row.step.loss) << " val_miou";
    for (std::size_t i = 0; i < row.eval->learner_miou.size(); ++i) {
      out << ' ' << learner_label(model, i) << '=' << format_number(row.eval->learner_miou[i]);
    }
    out << " ensemble=" << format_number(row.eval->ensemble_miou) << '\n';
  };
  const TrainResult result = train_loop(model, config.train, train, &val, options);
  write_metrics_csv(out_dir / "metrics.csv", result.log, model.learners.size());
  out << "wrote " << options.checkpoint.string() << " at iter " << result.final_iter << '\n';
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_path, const std::string& learners,
             const std::string& merge, std::ostream& out) {
  LoadedModel m = load_model(checkpoint);
  auto& model = *m.model;
  const Dataset data = load_eval_data(data_path, m.config.model);
  const MergeStrategy strategy = merge.empty() ? m.config.model.merge : parse_merge_strategy(merge);
  const LearnerMask mask = learners.empty() ? model.full_mask() : model.mask_for_levels(parse_levels(learners));

  out << "output,miou\n";
  const std::size_t selected = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    LearnerMask single(mask.size(), false);
    single[i] = true;
    out << learner_label(model, i) << ',' << format_number(evaluate_subset(model, data, single, MergeStrategy::kAverage))
        << '\n';
  }
  if (selected > 1) out << "ensemble," << format_number(evaluate_subset(model, data, mask, strategy)) << '\n';
  return 0;
}

int cmd_analyze(const fs::path& checkpoint, const fs::path& data_path, const std::string& kind, const fs::path& out_dir,
                std::ostream& out) {
  LoadedModel m = load_model(checkpoint);
  auto& model = *m.model;
  const Dataset data = load_eval_data(data_path, m.config.model);
  AnalysisReport report;
  report.provenance = {m.checkpoint_id, data.id, m.config.train.seed};
  const auto levels = learner_levels(model);
  if (kind == "variance") {
    report.tables.push_back(variance_report_table(channel_variance(model, data), levels));
  } else if (kind == "cosine") {
    std::vector<Tensor<float>> sets;
    for (const auto& l : model.learners) sets.push_back(l.embeddings->cls);
    const auto stats = cosine_similarity_stats(sets);
    report.tables.push_back(cosine_histogram_table(stats, levels));
    report.tables.push_back(cosine_summary_table(stats, levels));
  } else if (kind == "ablation") {
    report.tables.push_back(ablation_report_table(subset_ablation(model, data, m.config.model.merge)));
  } else {
    throw UsageError("--report must be variance, cosine or ablation");
  }
  for (const auto& path : emit_report(report, out_dir)) out << "wrote " << path.string() << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& scope, double eps, std::optional<double> tol, std::ostream& out) {
  GradcheckOptions options;
  options.eps = eps;
  std::vector<GradcheckRow> rows;
  if (scope == "op") {
    options.tol = tol.value_or(1e-4);
    rows = operator_gradchecks(options);
  } else if (scope == "model") {
    options.tol = tol.value_or(1e-3);
    rows = model_gradchecks(options);
  } else {
    throw UsageError("--scope must be op or model");
  }
  out << format_gradcheck_table(rows);
  return std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.passed; }) ? 0 : 1;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-ensemble semantic segmentation at desk scale", "senformer"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t count = 0, size = 64, classes = 6;
  std::string out_path, config_path, resume_path, checkpoint, data_path, learners, merge, report_kind;
  std::string scope = "op";
  double eps = 1e-5;
  std::optional<double> tol;

  auto* synth = app.add_subcommand("synth", "generate a synthetic shapes dataset");
  synth->add_option("--seed", seed)->required();
  synth->add_option("--count", count)->required();
  synth->add_option("--size", size);
  synth->add_option("--classes", classes);
  synth->add_option("--out", out_path)->required();

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path)->required();
  train->add_option("--out", out_path)->required();
  train->add_option("--resume", resume_path, "continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "mIoU of learners and their merge");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data_path)->required();
  eval->add_option("--learners", learners, "pyramid levels, e.g. 2,3,4,5");
  eval->add_option("--merge", merge, "average|product|majority|hierarchical|explicit");

  auto* analyze = app.add_subcommand("analyze", "write analysis tables and charts");
  analyze->add_option("--checkpoint", checkpoint)->required();
  analyze->add_option("--data", data_path)->required();
  analyze->add_option("--report", report_kind, "variance|cosine|ablation")->required();
  analyze->add_option("--out", out_path)->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--scope", scope, "op|model");
  gradcheck->add_option("--eps", eps);
  gradcheck->add_option("--tol", tol);

  std::string current = "senformer";
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    apply_thread_env();
    if (synth->parsed()) {
      current = "synth";
      return cmd_synth(seed, count, size, classes, out_path, out);
    }
    if (train->parsed()) {
      current = "train";
      return cmd_train(config_path, out_path, resume_path, out);
    }
    if (eval->parsed()) {
      current = "eval";
      return cmd_eval(checkpoint, data_path, learners, merge, out);
    }
    if (analyze->parsed()) {
      current = "analyze";
      return cmd_analyze(checkpoint, data_path, report_kind, out_path, out);
    }
    current = "gradcheck";
    return cmd_gradcheck(scope, eps, tol, out);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << '\n' << app.help();
    return 2;
  } catch (const UsageError& e) {
    err << "error: usage: " << current << ": " << one_line(e.what()) << '\n' << app.help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << current << ": " << one_line(e.what()) << '\n';
    return 1;
  }
}

int run_command(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_command(args, std::cout, std::cerr);
}

}  // namespace senf
