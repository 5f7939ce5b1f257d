#include "senformer/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <variant>

#include "senformer/format.hpp"

namespace senf {

namespace {

bool same_model(const ModelConfig& a, const ModelConfig& b) {
  return a.d == b.d && a.n_classes == b.n_classes && a.num_blocks == b.num_blocks && a.heads == b.heads &&
         a.mlp_ratio == b.mlp_ratio && a.window == b.window && a.window_heads == b.window_heads &&
         a.learners_per_scale == b.learners_per_scale && a.attention_hidden == b.attention_hidden &&
         a.sharing == b.sharing && a.merge == b.merge && a.pyramid == b.pyramid && a.merge_space == b.merge_space &&
         a.norm == b.norm && a.head == b.head && a.seed == b.seed;
}

bool same_train(const TrainConfig& a, const TrainConfig& b) {
  return a.lr == b.lr && a.weight_decay == b.weight_decay && a.max_iters == b.max_iters &&
         a.batch_size == b.batch_size && a.crop_size == b.crop_size && a.clip_norm == b.clip_norm &&
         a.poly_power == b.poly_power && a.seed == b.seed && a.ensemble_loss_weight == b.ensemble_loss_weight &&
         a.backbone_lr_mult == b.backbone_lr_mult && a.eval_interval == b.eval_interval;
}

bool same_data(const DataConfig& a, const DataConfig& b) {
  return a.train_path == b.train_path && a.val_path == b.val_path && a.synth_seed == b.synth_seed &&
         a.train_count == b.train_count && a.val_count == b.val_count && a.size == b.size;
}

using Value = std::variant<std::int64_t, double, bool, std::string>;

struct Entry {
  Value value;
  std::size_t line;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a string.
std::string strip_comment(const std::string& s) {
  bool in_string = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_string = !in_string;
    if (s[i] == '#' && !in_string) return s.substr(0, i);
  }
  return s;
}

class Parser {
 public:
  explicit Parser(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(std::size_t line, const std::string& msg) const { throw ConfigError(source_, line, msg); }

  Value parse_value(const std::string& raw, std::size_t line) const {
    if (raw.empty()) fail(line, "missing value");
    if (raw.front() == '"') {
      if (raw.size() < 2 || raw.back() != '"') fail(line, "unterminated string " + raw);
      const std::string body = raw.substr(1, raw.size() - 2);
      if (body.find('"') != std::string::npos || body.find('\\') != std::string::npos) {
        fail(line, "escapes and embedded quotes are not supported");
      }
      return body;
    }
    if (raw == "true") return true;
    if (raw == "false") return false;
    const char* first = raw.data();
    const char* last = raw.data() + raw.size();
    const bool floaty = raw.find_first_of(".eE") != std::string::npos || raw == "inf" || raw == "nan";
    if (!floaty) {
      std::int64_t v = 0;
      const auto r = std::from_chars(first, last, v);
      if (r.ec == std::errc() && r.ptr == last) return v;
    }
    double d = 0;
    const auto r = std::from_chars(first, last, d);
    if (r.ec == std::errc() && r.ptr == last) return d;
    fail(line, "malformed value '" + raw + "'");
  }

  std::map<std::string, std::map<std::string, Entry>> parse(const std::string& text) {
    static const std::set<std::string> sections = {"", "model", "train", "data"};
    std::map<std::string, std::map<std::string, Entry>> out;
    std::istringstream in(text);
    std::string raw_line, section;
    std::size_t line = 0;
    while (std::getline(in, raw_line)) {
      ++line;
      const std::string s = trim(strip_comment(raw_line));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') fail(line, "malformed section header");
        section = trim(s.substr(1, s.size() - 2));
        if (!sections.count(section) || section.empty()) fail(line, "unknown section [" + section + "]");
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) fail(line, "expected key = value");
      const std::string key = trim(s.substr(0, eq));
      if (key.empty()) fail(line, "empty key");
      for (char c : key) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) fail(line, "invalid key '" + key + "'");
      }
      auto& table = out[section];
      if (table.count(key)) fail(line, "duplicate key '" + key + "'");
      table[key] = {parse_value(trim(s.substr(eq + 1)), line), line};
    }
    return out;
  }

 private:
  std::string source_;
};

struct Binder {
  Binder(const Parser& p, std::map<std::string, Entry>& t, std::string name)
      : parser(p), table(t), section(std::move(name)) {}

  const Parser& parser;
  std::map<std::string, Entry>& table;
  std::string section;

  const Entry* take(const std::string& key) {
    auto it = table.find(key);
    if (it == table.end()) return nullptr;
    consumed.insert(key);
    return &it->second;
  }

  std::set<std::string> consumed;

  // Positive unless allow_zero.
  template <typename U>
  void uint(const std::string& key, U& dst, bool allow_zero = false) {
    const Entry* e = take(key);
    if (!e) return;
    const auto* v = std::get_if<std::int64_t>(&e->value);
    if (!v) parser.fail(e->line, section + "." + key + " must be an integer");
    if (*v < 0 || (*v == 0 && !allow_zero)) {
      parser.fail(e->line, section + "." + key + " must be " + (allow_zero ? "non-negative" : "positive"));
    }
    dst = static_cast<U>(*v);
  }

  void real(const std::string& key, double& dst, bool allow_zero = false) {
    const Entry* e = take(key);
    if (!e) return;
    double v = 0;
    if (const auto* i = std::get_if<std::int64_t>(&e->value)) {
      v = static_cast<double>(*i);
    } else if (const auto* d = std::get_if<double>(&e->value)) {
      v = *d;
    } else {
      parser.fail(e->line, section + "." + key + " must be a number");
    }
    if (!std::isfinite(v) || v < 0 || (v == 0 && !allow_zero)) {
      parser.fail(e->line, section + "." + key + " must be " + (allow_zero ? "non-negative" : "positive"));
    }
    dst = v;
  }

  void text(const std::string& key, std::string& dst) {
    const Entry* e = take(key);
    if (!e) return;
    const auto* v = std::get_if<std::string>(&e->value);
    if (!v) parser.fail(e->line, section + "." + key + " must be a string");
    dst = *v;
  }

  template <typename E>
  void choice(const std::string& key, E& dst, E (*parse)(std::string_view)) {
    const Entry* e = take(key);
    if (!e) return;
    const auto* v = std::get_if<std::string>(&e->value);
    if (!v) parser.fail(e->line, section + "." + key + " must be a string");
    try {
      dst = parse(*v);
    } catch (const std::invalid_argument& ex) {
      parser.fail(e->line, ex.what());
    }
  }

  void reject_unknown() {
    for (const auto& [key, entry] : table) {
      if (!consumed.count(key)) {
        parser.fail(entry.line, "unknown key '" + key + "'" + (section.empty() ? "" : " in [" + section + "]"));
      }
    }
  }

  std::size_t line_of(const std::string& key) const {
    auto it = table.find(key);
    return it == table.end() ? 0 : it->second.line;
  }
};

}  // namespace

bool RunConfig::operator==(const RunConfig& other) const {
  return same_model(model, other.model) && same_train(train, other.train) && same_data(data, other.data);
}

ConfigError::ConfigError(const std::string& source, std::size_t line, const std::string& message)
    : std::runtime_error(source + (line ? ":" + std::to_string(line) : std::string()) + ": " + message),
      line_(line) {}

RunConfig default_run_config() { return RunConfig{}; }

RunConfig parse_config_text(const std::string& text, const std::string& source) {
  Parser parser(source);
  auto tables = parser.parse(text);
  RunConfig cfg = default_run_config();

  Binder top{parser, tables[""], ""};
  int version = kDefaultsVersion;
  top.uint("defaults_version", version);
  if (version != kDefaultsVersion) {
    parser.fail(top.line_of("defaults_version"), "unsupported defaults_version " + std::to_string(version));
  }
  top.reject_unknown();

  Binder m{parser, tables["model"], "model"};
  ModelConfig& mc = cfg.model;
  m.uint("d", mc.d);
  m.uint("n_classes", mc.n_classes);
  m.uint("num_blocks", mc.num_blocks);
  m.uint("heads", mc.heads);
  m.uint("mlp_ratio", mc.mlp_ratio);
  m.uint("window", mc.window);
  m.uint("window_heads", mc.window_heads);
  m.uint("learners_per_scale", mc.learners_per_scale);
  m.uint("attention_hidden", mc.attention_hidden);
  m.choice("sharing", mc.sharing, parse_sharing_policy);
  m.choice("merge", mc.merge, parse_merge_strategy);
  m.choice("pyramid", mc.pyramid, parse_pyramid_variant);
  m.choice("merge_space", mc.merge_space, parse_merge_space);
  m.choice("norm_placement", mc.norm, parse_norm_placement);
  m.choice("head", mc.head, parse_head_kind);
  m.reject_unknown();

  Binder t{parser, tables["train"], "train"};
  TrainConfig& tc = cfg.train;
  t.real("lr", tc.lr);
  t.real("weight_decay", tc.weight_decay, true);
  t.uint("max_iters", tc.max_iters, true);
  t.uint("batch_size", tc.batch_size);
  t.uint("crop_size", tc.crop_size);
  t.real("clip_norm", tc.clip_norm);
  t.real("poly_power", tc.poly_power);
  t.uint("seed", tc.seed, true);
  t.real("ensemble_loss_weight", tc.ensemble_loss_weight, true);
  t.real("backbone_lr_mult", tc.backbone_lr_mult);
  t.uint("eval_interval", tc.eval_interval, true);
  t.reject_unknown();
  mc.seed = tc.seed;

  Binder dt{parser, tables["data"], "data"};
  DataConfig& dc = cfg.data;
  dt.text("train_path", dc.train_path);
  dt.text("val_path", dc.val_path);
  dt.uint("synth_seed", dc.synth_seed, true);
  dt.uint("train_count", dc.train_count);
  dt.uint("val_count", dc.val_count);
  dt.uint("size", dc.size);
  dt.reject_unknown();

  if (uses_attention(mc.merge) && mc.learners_per_scale != 1) {
    parser.fail(std::max(m.line_of("merge"), m.line_of("learners_per_scale")),
                std::string(to_string(mc.merge)) + " merge requires exactly 4 learners (learners_per_scale = 1)");
  }
  if (tc.crop_size % 32) parser.fail(t.line_of("crop_size"), "train.crop_size must be a multiple of 32");
  if (dc.size % 32) parser.fail(dt.line_of("size"), "data.size must be a multiple of 32");
  if (dc.train_path.empty() && mc.n_classes < 3) {
    parser.fail(m.line_of("n_classes"), "synthetic data needs model.n_classes >= 3");
  }
  try {
    mc.validate();
    tc.validate();
  } catch (const std::invalid_argument& e) {
    parser.fail(0, e.what());
  }
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), 0, "cannot open file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

std::string echo_config(const RunConfig& c) {
  auto real = [](double v) {
    std::string s = format_number(v);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
  };
  auto quoted = [](std::string_view s) { return "\"" + std::string(s) + "\""; };
  std::ostringstream os;
  os << "defaults_version = " << kDefaultsVersion << "\n\n";
  const ModelConfig& m = c.model;
  os << "[model]\n"
     << "d = " << m.d << "\n"
     << "n_classes = " << m.n_classes << "\n"
     << "num_blocks = " << m.num_blocks << "\n"
     << "heads = " << m.heads << "\n"
     << "mlp_ratio = " << m.mlp_ratio << "\n"
     << "window = " << m.window << "\n"
     << "window_heads = " << m.window_heads << "\n"
     << "learners_per_scale = " << m.learners_per_scale << "\n"
     << "attention_hidden = " << m.attention_hidden << "\n"
     << "sharing = " << quoted(to_string(m.sharing)) << "\n"
     << "merge = " << quoted(to_string(m.merge)) << "\n"
     << "pyramid = " << quoted(to_string(m.pyramid)) << "\n"
     << "merge_space = " << quoted(to_string(m.merge_space)) << "\n"
     << "norm_placement = " << quoted(to_string(m.norm)) << "\n"
     << "head = " << quoted(to_string(m.head)) << "\n\n";
  const TrainConfig& t = c.train;
  os << "[train]\n"
     << "lr = " << real(t.lr) << "\n"
     << "weight_decay = " << real(t.weight_decay) << "\n"
     << "max_iters = " << t.max_iters << "\n"
     << "batch_size = " << t.batch_size << "\n"
     << "crop_size = " << t.crop_size << "\n"
     << "clip_norm = " << real(t.clip_norm) << "\n"
     << "poly_power = " << real(t.poly_power) << "\n"
     << "seed = " << t.seed << "\n"
     << "ensemble_loss_weight = " << real(t.ensemble_loss_weight) << "\n"
     << "backbone_lr_mult = " << real(t.backbone_lr_mult) << "\n"
     << "eval_interval = " << t.eval_interval << "\n\n";
  const DataConfig& d = c.data;
  os << "[data]\n"
     << "train_path = " << quoted(d.train_path) << "\n"
     << "val_path = " << quoted(d.val_path) << "\n"
     << "synth_seed = " << d.synth_seed << "\n"
     << "train_count = " << d.train_count << "\n"
     << "val_count = " << d.val_count << "\n"
     << "size = " << d.size << "\n";
  return os.str();
}

}  // namespace senf
