#include "senformer/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "senformer/format.hpp"
#include "senformer/tensor_io.hpp"

namespace senf {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (!(lr > 0)) fail("lr must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (batch_size == 0) fail("batch_size must be positive");
  if (crop_size == 0 || crop_size % 32) fail("crop_size must be a positive multiple of 32");
  if (!(clip_norm > 0)) fail("clip_norm must be positive");
  if (!(poly_power > 0)) fail("poly_power must be positive");
  if (!(ensemble_loss_weight >= 0)) fail("ensemble_loss_weight must be non-negative");
  if (!(backbone_lr_mult > 0)) fail("backbone_lr_mult must be positive");
}

template <typename T>
LossTerms<T> total_loss(const std::vector<Tensor<T>>& learner_logits, const Tensor<T>& merged,
                        std::span<const std::int32_t> labels, std::size_t h, std::size_t w, double lambda) {
  if (learner_logits.empty()) throw std::invalid_argument("total_loss: no learner predictions");
  LossTerms<T> terms;
  Tensor<T> total;
  for (std::size_t i = 0; i < learner_logits.size(); ++i) {
    const Tensor<T> ce = cross_entropy(upsample_bilinear(learner_logits[i], h, w), labels, class_axis(learner_logits[i]));
    terms.learner.push_back(static_cast<double>(ce.item()));
    total = i == 0 ? ce : add(total, ce);
  }
  const std::size_t axis = class_axis(merged);
  if (lambda != 0.0) {
    const Tensor<T> nll = nll_loss(log(upsample_bilinear(merged, h, w), static_cast<T>(1e-12)), labels, axis);
    terms.ensemble = static_cast<double>(nll.item());
    total = add(total, scale(nll, static_cast<T>(lambda)));
  } else {
    NoGradGuard no_grad;
    terms.ensemble = static_cast<double>(
        nll_loss(log(upsample_bilinear(merged, h, w), static_cast<T>(1e-12)), labels, axis).item());
  }
  terms.total = total;
  return terms;
}

template LossTerms<float> total_loss(const std::vector<Tensor<float>>&, const Tensor<float>&,
                                     std::span<const std::int32_t>, std::size_t, std::size_t, double);
template LossTerms<double> total_loss(const std::vector<Tensor<double>>&, const Tensor<double>&,
                                      std::span<const std::int32_t>, std::size_t, std::size_t, double);

namespace {

Batch assemble(const std::vector<SegmentationSample>& samples) {
  Batch b;
  b.height = samples[0].height;
  b.width = samples[0].width;
  std::vector<float> images;
  images.reserve(samples.size() * 3 * b.height * b.width);
  for (const auto& s : samples) {
    images.insert(images.end(), s.image.begin(), s.image.end());
    b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
  }
  b.images = Tensor<float>::from_data({samples.size(), 3, b.height, b.width}, std::move(images));
  return b;
}

}  // namespace

Batch make_batch(const Dataset& data, const TrainConfig& config, std::uint64_t iter) {
  if (data.samples.empty()) throw std::invalid_argument("make_batch: empty dataset");
  Rng pick(Rng::derive(config.seed, iter, 0x6261746368ULL));
  std::vector<std::size_t> indices(config.batch_size);
  for (auto& i : indices) i = pick.index(data.samples.size());

  AugmentConfig aug;
  aug.crop_size = config.crop_size;
  std::vector<SegmentationSample> samples(indices.size());
  const auto n = static_cast<std::ptrdiff_t>(indices.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < n; ++s) {
    const auto slot = static_cast<std::size_t>(s);
    Rng rng(Rng::derive(Rng::derive(config.seed, indices[slot], iter), slot));
    samples[slot] = augment(data.samples[indices[slot]], rng, aug);
  }
  return assemble(samples);
}

Batch fixed_batch(const Dataset& data, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > data.samples.size()) throw std::out_of_range("fixed_batch: bad range");
  return assemble({data.samples.begin() + static_cast<std::ptrdiff_t>(first),
                   data.samples.begin() + static_cast<std::ptrdiff_t>(first + count)});
}

Trainer::Trainer(EnsembleModel<float>& model, const TrainConfig& config)
    : model_(model),
      config_(config),
      params_(model.parameters(config.backbone_lr_mult)),
      optimizer_(params_, AdamWConfig{config.weight_decay, 0.9, 0.999, 1e-8}) {
  config_.validate();
}

StepMetrics Trainer::step(const Batch& batch, std::uint64_t iter) {
  const ModelOutput<float> out = model_.forward(batch.images, true);
  const LossTerms<float> terms =
      total_loss(out.logits, out.merged, batch.labels, batch.height, batch.width, config_.ensemble_loss_weight);

  for (std::size_t i = 0; i < terms.learner.size(); ++i) {
    if (!std::isfinite(terms.learner[i])) {
      throw NonFiniteLoss("non-finite loss at iter " + std::to_string(iter) + ": learner " + std::to_string(i) +
                          " (level d" + std::to_string(model_.learners[i].level) + ") CE = " +
                          format_number(terms.learner[i]));
    }
  }
  if (!std::isfinite(terms.ensemble)) {
    throw NonFiniteLoss("non-finite loss at iter " + std::to_string(iter) + ": ensemble NLL = " +
                        format_number(terms.ensemble));
  }

  params_.zero_grad();
  backward(terms.total);
  StepMetrics m;
  m.iter = iter;
  m.loss = static_cast<double>(terms.total.item());
  m.learner_loss = terms.learner;
  m.ensemble_loss = terms.ensemble;
  const ClipResult clip = clip_grad_global_norm(params_, config_.clip_norm);
  m.grad_norm = clip.norm;
  m.clipped_norm = global_grad_norm(params_);
  m.lr = poly_lr(config_.lr, iter, config_.max_iters, config_.poly_power);
  optimizer_.step(m.lr);
  return m;
}

namespace {

constexpr const char* kParamPrefix = "param/";
constexpr const char* kBufferPrefix = "buffer/";
constexpr const char* kFirstMomentPrefix = "adam.m/";
constexpr const char* kSecondMomentPrefix = "adam.v/";

void restore(const HostTensor& src, std::span<float> dst, const Shape& shape, const std::string& name) {
  if (src.dtype() != DType::kF32 || src.shape != shape) {
    throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape) + ", model expects " +
                             shape_str(shape));
  }
  std::copy(src.f32().begin(), src.f32().end(), dst.begin());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, EnsembleModel<float>& model, const AdamW<float>* optimizer,
                     std::uint64_t iter, nlohmann::json meta) {
  Bundle b;
  meta["kind"] = "checkpoint";
  meta["iter"] = iter;
  const ParameterList<float> params = model.parameters();
  for (const auto& p : params.items()) {
    b.tensors.push_back({kParamPrefix + p.name, host_f32(p.tensor.shape(), p.tensor.to_vector())});
  }
  for (const auto& buf : model.buffers()) {
    b.tensors.push_back({kBufferPrefix + buf.name, host_f32({buf.values->size()}, *buf.values)});
  }
  if (optimizer) {
    const auto& state = optimizer->state();
    const auto& items = optimizer->parameters().items();
    meta["optimizer_step"] = state.step;
    for (std::size_t i = 0; i < items.size() && i < state.first_moment.size(); ++i) {
      b.tensors.push_back({kFirstMomentPrefix + items[i].name, host_f32(items[i].tensor.shape(), state.first_moment[i])});
      b.tensors.push_back(
          {kSecondMomentPrefix + items[i].name, host_f32(items[i].tensor.shape(), state.second_moment[i])});
    }
  }
  b.meta = std::move(meta);
  write_bundle(path, b);
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, EnsembleModel<float>& model,
                               AdamW<float>* optimizer) {
  const Bundle b = read_bundle(path);
  if (b.meta.value("kind", "") != "checkpoint") throw std::runtime_error(path.string() + " is not a checkpoint");
  ParameterList<float> params = model.parameters();
  for (auto& p : params.items()) {
    restore(b.get(kParamPrefix + p.name), p.tensor.data(), p.tensor.shape(), p.name);
  }
  for (auto& buf : model.buffers()) {
    restore(b.get(kBufferPrefix + buf.name), *buf.values, {buf.values->size()}, buf.name);
  }
  if (optimizer) {
    auto& state = optimizer->state();
    const auto& items = optimizer->parameters().items();
    state.step = b.meta.value("optimizer_step", std::uint64_t{0});
    for (std::size_t i = 0; i < items.size(); ++i) {
      state.first_moment[i].assign(items[i].tensor.numel(), 0.0f);
      state.second_moment[i].assign(items[i].tensor.numel(), 0.0f);
      if (!b.contains(kFirstMomentPrefix + items[i].name)) continue;
      restore(b.get(kFirstMomentPrefix + items[i].name), state.first_moment[i], items[i].tensor.shape(),
              items[i].name);
      restore(b.get(kSecondMomentPrefix + items[i].name), state.second_moment[i], items[i].tensor.shape(),
              items[i].name);
    }
  }
  return {b.meta.value("iter", std::uint64_t{0}), b.meta};
}

nlohmann::json read_checkpoint_meta(const std::filesystem::path& path) { return read_bundle(path).meta; }

std::string file_digest(const std::filesystem::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t c : read_file(path)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

TrainResult train_loop(EnsembleModel<float>& model, const TrainConfig& config, const Dataset& train,
                       const Dataset* val, const LoopOptions& options) {
  config.validate();
  Trainer trainer(model, config);
  TrainResult result;
  std::uint64_t iter = 0;
  if (!options.resume.empty()) iter = load_checkpoint(options.resume, model, &trainer.optimizer()).iter;

  auto checkpoint = [&](std::uint64_t at) {
    if (!options.checkpoint.empty()) save_checkpoint(options.checkpoint, model, &trainer.optimizer(), at, options.meta);
  };

  const std::uint64_t end = std::min(config.max_iters, options.stop_at);
  for (; iter < end; ++iter) {
    MetricsRow row;
    row.step = trainer.step(make_batch(train, config, iter), iter);
    const std::uint64_t done = iter + 1;
    const bool eval_now = val && !val->samples.empty() &&
                          ((config.eval_interval > 0 && done % config.eval_interval == 0) || done == config.max_iters);
    if (eval_now) {
      row.eval = evaluate(model, *val, config.batch_size);
      checkpoint(done);
    }
    if (options.on_row) options.on_row(row);
    result.log.push_back(std::move(row));
  }
  result.final_iter = iter;
  checkpoint(iter);
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& log, std::size_t learners) {
  std::ostringstream os;
  os << "iter,loss,lr,grad_norm,clipped_norm";
  for (std::size_t i = 0; i < learners; ++i) os << ",val_miou_learner" << i;
  os << ",val_miou_ensemble\n";
  for (const auto& row : log) {
    os << row.step.iter << ',' << format_number(row.step.loss) << ',' << format_number(row.step.lr) << ','
       << format_number(row.step.grad_norm) << ',' << format_number(row.step.clipped_norm);
    for (std::size_t i = 0; i < learners; ++i) {
      os << ',';
      if (row.eval && i < row.eval->learner_miou.size()) os << format_number(row.eval->learner_miou[i]);
    }
    os << ',';
    if (row.eval) os << format_number(row.eval->ensemble_miou);
    os << '\n';
  }
  const std::string text = os.str();
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace senf
