#pragma once

// Composite loss, the optimisation step and the iteration-based training loop
// with evaluation, checkpointing and resume.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "senformer/analysis.hpp"
#include "senformer/data.hpp"
#include "senformer/model.hpp"

namespace senf {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::uint64_t max_iters = 2000;
  std::size_t batch_size = 8;
  std::size_t crop_size = 64;
  double clip_norm = 3.0;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  double ensemble_loss_weight = 1.0;  // lambda
  double backbone_lr_mult = 0.1;
  std::uint64_t eval_interval = 500;  // 0 disables periodic evaluation

  void validate() const;
};

template <typename T>
struct LossTerms {
  Tensor<T> total;
  std::vector<double> learner;  // CE of each learner
  double ensemble = 0.0;        // NLL of the merged prediction
};

// sum_i CE(up(logits_i), labels) + lambda * NLL(log up(merged), labels), with
// every map bilinearly resized to the label grid (h, w). The ensemble term is
// left out of the graph when lambda is 0.
template <typename T>
LossTerms<T> total_loss(const std::vector<Tensor<T>>& learner_logits, const Tensor<T>& merged,
                        std::span<const std::int32_t> labels, std::size_t h, std::size_t w, double lambda);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Batch {
  Tensor<float> images;               // [B,3,H,W]
  std::vector<std::int32_t> labels;   // [B,H,W]
  std::size_t height = 0;
  std::size_t width = 0;
};

// Draws batch_size samples with replacement and augments each with its own
// stream; depends only on (seed, iter).
Batch make_batch(const Dataset& data, const TrainConfig& config, std::uint64_t iter);
// Samples [first, first+count) as-is.
Batch fixed_batch(const Dataset& data, std::size_t first, std::size_t count);

struct StepMetrics {
  std::uint64_t iter = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;     // before clipping
  double clipped_norm = 0.0;  // after clipping
  std::vector<double> learner_loss;
  double ensemble_loss = 0.0;
};

class Trainer {
 public:
  Trainer(EnsembleModel<float>& model, const TrainConfig& config);

  // forward -> loss -> backward -> clip -> AdamW at poly_lr(iter)
  StepMetrics step(const Batch& batch, std::uint64_t iter);

  EnsembleModel<float>& model() { return model_; }
  AdamW<float>& optimizer() { return optimizer_; }
  const TrainConfig& config() const { return config_; }

 private:
  EnsembleModel<float>& model_;
  TrainConfig config_;
  ParameterList<float> params_;
  AdamW<float> optimizer_;
};

struct CheckpointInfo {
  std::uint64_t iter = 0;
  nlohmann::json meta;
};

// Parameters, batch-norm buffers and (if given) the optimizer state. `meta` is
// stored alongside; "iter" is set from the argument.
void save_checkpoint(const std::filesystem::path& path, EnsembleModel<float>& model, const AdamW<float>* optimizer,
                     std::uint64_t iter, nlohmann::json meta = nlohmann::json::object());
// Restores into a model built from the same configuration; names and shapes
// must match exactly.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, EnsembleModel<float>& model,
                               AdamW<float>* optimizer);
nlohmann::json read_checkpoint_meta(const std::filesystem::path& path);
// Hex FNV-1a of the file contents.
std::string file_digest(const std::filesystem::path& path);

struct MetricsRow {
  StepMetrics step;
  std::optional<EvalResult> eval;
};

struct LoopOptions {
  std::filesystem::path checkpoint;  // written at every evaluation and at the end
  std::filesystem::path resume;      // continue from this checkpoint
  std::uint64_t stop_at = UINT64_MAX;  // stop early after this many completed iterations
  nlohmann::json meta = nlohmann::json::object();  // stored in checkpoints
  std::function<void(const MetricsRow&)> on_row;
};

struct TrainResult {
  std::vector<MetricsRow> log;
  std::uint64_t final_iter = 0;
};

TrainResult train_loop(EnsembleModel<float>& model, const TrainConfig& config, const Dataset& train,
                       const Dataset* val, const LoopOptions& options = {});

// iter,loss,lr,grad_norm,clipped_norm then val mIoU per learner and ensemble
// (empty cells on rows without evaluation).
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& log,
                       std::size_t learners);

}  // namespace senf
