#pragma once

// Segmentation metrics and the diagnostic procedures run on trained models:
// learner-subset ablation, channel variance of predictions and class
// embedding cosine similarity.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "senformer/data.hpp"
#include "senformer/model.hpp"

namespace senf {

// rows = ground truth, columns = prediction
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes);

  // Pixels whose truth equals `ignore_index` are skipped.
  void add(std::span<const std::int32_t> truth, std::span<const std::int32_t> prediction,
           std::int32_t ignore_index = kIgnoreIndex);
  void merge(const ConfusionMatrix& other);

  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t prediction) const { return counts_[truth * n_ + prediction]; }
  std::uint64_t total() const;
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  bool operator==(const ConfusionMatrix& other) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct IoUResult {
  std::vector<std::optional<double>> per_class;  // empty where TP+FP+FN == 0
  double mean = 0.0;
};

// Throws std::domain_error("no evaluable classes") when every class is excluded.
IoUResult miou(const ConfusionMatrix& cm);

// Runs `fn(images [b,3,H,W], first_index, count)` over consecutive batches.
template <typename Fn>
void for_each_batch(const Dataset& data, std::size_t batch_size, Fn&& fn);

Tensor<float> stack_images(const Dataset& data, std::size_t first, std::size_t count);

struct EvalResult {
  std::vector<double> learner_miou;  // one per learner
  double ensemble_miou = 0.0;
};

// Learners' own predictions and the configured merge, at input resolution.
EvalResult evaluate(EnsembleModel<float>& model, const Dataset& data, std::size_t batch_size = 8);

// mIoU of the merge over `mask` at input resolution.
double evaluate_subset(EnsembleModel<float>& model, const Dataset& data, const LearnerMask& mask,
                       MergeStrategy strategy, std::size_t batch_size = 8);

struct AblationRow {
  std::string label;  // e.g. "d2", "d2+d3+d4", "all"
  LearnerMask mask;
  MergeStrategy strategy;
  double miou = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // d2, d3, d4, d5, d2+d3+d4, all
  double learner_mean = 0.0;      // mean of the four singleton rows
};

// Attention strategies cannot merge a partial subset; that row falls back to
// averaging and says so in its strategy field.
AblationTable subset_ablation(EnsembleModel<float>& model, const Dataset& data, MergeStrategy strategy,
                              std::size_t batch_size = 8);

// Mean over positions of the population variance along the class axis.
double mean_channel_variance(const Tensor<float>& prediction);

struct VarianceTable {
  double ensemble = 0.0;
  std::vector<double> learners;  // d2..d5 (one per learner)
};

VarianceTable channel_variance(EnsembleModel<float>& model, const Dataset& data, std::size_t batch_size = 8);

inline constexpr std::size_t kCosineBins = 40;

struct CosineStats {
  std::vector<std::uint64_t> histogram;  // 40 bins on [-1, 1]
  std::size_t pairs = 0;                 // counted pairs
  std::size_t skipped = 0;               // pairs involving a zero-norm row
  double mean_abs = 0.0;
};

// One histogram per embedding matrix [N,d] over pairs k < l.
std::vector<CosineStats> cosine_similarity_stats(const std::vector<Tensor<float>>& cls_sets);

template <typename Fn>
void for_each_batch(const Dataset& data, std::size_t batch_size, Fn&& fn) {
  if (batch_size == 0) batch_size = 1;
  for (std::size_t first = 0; first < data.samples.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, data.samples.size() - first);
    fn(stack_images(data, first, count), first, count);
  }
}

}  // namespace senf
