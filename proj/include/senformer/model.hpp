#pragma once

// The self-ensemble: backbone -> pyramid -> one learner per level (or per
// level and replica) -> aligned, merged prediction.

#include <cstdint>
#include <memory>
#include <string_view>
#include <vector>

#include "senformer/learner.hpp"
#include "senformer/merge.hpp"
#include "senformer/pyramid.hpp"

namespace senf {

enum class HeadKind { kEnsemble, kFeaturesFusion };
HeadKind parse_head_kind(std::string_view name);
std::string_view to_string(HeadKind h);

struct ModelConfig {
  std::size_t d = 32;
  std::size_t n_classes = 6;
  std::size_t num_blocks = 6;  // L
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t window = 4;
  std::size_t window_heads = 4;
  std::size_t learners_per_scale = 1;
  std::size_t attention_hidden = 16;
  SharingPolicy sharing = SharingPolicy::kRepeated;
  MergeStrategy merge = MergeStrategy::kAverage;
  PyramidVariant pyramid = PyramidVariant::kFpnt;
  MergeSpace merge_space = MergeSpace::kProb;
  NormPlacement norm = NormPlacement::kPre;
  HeadKind head = HeadKind::kEnsemble;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument on an inconsistent combination.
  void validate() const;
  std::size_t learner_count() const { return head == HeadKind::kEnsemble ? 4 * learners_per_scale : 1; }
};

struct ParamCounts {
  std::size_t backbone = 0;
  std::size_t pyramid = 0;
  std::size_t decoders = 0;
  std::size_t embeddings = 0;
  std::size_t merge = 0;   // attention modules
  std::size_t fusion = 0;  // features-fusion head

  std::size_t total() const { return backbone + pyramid + decoders + embeddings + merge + fusion; }
};

template <typename T>
struct ModelOutput {
  std::vector<Tensor<T>> logits;   // per learner, native resolution
  std::vector<Tensor<T>> aligned;  // per learner, on the stride-4 grid
  Tensor<T> merged;                // merged prediction on the stride-4 grid
};

// Selected learners, by index into EnsembleModel::learners.
using LearnerMask = std::vector<bool>;

template <typename T>
class EnsembleModel {
  ModelConfig config_;
  Rng init_rng_;

 public:
  // Parameters are drawn from one generator seeded with config.seed, in
  // declaration order of the components below.
  explicit EnsembleModel(const ModelConfig& config);
  EnsembleModel(const EnsembleModel&) = delete;
  EnsembleModel& operator=(const EnsembleModel&) = delete;

  const ModelConfig& config() const { return config_; }

  FeaturePyramid<T> features(const Tensor<T>& images, bool training);
  // Per-learner logits at native resolution.
  std::vector<Tensor<T>> learner_logits(const Tensor<T>& images, bool training);
  ModelOutput<T> forward(const Tensor<T>& images, bool training);

  // Merges aligned learner logits under `strategy`, restricted to `mask`.
  // Output is a per-pixel distribution except for majority (vote scores).
  Tensor<T> merge_predictions(const std::vector<Tensor<T>>& aligned, const LearnerMask& mask,
                              MergeStrategy strategy, bool training);

  LearnerMask full_mask() const { return LearnerMask(learners.size(), true); }
  // Mask selecting every learner attached to one of `levels` (2..5).
  LearnerMask mask_for_levels(const std::vector<std::size_t>& levels) const;

  ParameterList<T> parameters(double backbone_lr_scale = 1.0) const;
  std::vector<NamedBuffer<T>> buffers();
  ParamCounts param_count() const;
  std::size_t distinct_block_count() const;
  std::size_t distinct_embedding_count() const;

  Backbone<T> backbone;
  Pyramid<T> pyramid;
  std::unique_ptr<FeaturesFusion<T>> fusion;
  std::vector<Learner<T>> learners;
  std::vector<AttentionModule<T>> attention;
};

template <typename T>
struct EnsemblePrediction {
  Tensor<T> merged;                  // [B,N,H,W] at input resolution
  std::vector<Tensor<T>> per_learner;  // probabilities at input resolution, selected learners only
  std::vector<std::size_t> learner_indices;
};

// Evaluation-mode prediction without graph recording.
template <typename T>
EnsemblePrediction<T> ensemble_predict(EnsembleModel<T>& model, const Tensor<T>& images, const LearnerMask& mask,
                                       MergeStrategy strategy);

}  // namespace senf
