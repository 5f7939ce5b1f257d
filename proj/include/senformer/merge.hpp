#pragma once

// Alignment of per-learner predictions to one grid and the five merging
// strategies. Inputs are [N,h,w] or [B,N,h,w]; the class axis is the third
// from last. Lists are ordered fine -> coarse (level ascending).

#include <string>
#include <string_view>
#include <vector>

#include "senformer/nn.hpp"

namespace senf {

enum class MergeStrategy { kAverage, kProduct, kMajority, kHierarchical, kExplicit };
MergeStrategy parse_merge_strategy(std::string_view name);
std::string_view to_string(MergeStrategy s);
bool uses_attention(MergeStrategy s);
// 3 for hierarchical, 4 for explicit, 0 otherwise.
std::size_t attention_module_count(MergeStrategy s);

enum class MergeSpace { kProb, kLogit };
MergeSpace parse_merge_space(std::string_view name);
std::string_view to_string(MergeSpace s);

inline constexpr double kProductFloor = 1e-12;
inline constexpr double kExplicitEps = 1e-8;

template <typename T>
std::size_t class_axis(const Tensor<T>& x) {
  if (x.ndim() < 3) throw ShapeError("prediction must be [N,h,w] or [B,N,h,w], got " + shape_str(x.shape()));
  return x.ndim() - 3;
}

// Bilinear resize to (h, w); maps already at that size pass through.
template <typename T>
std::vector<Tensor<T>> align_logits(const std::vector<Tensor<T>>& logits, std::size_t h, std::size_t w);

template <typename T> Tensor<T> merge_average(const std::vector<Tensor<T>>& probs);
// softmax over classes of sum_i log(max(p_i, 1e-12)).
template <typename T> Tensor<T> merge_product(const std::vector<Tensor<T>>& probs);
// Unnormalised product prod_i p_i, kept for argmax comparisons.
template <typename T> Tensor<T> merge_product_raw(const std::vector<Tensor<T>>& probs);
// (1/M) sum_i p_i masked to each learner's argmax class.
template <typename T> Tensor<T> merge_majority(const std::vector<Tensor<T>>& probs);

// A_5 = X_5, A_i = alpha_i X_i + (1 - alpha_i) A_{i+1}; returns A_2.
// `alphas` holds the 3 masks for levels 2..4, each broadcastable over classes.
template <typename T>
Tensor<T> merge_hierarchical(const std::vector<Tensor<T>>& logits, const std::vector<Tensor<T>>& alphas);
// sum_i w_i X_i / (sum_i w_i + 1e-8) with one mask per learner.
template <typename T>
Tensor<T> merge_explicit(const std::vector<Tensor<T>>& logits, const std::vector<Tensor<T>>& weights);

// conv3x3(N->hidden) BN ReLU conv3x3(hidden->hidden) BN ReLU conv1x1(->1) sigmoid
template <typename T>
struct AttentionModule {
  ConvBnRelu<T> conv1;
  ConvBnRelu<T> conv2;
  Conv2d<T> out;

  static AttentionModule make(std::size_t n_classes, std::size_t hidden, Rng& rng);
  Tensor<T> forward(const Tensor<T>& logits, bool training);
  void collect(const std::string& prefix, ParameterList<T>& out_params, double lr_scale = 1.0) const;
  void buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out_buffers);
};

template <typename T>
Tensor<T> merge_hierarchical(const std::vector<Tensor<T>>& logits, std::vector<AttentionModule<T>>& modules,
                             bool training);
template <typename T>
Tensor<T> merge_explicit(const std::vector<Tensor<T>>& logits, std::vector<AttentionModule<T>>& modules,
                         bool training);

}  // namespace senf
