#pragma once

// Differentiable operators over Tensor<T>.
//
// Broadcasting (add/sub/mul/div): shapes are aligned on their trailing
// dimensions; a missing leading dimension or an extent of 1 stretches to the
// other operand's extent, any other mismatch is a ShapeError naming both
// shapes. Gradients of a broadcast operand are summed back to its shape.
//
// Spatial operators take [B,C,H,W] or [C,H,W] (treated as B = 1).

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "senformer/tensor.hpp"

namespace senf {

inline constexpr std::int32_t kIgnoreIndex = 255;

enum class Activation { kRelu, kGelu, kSigmoid };
Activation parse_activation(std::string_view name);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T> Tensor<T> exp(const Tensor<T>& x);
// log(max(x, floor)); the gradient is zero where the floor is active.
template <typename T> Tensor<T> log(const Tensor<T>& x, T floor = T(0));
template <typename T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> activation(const Tensor<T>& x, Activation kind);
// Elementwise map with a caller-supplied derivative.
template <typename T>
Tensor<T> map_unary(const Tensor<T>& x, std::function<T(T)> f, std::function<T(T)> df);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> flatten(const Tensor<T>& x);
// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
// out[i] = x[index[i]], or 0 where index[i] < 0. Gradient scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::int64_t> index);
// [..] -> [copies, ..]; gradient sums over the copies.
template <typename T> Tensor<T> repeat_leading(const Tensor<T>& x, std::size_t copies);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// [m,k]x[k,n], [B,m,k]x[B,k,n] or [B,m,k]x[k,n].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x[..., in] * weight[in, out] (+ bias[out]). Pass an empty-shaped bias via
// the overload without it.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

inline constexpr double kLayerNormEps = 1e-5;
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     std::size_t axis);

// weight [out_c, in_c, k, k], bias [out_c]; output extent floor((h+2p-k)/s)+1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Training mode normalises by batch statistics (biased variance) and updates
// the running estimates with the unbiased variance; eval mode uses the
// running estimates.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                       BatchNormState<T>& state, bool training);

template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor);
// align_corners = false: src = (dst + 0.5) * in / out - 0.5, clamped at 0.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

// Mean negative log-likelihood over non-ignored positions. `log_probs` has the
// class axis at `class_axis`; targets enumerate the remaining positions in
// row-major order. All-ignored input yields 0 with a zero gradient.
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, std::span<const std::int32_t> targets,
                   std::size_t class_axis = 0, std::int32_t ignore_index = kIgnoreIndex);
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::size_t class_axis = 0, std::int32_t ignore_index = kIgnoreIndex);

// Scaled dot-product attention, heads split along the feature axis with scale
// 1/sqrt(d/heads). q [.., nq, d], k and v [.., nk, d] with matching leading
// extent (2-D or 3-D).
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads);

// Index of the maximum along `axis` for every other position; ties resolve to
// the lowest index.
template <typename T>
std::vector<std::int32_t> argmax(const Tensor<T>& x, std::size_t axis);

}  // namespace senf
