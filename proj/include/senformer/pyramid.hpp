#pragma once

// Toy bottom-up backbone, the top-down feature pyramid (FPN / FPNT) and the
// features-fusion head used as the non-ensemble baseline.
//
// Maps are batched [B,C,H,W]; an unbatched [C,H,W] input is treated as B = 1
// and the outputs keep the batch axis.

#include <array>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "senformer/nn.hpp"

namespace senf {

inline constexpr std::array<std::size_t, 4> kBackboneChannels = {16, 32, 64, 128};
inline constexpr std::size_t kInputMultiple = 32;

// C2..C5 at strides 4/8/16/32.
template <typename T>
struct BackboneFeatures {
  std::array<Tensor<T>, 4> c;
};

// P2..P5, all with d channels.
template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, 4> p;
};

// Throws std::invalid_argument asking the caller to pad unless both extents
// are positive multiples of 32.
void check_input_extent(std::size_t height, std::size_t width);

template <typename T>
class Backbone {
 public:
  explicit Backbone(Rng& rng);

  BackboneFeatures<T> forward(const Tensor<T>& image, bool training);
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const;
  void buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out);

  // stem1, stem2 (-> C2), then (down, conv) pairs for C3, C4, C5
  std::vector<ConvBnRelu<T>> layers;
};

struct WindowBlockConfig {
  std::size_t window = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
};

// Pre-norm transformer block applied independently inside non-overlapping
// windows. Maps whose sides are not multiples of the window are zero padded
// for attention and cropped back afterwards.
template <typename T>
struct WindowTransformerBlock {
  LayerNorm<T> norm1;
  Linear<T> qkv;
  Linear<T> proj;
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;
  WindowBlockConfig config;

  static WindowTransformerBlock make(std::size_t d, const WindowBlockConfig& config, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void zero_output_projections();
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;
};

enum class PyramidVariant { kFpn, kFpnt, kNone };
PyramidVariant parse_pyramid_variant(std::string_view name);
std::string_view to_string(PyramidVariant v);

// P'_i = lateral_i(C_i); P5 = P'5; P_i = smooth_i(P'_i + up2(P'_{i+1})) for
// i = 2..4, with smooth a 3x3 conv (fpn) or a window block (fpnt). The
// "none" variant stops at the lateral projections.
template <typename T>
class Pyramid {
 public:
  Pyramid(PyramidVariant variant, std::size_t d, const std::array<std::size_t, 4>& in_channels,
          const WindowBlockConfig& window, Rng& rng);

  FeaturePyramid<T> forward(const BackboneFeatures<T>& feats) const;
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;

  PyramidVariant variant;
  std::size_t d;
  std::array<Conv2d<T>, 4> laterals;
  std::vector<Conv2d<T>> smooth_convs;                    // fpn: levels 2..4
  std::vector<WindowTransformerBlock<T>> smooth_blocks;  // fpnt: levels 2..4
};

// Resizes P3..P5 to P2's grid (bilinear), concatenates the 4d channels and
// fuses them back to d with conv3x3 -> BN -> ReLU.
template <typename T>
class FeaturesFusion {
 public:
  FeaturesFusion(std::size_t d, Rng& rng);

  Tensor<T> forward(const FeaturePyramid<T>& pyr, bool training);
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;
  void buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out);

  ConvBnRelu<T> fuse;
};

// Window partition index for gather(): maps [B,d,h,w] to [B*nw, win*win, d],
// with -1 marking zero-padded slots.
std::vector<std::int64_t> window_partition_index(std::size_t batch, std::size_t d, std::size_t h,
                                                 std::size_t w, std::size_t window);
// Inverse of the partition, cropping padded slots: [B*nw, win*win, d] -> [B,d,h,w].
std::vector<std::int64_t> window_merge_index(std::size_t batch, std::size_t d, std::size_t h,
                                             std::size_t w, std::size_t window);

}  // namespace senf
