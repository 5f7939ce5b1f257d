#include "senformer/pyramid.hpp"

#include <stdexcept>

namespace senf {

namespace {

template <typename T>
Tensor<T> batched(const Tensor<T>& x) {
  if (x.ndim() == 4) return x;
  if (x.ndim() == 3) {
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    return reshape(x, s);
  }
  throw ShapeError("expected [B,C,H,W] or [C,H,W], got " + shape_str(x.shape()));
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

void check_input_extent(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || height % kInputMultiple || width % kInputMultiple) {
    throw std::invalid_argument("input " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by 32; pad the image to a multiple of 32");
  }
}

template <typename T>
Backbone<T>::Backbone(Rng& rng) {
  const auto& ch = kBackboneChannels;
  layers.push_back(ConvBnRelu<T>::make(3, ch[0], 3, 2, rng));
  layers.push_back(ConvBnRelu<T>::make(ch[0], ch[0], 3, 2, rng));
  for (std::size_t s = 1; s < 4; ++s) {
    layers.push_back(ConvBnRelu<T>::make(ch[s - 1], ch[s], 3, 2, rng));
    layers.push_back(ConvBnRelu<T>::make(ch[s], ch[s], 3, 1, rng));
  }
}

template <typename T>
BackboneFeatures<T> Backbone<T>::forward(const Tensor<T>& image, bool training) {
  Tensor<T> x = batched(image);
  if (x.dim(1) != 3) throw ShapeError("backbone expects 3 input channels, got " + shape_str(image.shape()));
  check_input_extent(x.dim(2), x.dim(3));
  BackboneFeatures<T> out;
  x = layers[0].forward(x, training);
  out.c[0] = layers[1].forward(x, training);
  for (std::size_t s = 1; s < 4; ++s) {
    x = layers[2 * s].forward(out.c[s - 1], training);
    out.c[s] = layers[2 * s + 1].forward(x, training);
  }
  return out;
}

template <typename T>
void Backbone<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].collect(prefix + ".layer" + std::to_string(i), out, lr_scale);
  }
}

template <typename T>
void Backbone<T>::buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].buffers(prefix + ".layer" + std::to_string(i), out);
  }
}

std::vector<std::int64_t> window_partition_index(std::size_t batch, std::size_t d, std::size_t h,
                                                 std::size_t w, std::size_t window) {
  const std::size_t nwy = ceil_div(h, window), nwx = ceil_div(w, window);
  const std::size_t area = window * window;
  std::vector<std::int64_t> index(batch * nwy * nwx * area * d);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t wy = 0; wy < nwy; ++wy) {
      for (std::size_t wx = 0; wx < nwx; ++wx) {
        for (std::size_t t = 0; t < area; ++t) {
          const std::size_t y = wy * window + t / window;
          const std::size_t x = wx * window + t % window;
          for (std::size_t c = 0; c < d; ++c) {
            index[o++] = (y < h && x < w) ? static_cast<std::int64_t>(((b * d + c) * h + y) * w + x) : -1;
          }
        }
      }
    }
  }
  return index;
}

std::vector<std::int64_t> window_merge_index(std::size_t batch, std::size_t d, std::size_t h,
                                             std::size_t w, std::size_t window) {
  const std::size_t nwy = ceil_div(h, window), nwx = ceil_div(w, window);
  const std::size_t area = window * window;
  std::vector<std::int64_t> index(batch * d * h * w);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t win = (b * nwy + y / window) * nwx + x / window;
          const std::size_t t = (y % window) * window + x % window;
          index[o++] = static_cast<std::int64_t>((win * area + t) * d + c);
        }
      }
    }
  }
  return index;
}

template <typename T>
WindowTransformerBlock<T> WindowTransformerBlock<T>::make(std::size_t d, const WindowBlockConfig& config,
                                                          Rng& rng) {
  if (config.window == 0 || config.heads == 0 || d % config.heads) {
    throw std::invalid_argument("window block: heads must divide d and window must be positive");
  }
  WindowTransformerBlock b;
  b.norm1 = LayerNorm<T>::make(d);
  b.qkv = Linear<T>::make(d, 3 * d, false, rng);
  b.proj = Linear<T>::make(d, d, true, rng);
  b.norm2 = LayerNorm<T>::make(d);
  b.fc1 = Linear<T>::make(d, config.mlp_ratio * d, true, rng);
  b.fc2 = Linear<T>::make(config.mlp_ratio * d, d, true, rng);
  b.config = config;
  return b;
}

template <typename T>
Tensor<T> WindowTransformerBlock<T>::forward(const Tensor<T>& input) const {
  const Tensor<T> x = batched(input);
  const std::size_t batch = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t win = config.window;
  const std::size_t windows = batch * ceil_div(h, win) * ceil_div(w, win);

  Tensor<T> t = gather(x, {windows, win * win, d}, window_partition_index(batch, d, h, w, win));
  const Tensor<T> qkv_out = qkv(norm1(t));
  const Tensor<T> attn = multi_head_attention(slice(qkv_out, 2, 0, d), slice(qkv_out, 2, d, d),
                                              slice(qkv_out, 2, 2 * d, d), config.heads);
  t = add(t, proj(attn));
  t = add(t, fc2(gelu(fc1(norm2(t)))));
  Tensor<T> out = gather(t, {batch, d, h, w}, window_merge_index(batch, d, h, w, win));
  return input.ndim() == 3 ? reshape(out, input.shape()) : out;
}

template <typename T>
void WindowTransformerBlock<T>::zero_output_projections() {
  proj.zero();
  fc2.zero();
}

template <typename T>
void WindowTransformerBlock<T>::collect(const std::string& prefix, ParameterList<T>& out,
                                        double lr_scale) const {
  norm1.collect(prefix + ".norm1", out, lr_scale);
  qkv.collect(prefix + ".qkv", out, lr_scale);
  proj.collect(prefix + ".proj", out, lr_scale);
  norm2.collect(prefix + ".norm2", out, lr_scale);
  fc1.collect(prefix + ".fc1", out, lr_scale);
  fc2.collect(prefix + ".fc2", out, lr_scale);
}

PyramidVariant parse_pyramid_variant(std::string_view name) {
  if (name == "fpn") return PyramidVariant::kFpn;
  if (name == "fpnt") return PyramidVariant::kFpnt;
  if (name == "none") return PyramidVariant::kNone;
  throw std::invalid_argument("unknown pyramid variant '" + std::string(name) + "' (fpn|fpnt|none)");
}

std::string_view to_string(PyramidVariant v) {
  switch (v) {
    case PyramidVariant::kFpn: return "fpn";
    case PyramidVariant::kFpnt: return "fpnt";
    case PyramidVariant::kNone: return "none";
  }
  return "?";
}

template <typename T>
Pyramid<T>::Pyramid(PyramidVariant variant_, std::size_t d_, const std::array<std::size_t, 4>& in_channels,
                    const WindowBlockConfig& window, Rng& rng)
    : variant(variant_), d(d_) {
  for (std::size_t i = 0; i < 4; ++i) laterals[i] = Conv2d<T>::make(in_channels[i], d, 1, 1, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    if (variant == PyramidVariant::kFpn) smooth_convs.push_back(Conv2d<T>::make(d, d, 3, 1, rng));
    if (variant == PyramidVariant::kFpnt) smooth_blocks.push_back(WindowTransformerBlock<T>::make(d, window, rng));
  }
}

template <typename T>
FeaturePyramid<T> Pyramid<T>::forward(const BackboneFeatures<T>& feats) const {
  std::array<Tensor<T>, 4> lateral;
  for (std::size_t i = 0; i < 4; ++i) lateral[i] = laterals[i](feats.c[i]);
  FeaturePyramid<T> out;
  out.p[3] = lateral[3];
  for (std::size_t i = 0; i < 3; ++i) {
    if (variant == PyramidVariant::kNone) {
      out.p[i] = lateral[i];
      continue;
    }
    const Tensor<T> merged = add(lateral[i], upsample_nearest(lateral[i + 1], 2));
    out.p[i] = variant == PyramidVariant::kFpn ? smooth_convs[i](merged) : smooth_blocks[i].forward(merged);
  }
  return out;
}

template <typename T>
void Pyramid<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  for (std::size_t i = 0; i < 4; ++i) {
    laterals[i].collect(prefix + ".lateral" + std::to_string(i + 2), out, lr_scale);
  }
  for (std::size_t i = 0; i < smooth_convs.size(); ++i) {
    smooth_convs[i].collect(prefix + ".smooth" + std::to_string(i + 2), out, lr_scale);
  }
  for (std::size_t i = 0; i < smooth_blocks.size(); ++i) {
    smooth_blocks[i].collect(prefix + ".wtb" + std::to_string(i + 2), out, lr_scale);
  }
}

template <typename T>
FeaturesFusion<T>::FeaturesFusion(std::size_t d, Rng& rng) : fuse(ConvBnRelu<T>::make(4 * d, d, 3, 1, rng)) {}

template <typename T>
Tensor<T> FeaturesFusion<T>::forward(const FeaturePyramid<T>& pyr, bool training) {
  const Tensor<T>& p2 = pyr.p[0];
  const std::size_t h = p2.dim(p2.ndim() - 2), w = p2.dim(p2.ndim() - 1);
  std::vector<Tensor<T>> parts{batched(p2)};
  for (std::size_t i = 1; i < 4; ++i) parts.push_back(batched(upsample_bilinear(pyr.p[i], h, w)));
  return fuse.forward(concat(parts, 1), training);
}

template <typename T>
void FeaturesFusion<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  fuse.collect(prefix + ".fuse", out, lr_scale);
}

template <typename T>
void FeaturesFusion<T>::buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
  fuse.buffers(prefix + ".fuse", out);
}

template class Backbone<float>;
template class Backbone<double>;
template struct WindowTransformerBlock<float>;
template struct WindowTransformerBlock<double>;
template class Pyramid<float>;
template class Pyramid<double>;
template class FeaturesFusion<float>;
template class FeaturesFusion<double>;

}  // namespace senf
