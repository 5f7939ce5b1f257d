#pragma once

// Pyramid probes shared by the unit tests and the acceptance harness.

#include <array>
#include <cmath>
#include <vector>

#include "senformer/kernels.hpp"
#include "senformer/pyramid.hpp"
#include "test_support.hpp"

namespace senf::test {

inline BackboneFeatures<double> random_features(std::size_t side, const std::array<std::size_t, 4>& channels,
                                                std::uint64_t seed) {
  BackboneFeatures<double> f;
  for (std::size_t i = 0; i < 4; ++i) {
    f.c[i] = random_tensor<double>({1, channels[i], side >> i, side >> i}, seed + i);
  }
  return f;
}

// Direct convolution through the serial reference kernel.
inline std::vector<double> reference_conv(const std::vector<double>& image, std::size_t in_c, std::size_t h,
                                          std::size_t w, const Conv2d<double>& conv) {
  const std::size_t out_c = conv.weight.dim(0), k = conv.weight.dim(2);
  std::vector<double> out(out_c * h * w);
  const auto weight = conv.weight.to_vector();
  const auto bias = conv.bias.to_vector();
  kernels::reference::conv2d(image.data(), in_c, h, w, weight.data(), bias.data(), out_c, k, 1, k / 2, out.data());
  return out;
}

// Largest deviation between the fpn variant and a loop-level evaluation of
// P'_i = lateral_i(C_i), P5 = P'5, P_i = smooth_i(P'_i + nearest_up2(P'_{i+1})),
// with random weights and biases everywhere. The coarsest maps are 2x2 and
// the P4 grid is 4x4.
inline double fpn_dataflow_error(std::uint64_t seed) {
  const std::size_t d = 6;
  const std::array<std::size_t, 4> channels{3, 4, 5, 7};
  Rng rng(seed);
  Pyramid<double> p(PyramidVariant::kFpn, d, channels, {}, rng);
  Rng brng(seed + 1);
  for (auto* conv : {&p.laterals[0], &p.laterals[1], &p.laterals[2], &p.laterals[3], &p.smooth_convs[0],
                     &p.smooth_convs[1], &p.smooth_convs[2]}) {
    for (auto& v : conv->bias.data()) v = brng.uniform(-0.5, 0.5);
  }
  const auto f = random_features(16, channels, seed + 2);
  const auto out = p.forward(f);

  std::array<std::vector<double>, 4> lateral;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t side = 16 >> i;
    lateral[i] = reference_conv(f.c[i].to_vector(), channels[i], side, side, p.laterals[i]);
  }
  double err = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t side = 16 >> i;
    std::vector<double> want = lateral[i];
    if (i < 3) {
      std::vector<double> sum(d * side * side);
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t y = 0; y < side; ++y)
          for (std::size_t x = 0; x < side; ++x) {
            const std::size_t half = side / 2;
            sum[(c * side + y) * side + x] =
                lateral[i][(c * side + y) * side + x] + lateral[i + 1][(c * half + y / 2) * half + x / 2];
          }
      want = reference_conv(sum, d, side, side, p.smooth_convs[i]);
    }
    const auto got = out.p[i].to_vector();
    if (got.size() != want.size()) return INFINITY;
    for (std::size_t k = 0; k < got.size(); ++k) err = std::max(err, std::abs(got[k] - want[k]));
  }
  return err;
}

// Perturbs single input pixels of a window block on an h x w map and counts
// output values outside the pixel's window that change at all.
inline std::size_t window_locality_violations(std::size_t h, std::size_t w, std::size_t window, std::uint64_t seed) {
  const std::size_t d = 8;
  Rng rng(seed);
  auto blk = WindowTransformerBlock<double>::make(d, {window, 2, 2}, rng);
  const auto x = random_tensor<double>({1, d, h, w}, seed + 1);
  const auto base = blk.forward(x).to_vector();
  std::size_t violations = 0;
  for (std::size_t py = 0; py < h; ++py) {
    for (std::size_t px = 0; px < w; ++px) {
      auto probe = x.detach();
      probe.data()[((rng.index(d)) * h + py) * w + px] += 1.0;
      const auto out = blk.forward(probe).to_vector();
      bool changed_inside = false;
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) {
            const std::size_t i = (c * h + y) * w + xx;
            const bool inside = y / window == py / window && xx / window == px / window;
            if (!inside && out[i] != base[i]) ++violations;
            if (inside && out[i] != base[i]) changed_inside = true;
          }
      if (!changed_inside) ++violations;
    }
  }
  return violations;
}

}  // namespace senf::test
