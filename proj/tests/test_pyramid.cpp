#include <gtest/gtest.h>

#include "senformer/gradcheck.hpp"
#include "senformer/ops.hpp"
#include "senformer/pyramid.hpp"
#include "pyramid_check.hpp"
#include "test_support.hpp"

namespace senf {
namespace {

using F = Tensor<float>;
using D = Tensor<double>;
using test::random_tensor;

TEST(Backbone, StrideArithmetic) {
  Rng rng(1);
  Backbone<float> bb(rng);
  auto f = bb.forward(random_tensor<float>({1, 3, 64, 64}, 2, 0, 1), false);
  EXPECT_EQ(f.c[0].shape(), (Shape{1, 16, 16, 16}));
  EXPECT_EQ(f.c[1].shape(), (Shape{1, 32, 8, 8}));
  EXPECT_EQ(f.c[2].shape(), (Shape{1, 64, 4, 4}));
  EXPECT_EQ(f.c[3].shape(), (Shape{1, 128, 2, 2}));
}

TEST(Backbone, IndivisibleInputAsksForPadding) {
  Rng rng(1);
  Backbone<float> bb(rng);
  try {
    bb.forward(F::zeros({1, 3, 48, 64}), false);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

TEST(Backbone, ZeroImageGivesConstantMaps) {
  // convs carry no bias (batch norm follows); the offset b enters through the
  // batch-norm shift, which is the identity affine map in eval mode at init
  Rng rng(1);
  Backbone<float> bb(rng);
  for (auto& layer : bb.layers) {
    layer.conv.weight = F::zeros(layer.conv.weight.shape());
    layer.bn.bias = F::full(layer.bn.bias.shape(), 0.25f);
  }
  auto f = bb.forward(F::zeros({1, 3, 32, 32}), false);
  for (const auto& c : f.c) {
    for (float v : c.to_vector()) EXPECT_EQ(v, 0.25f);
  }
}

TEST(Backbone, GradientReachesStem) {
  Rng rng(3);
  Backbone<double> bb(rng);
  ParameterList<double> ps;
  bb.collect("b", ps, 1.0);
  auto f = bb.forward(random_tensor<double>({2, 3, 32, 32}, 4, 0, 1), true);
  backward(sum(mul(f.c[3], random_tensor<double>(f.c[3].shape(), 5))));
  double norm = 0;
  for (double g : bb.layers[0].conv.weight.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

BackboneFeatures<double> random_feats(std::size_t side, const std::array<std::size_t, 4>& ch, std::uint64_t seed) {
  BackboneFeatures<double> f;
  for (std::size_t i = 0; i < 4; ++i) f.c[i] = random_tensor<double>({1, ch[i], side >> i, side >> i}, seed + i);
  return f;
}

TEST(Fpn, ZeroInputZeroOutput) {
  Rng rng(6);
  for (auto v : {PyramidVariant::kFpn, PyramidVariant::kFpnt, PyramidVariant::kNone}) {
    Pyramid<double> p(v, 8, kBackboneChannels, {}, rng);
    BackboneFeatures<double> f;
    for (std::size_t i = 0; i < 4; ++i) f.c[i] = D::zeros({1, kBackboneChannels[i], 8u >> i, 8u >> i});
    auto out = p.forward(f);
    for (const auto& m : out.p) {
      for (double x : m.to_vector()) EXPECT_EQ(x, 0.0);
    }
  }
}

TEST(Fpn, ShapeContractSharedByVariants) {
  for (auto v : {PyramidVariant::kFpn, PyramidVariant::kFpnt, PyramidVariant::kNone}) {
    Rng rng(7);
    Pyramid<double> p(v, 8, kBackboneChannels, {}, rng);
    auto out = p.forward(random_feats(16, kBackboneChannels, 10));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out.p[i].shape(), (Shape{1, 8, 16u >> i, 16u >> i}));
  }
}

void make_identity_conv(Conv2d<double>& conv, std::size_t d, std::size_t k) {
  std::vector<double> w(d * d * k * k, 0.0);
  for (std::size_t c = 0; c < d; ++c) w[((c * d + c) * k + k / 2) * k + k / 2] = 1.0;
  conv.weight = D::from_data({d, d, k, k}, w);
  conv.bias = D::zeros({d});
}

// Hand-built dataflow: P5 = C5, P_i = C_i + nearest_up(C_{i+1}) with identity
// laterals and delta-kernel smoothing.
std::vector<double> lateral_sum_oracle(const BackboneFeatures<double>& f, std::size_t level, std::size_t d) {
  const auto& fine = f.c[level];
  const std::size_t h = fine.dim(2), w = fine.dim(3);
  std::vector<double> out(d * h * w);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double v = fine.at((c * h + y) * w + x);
        if (level < 3) v += f.c[level + 1].at((c * (h / 2) + y / 2) * (w / 2) + x / 2);
        out[(c * h + y) * w + x] = v;
      }
  return out;
}

TEST(Fpn, MatchesHandBuiltDataflow) {
  const std::size_t d = 4;
  Rng rng(8);
  Pyramid<double> p(PyramidVariant::kFpn, d, {d, d, d, d}, {}, rng);
  for (auto& l : p.laterals) make_identity_conv(l, d, 1);
  for (auto& s : p.smooth_convs) make_identity_conv(s, d, 3);
  // C4 is 4x4, C5 2x2
  auto f = random_feats(16, {d, d, d, d}, 20);
  auto out = p.forward(f);
  for (std::size_t level = 0; level < 4; ++level) {
    auto want = lateral_sum_oracle(f, level, d);
    auto got = out.p[level].to_vector();
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6) << "level " << level + 2;
  }
  // top level gets no smoothing
  EXPECT_TRUE(test::bit_equal(out.p[3], f.c[3]));
}

TEST(Fpn, MatchesReferenceConvDataflowWithRandomWeights) {
  for (std::uint64_t seed : {1u, 2u, 3u}) EXPECT_LE(test::fpn_dataflow_error(seed), 1e-6);
}

TEST(Fpn, LateralTopDownUsesUnsmoothedLateral) {
  // perturbing the level-4 smoothing conv must not change P2/P3
  const std::size_t d = 4;
  Rng rng(9);
  Pyramid<double> p(PyramidVariant::kFpn, d, {3, 5, 6, 7}, {}, rng);
  auto f = random_feats(16, {3, 5, 6, 7}, 30);
  auto before = p.forward(f);
  for (auto& v : p.smooth_convs[2].weight.data()) v += 0.5;
  auto after = p.forward(f);
  EXPECT_TRUE(test::bit_equal(before.p[0], after.p[0]));
  EXPECT_TRUE(test::bit_equal(before.p[1], after.p[1]));
  EXPECT_FALSE(test::bit_equal(before.p[2], after.p[2]));
}

TEST(Fpnt, ZeroedBlocksEqualLateralSum) {
  const std::size_t d = 8;
  Rng rng(10);
  Pyramid<double> p(PyramidVariant::kFpnt, d, {d, d, d, d}, {}, rng);
  for (auto& l : p.laterals) make_identity_conv(l, d, 1);
  for (auto& b : p.smooth_blocks) b.zero_output_projections();
  auto f = random_feats(16, {d, d, d, d}, 40);
  auto out = p.forward(f);
  for (std::size_t level = 0; level < 4; ++level) {
    auto want = lateral_sum_oracle(f, level, d);
    auto got = out.p[level].to_vector();
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  }
}

TEST(Fpnt, GradcheckOn32x32Input) {
  Rng rng(11);
  Backbone<double> bb(rng);
  Pyramid<double> p(PyramidVariant::kFpnt, 8, kBackboneChannels, {4, 2, 2}, rng);
  auto image = random_tensor<double>({1, 3, 32, 32}, 12, 0, 1);
  BackboneFeatures<double> feats;
  {
    NoGradGuard ng;
    feats = bb.forward(image, false);
  }
  ParameterList<double> ps;
  p.collect("p", ps);
  std::vector<D> inputs;
  for (auto& it : ps.items()) inputs.push_back(it.tensor);
  for (auto& c : feats.c) inputs.push_back(c);
  std::array<D, 4> w;
  for (std::size_t i = 0; i < 4; ++i) w[i] = random_tensor<double>({1, 8, 8u >> i, 8u >> i}, 50 + i);
  auto f = [&] {
    auto out = p.forward(feats);
    D acc = sum(mul(out.p[0], w[0]));
    for (std::size_t i = 1; i < 4; ++i) acc = add(acc, sum(mul(out.p[i], w[i])));
    return acc;
  };
  GradcheckOptions o;
  o.tol = 1e-3;
  o.per_input_entries = 6;
  auto r = finite_diff_check(f, inputs, o);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst;
}

TEST(WindowBlock, SingleWindowEqualsFullAttention) {
  Rng rng(13);
  auto small = WindowTransformerBlock<double>::make(8, {4, 2, 2}, rng);
  auto x = random_tensor<double>({1, 8, 4, 4}, 14);
  // explicit full self-attention over the 16 tokens
  auto tokens = transpose(reshape(x, {8, 16}));
  auto h = layer_norm(tokens, small.norm1.gain, small.norm1.bias, 1);
  auto qkv = linear(h, small.qkv.weight);
  auto attn = multi_head_attention(slice(qkv, 1, 0, 8), slice(qkv, 1, 8, 8), slice(qkv, 1, 16, 8), 2);
  auto y = add(tokens, linear(attn, small.proj.weight, small.proj.bias));
  auto m = linear(gelu(linear(layer_norm(y, small.norm2.gain, small.norm2.bias, 1), small.fc1.weight, small.fc1.bias)),
                  small.fc2.weight, small.fc2.bias);
  auto want = reshape(transpose(add(y, m)), {1, 8, 4, 4}).to_vector();
  auto got = small.forward(x).to_vector();
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(WindowBlock, LocalityExact) {
  Rng rng(15);
  auto blk = WindowTransformerBlock<double>::make(8, {4, 2, 2}, rng);
  // 6x5 map: windows of side 4 with zero padding
  auto x = random_tensor<double>({1, 8, 6, 5}, 16);
  auto base = blk.forward(x);
  auto moved = x.detach();
  moved.data()[(3 * 6 + 1) * 5 + 2] += 1.0;  // channel 3, pixel (1,2): window (0,0)
  auto after = blk.forward(moved);
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t xx = 0; xx < 5; ++xx) {
        const std::size_t i = (c * 6 + y) * 5 + xx;
        if (y >= 4 || xx >= 4) EXPECT_EQ(base.at(i), after.at(i));
      }
  EXPECT_FALSE(test::bit_equal(base, after));
}

TEST(WindowBlock, LocalityOverEveryPixel) {
  EXPECT_EQ(test::window_locality_violations(8, 8, 4, 3), 0u);
  EXPECT_EQ(test::window_locality_violations(6, 7, 4, 4), 0u);
}

TEST(WindowBlock, JacobianBlockDiagonalOverWindows) {
  Rng rng(17);
  auto blk = WindowTransformerBlock<double>::make(4, {2, 2, 2}, rng);
  auto x = random_tensor<double>({1, 4, 4, 4}, 18);
  auto base = blk.forward(x);
  for (std::size_t p = 0; p < 16; ++p) {
    auto probe = x.detach();
    probe.data()[p] += 0.1;  // channel 0
    auto out = blk.forward(probe);
    const std::size_t wy = (p / 4) / 2, wx = (p % 4) / 2;
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t q = 0; q < 16; ++q) {
        const bool same = (q / 4) / 2 == wy && (q % 4) / 2 == wx;
        if (!same) EXPECT_EQ(out.at(c * 16 + q), base.at(c * 16 + q));
      }
  }
}

TEST(WindowBlock, ZeroProjectionsIdentity) {
  Rng rng(19);
  auto blk = WindowTransformerBlock<float>::make(8, {}, rng);
  blk.zero_output_projections();
  auto x = random_tensor<float>({2, 8, 5, 7}, 20);
  EXPECT_TRUE(test::bit_equal(blk.forward(x), x));
}

TEST(FeaturesFusion, ShapeConstancyAndSlots) {
  Rng rng(21);
  FeaturesFusion<double> fusion(4, rng);
  FeaturePyramid<double> pyr;
  for (std::size_t i = 0; i < 4; ++i) pyr.p[i] = D::full({1, 4, 8u >> i, 8u >> i}, 0.7);
  auto out = fusion.forward(pyr, false);
  EXPECT_EQ(out.shape(), (Shape{1, 4, 8, 8}));
  // constant input: interior pixels see the same neighbourhood
  const auto v = out.to_vector();
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t y = 1; y < 7; ++y)
      for (std::size_t x = 1; x < 7; ++x) EXPECT_NEAR(v[(c * 8 + y) * 8 + x], v[(c * 8 + 1) * 8 + 1], 1e-12);

  // the same signal in the P3 slot versus the P4 slot (all maps on one grid)
  FeaturePyramid<double> a, b;
  for (std::size_t i = 0; i < 4; ++i) {
    a.p[i] = D::zeros({1, 4, 8, 8});
    b.p[i] = D::zeros({1, 4, 8, 8});
  }
  a.p[1] = random_tensor<double>({1, 4, 8, 8}, 22);
  b.p[2] = a.p[1];
  EXPECT_FALSE(test::bit_equal(fusion.forward(a, false), fusion.forward(b, false)));
}

TEST(FeaturesFusion, ConstantMapsGiveConstantOutputWithoutBorder) {
  // with only centre taps the padding border plays no role
  Rng rng(23);
  FeaturesFusion<double> fusion(2, rng);
  auto& w = fusion.fuse.conv.weight;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    if ((i % 9) != 4) w.data()[i] = 0.0;
  }
  FeaturePyramid<double> pyr;
  for (std::size_t i = 0; i < 4; ++i) pyr.p[i] = D::full({1, 2, 8u >> i, 8u >> i}, -0.3 + 0.2 * static_cast<double>(i));
  auto v = fusion.forward(pyr, false).to_vector();
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(v[c * 64 + i], v[c * 64], 1e-12);
}

}  // namespace
}  // namespace senf
