#include <gtest/gtest.h>

#include <cmath>

#include "senformer/gradcheck.hpp"
#include "senformer/ops.hpp"
#include "senformer/optim.hpp"
#include "test_support.hpp"

namespace senf {
namespace {

using test::random_tensor;
using D = Tensor<double>;
using F = Tensor<float>;

TEST(Elementwise, AddAndBroadcast) {
  auto c = add(F::from_data({2}, {1, 2}), F::from_data({2}, {3, 4}));
  EXPECT_EQ(c.to_vector(), (std::vector<float>{4, 6}));
  auto b = add(F::from_data({2, 2}, {1, 2, 3, 4}), F::from_data({2}, {10, 20}));
  EXPECT_EQ(b.to_vector(), (std::vector<float>{11, 22, 13, 24}));
  auto col = add(F::from_data({2, 2}, {1, 2, 3, 4}), F::from_data({2, 1}, {10, 20}));
  EXPECT_EQ(col.to_vector(), (std::vector<float>{11, 12, 23, 24}));
}

TEST(Elementwise, MismatchNamesBothShapes) {
  try {
    add(F::zeros({2, 3}), F::zeros({4}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, MulByZeroHasZeroGrad) {
  auto x = random_tensor<double>({3}, 1);
  x.set_requires_grad();
  auto y = mul(x, D::zeros({3}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>(3, 0.0)));
  backward(sum(y));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Elementwise, ReshapeFlattenRoundtrip) {
  auto x = F::from_data({6}, {1, 2, 3, 4, 5, 6});
  auto r = reshape(x, {2, 3});
  EXPECT_EQ(r.shape(), (Shape{2, 3}));
  EXPECT_EQ(flatten(r).to_vector(), x.to_vector());
}

TEST(Elementwise, TransposeConcatSliceClamp) {
  auto x = F::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(transpose(x).to_vector(), (std::vector<float>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(concat<float>({x, x}, 0).shape(), (Shape{4, 3}));
  EXPECT_EQ(concat<float>({x, slice(x, 1, 0, 1)}, 1).to_vector(), (std::vector<float>{1, 2, 3, 1, 4, 5, 6, 4}));
  EXPECT_EQ(slice(x, 1, 1, 2).to_vector(), (std::vector<float>{2, 3, 5, 6}));
  EXPECT_EQ(clamp(x, 2.0f, 5.0f).to_vector(), (std::vector<float>{2, 2, 3, 4, 5, 5}));
}

TEST(Matmul, IdentityAndSelection) {
  auto m = F::from_data({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(F::from_data({2, 2}, {1, 0, 0, 1}), m).to_vector(), m.to_vector());
  EXPECT_EQ(matmul(F::from_data({1, 2}, {1, 0}), F::from_data({2, 1}, {2, 3})).to_vector(), (std::vector<float>{2}));
}

TEST(Matmul, InnerMismatchThrows) { EXPECT_THROW(matmul(F::zeros({2, 3}), F::zeros({2, 3})), ShapeError); }

TEST(Matmul, GradientMatchesFiniteDifferences) {
  auto a = random_tensor<double>({3, 4}, 2), b = random_tensor<double>({4, 2}, 3);
  auto w = random_tensor<double>({3, 2}, 4);
  GradcheckOptions o;
  o.tol = 1e-6;
  auto r = finite_diff_check([&] { return sum(mul(matmul(a, b), w)); }, {a, b}, o);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Softmax, ClosedForms) {
  auto s = softmax(D::from_data({2}, {0, 0}), 0).to_vector();
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  auto t = softmax(D::from_data({2}, {std::log(1.0), std::log(3.0)}), 0).to_vector();
  EXPECT_NEAR(t[0], 0.25, 1e-15);
  EXPECT_NEAR(t[1], 0.75, 1e-15);
  auto big = softmax(D::from_data({2}, {1000, 1001}), 0).to_vector();
  auto small = softmax(D::from_data({2}, {0, 1}), 0).to_vector();
  EXPECT_NEAR(big[0], small[0], 1e-15);
  EXPECT_TRUE(std::isfinite(big[1]));
}

TEST(Softmax, SumsToOneForLargeInputs) {
  auto x = random_tensor<float>({5, 7, 3}, 5, -1e4, 1e4);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto s = softmax(x, axis);
    const auto& shape = s.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= shape[i];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        double total = 0;
        for (std::size_t k = 0; k < shape[axis]; ++k) total += s.at((o * shape[axis] + k) * inner + in);
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
    }
  }
}

TEST(LayerNorm, ConstantAndTwoElement) {
  auto g = D::full({2}, 1.0), b = D::zeros({2});
  auto z = layer_norm(D::from_data({1, 2}, {5, 5}), g, b, 1).to_vector();
  EXPECT_EQ(z, (std::vector<double>{0, 0}));
  auto v = layer_norm(D::from_data({1, 2}, {1, 3}), g, b, 1).to_vector();
  // mean 2, variance 1: (x - 2) / sqrt(1 + eps)
  EXPECT_NEAR(v[0], -1.0 / std::sqrt(1.0 + kLayerNormEps), 1e-15);
  EXPECT_NEAR(v[1], 1.0 / std::sqrt(1.0 + kLayerNormEps), 1e-15);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  auto x = random_tensor<double>({3, 5}, 6), g = random_tensor<double>({5}, 7, 0.5, 1.5),
       b = random_tensor<double>({5}, 8);
  auto w = random_tensor<double>({3, 5}, 9);
  GradcheckOptions o;
  o.tol = 1e-5;
  EXPECT_TRUE(finite_diff_check([&] { return sum(mul(layer_norm(x, g, b, 1), w)); }, {x, g, b}, o).passed);
}

TEST(LayerNorm, ZeroLengthAxisThrows) {
  EXPECT_ANY_THROW(layer_norm(F::zeros({2, 0}), F::zeros({0}), F::zeros({0}), 1));
}

TEST(Conv2d, IdentityKernels) {
  auto x = random_tensor<float>({1, 3, 5, 5}, 10);
  std::vector<float> eye(9, 0.0f);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0f;
  auto one = conv2d(x, F::from_data({3, 3, 1, 1}, eye), F::zeros({3}), 1, 0);
  EXPECT_EQ(one.to_vector(), x.to_vector());
  std::vector<float> delta(3 * 3 * 9, 0.0f);
  for (int i = 0; i < 3; ++i) delta[(i * 3 + i) * 9 + 4] = 1.0f;
  auto three = conv2d(x, F::from_data({3, 3, 3, 3}, delta), F::zeros({3}), 1, 1);
  EXPECT_EQ(three.to_vector(), x.to_vector());
}

TEST(Conv2d, OutputExtentFormula) {
  auto y = conv2d(F::zeros({1, 2, 7, 6}), F::zeros({4, 2, 3, 3}), F::zeros({4}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 4, 3}));
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(conv2d(F::zeros({1, 2, 5, 5}), F::zeros({4, 3, 3, 3}), F::zeros({4}), 1, 1), ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  auto x = random_tensor<double>({2, 3, 5, 5}, 11), k = random_tensor<double>({2, 3, 3, 3}, 12),
       b = random_tensor<double>({2}, 13);
  auto w = random_tensor<double>({2, 2, 5, 5}, 14);
  GradcheckOptions o;
  o.tol = 1e-5;
  EXPECT_TRUE(finite_diff_check([&] { return sum(mul(conv2d(x, k, b, 1, 1), w)); }, {x, k, b}, o).passed);
}

TEST(BatchNorm, ZeroVarianceGivesZeros) {
  BatchNormState<double> st(2);
  auto y = batch_norm2d(D::full({3, 2, 2, 2}, 4.0), D::full({2}, 1.0), D::zeros({2}), st, true);
  for (double v : y.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, EvalIdentityStatistics) {
  BatchNormState<double> st(2);
  auto x = random_tensor<double>({2, 2, 3, 3}, 15);
  auto y = batch_norm2d(x, D::full({2}, 1.0), D::zeros({2}), st, false);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.at(i), x.at(i) / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, TrainingOutputHasZeroChannelMean) {
  BatchNormState<double> st(3);
  auto x = random_tensor<double>({4, 3, 5, 5}, 16, -3, 7);
  auto y = batch_norm2d(x, D::full({3}, 1.0), D::zeros({3}), st, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) m += y.at((b * 3 + c) * 25 + i);
    EXPECT_LT(std::abs(m / 100.0), 1e-6);
  }
  // running statistics moved toward the batch by momentum 0.1
  EXPECT_NE(st.running_mean[0], 0.0);
}

TEST(Activation, Definitions) {
  auto r = activation(F::from_data({2}, {-1, 2}), parse_activation("relu")).to_vector();
  EXPECT_EQ(r, (std::vector<float>{0, 2}));
  EXPECT_EQ(activation(F::from_data({1}, {0}), parse_activation("sigmoid")).item(), 0.5f);
  EXPECT_THROW(parse_activation("tanh"), std::invalid_argument);
}

TEST(Activation, GeluGradient) {
  auto x = random_tensor<double>({10}, 17, -3, 3);
  GradcheckOptions o;
  o.tol = 1e-5;
  auto w = random_tensor<double>({10}, 18);
  EXPECT_TRUE(finite_diff_check([&] { return sum(mul(gelu(x), w)); }, {x}, o).passed);
}

TEST(Upsample, NearestReplicates) {
  auto y = upsample_nearest(F::from_data({1, 1, 1}, {7}), 2);
  EXPECT_EQ(y.to_vector(), (std::vector<float>(4, 7.0f)));
}

TEST(Upsample, BilinearConstant) {
  auto y = upsample_bilinear(F::full({1, 2, 3, 3}, 2.5f), 7, 11);
  for (float v : y.to_vector()) EXPECT_FLOAT_EQ(v, 2.5f);
}

// align_corners = false interpolation written out independently
std::vector<double> bilinear_oracle(const std::vector<double>& in, int ih, int iw, int oh, int ow) {
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  auto coord = [](int dst, int insz, int outsz, int& i0, int& i1, double& f) {
    double src = (dst + 0.5) * insz / outsz - 0.5;
    if (src < 0) src = 0;
    i0 = static_cast<int>(std::floor(src));
    if (i0 > insz - 1) i0 = insz - 1;
    i1 = std::min(i0 + 1, insz - 1);
    f = src - i0;
  };
  for (int y = 0; y < oh; ++y) {
    int y0, y1;
    double fy;
    coord(y, ih, oh, y0, y1, fy);
    for (int x = 0; x < ow; ++x) {
      int x0, x1;
      double fx;
      coord(x, iw, ow, x0, x1, fx);
      const double top = in[y0 * iw + x0] * (1 - fx) + in[y0 * iw + x1] * fx;
      const double bot = in[y1 * iw + x0] * (1 - fx) + in[y1 * iw + x1] * fx;
      out[y * ow + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

TEST(Upsample, BilinearMatchesOracle) {
  const std::vector<double> in{1, 2, 3, 4};
  auto y = upsample_bilinear(D::from_data({1, 1, 2, 2}, in), 4, 4).to_vector();
  auto want = bilinear_oracle(in, 2, 2, 4, 4);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-6);
  // corner value and the first interior sample
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 1.25, 1e-12);
  auto z = random_tensor<double>({1, 1, 3, 5}, 19);
  auto zz = upsample_bilinear(z, 7, 4).to_vector();
  auto zw = bilinear_oracle(z.to_vector(), 3, 5, 7, 4);
  for (std::size_t i = 0; i < zw.size(); ++i) EXPECT_NEAR(zz[i], zw[i], 1e-12);
}

TEST(Upsample, NonPositiveTargetThrows) { EXPECT_ANY_THROW(upsample_bilinear(F::zeros({1, 1, 2, 2}), 0, 3)); }

TEST(CrossEntropy, PerfectAndUniform) {
  std::vector<std::int32_t> t{0, 2};
  auto perfect = cross_entropy<double>(D::from_data({3, 2}, {50, 0, 0, 0, 0, 50}), t, 0);
  EXPECT_LT(perfect.item(), 1e-15);
  auto uniform = cross_entropy<double>(D::zeros({5, 2}), std::vector<std::int32_t>{1, 4}, 0);
  EXPECT_NEAR(uniform.item(), std::log(5.0), 1e-15);
}

TEST(CrossEntropy, AllIgnoredIsZeroWithZeroGrad) {
  auto x = random_tensor<double>({3, 2}, 20);
  x.set_requires_grad();
  auto l = cross_entropy<double>(x, std::vector<std::int32_t>{255, 255}, 0);
  EXPECT_EQ(l.item(), 0.0);
  backward(l);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(CrossEntropy, OutOfRangeTargetThrows) {
  EXPECT_ANY_THROW(cross_entropy<double>(D::zeros({3, 2}), std::vector<std::int32_t>{1, 3}, 0));
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  auto x = random_tensor<double>({3, 4}, 21, -2, 2);
  std::vector<std::int32_t> t{0, 2, 1, 255};
  GradcheckOptions o;
  o.tol = 1e-5;
  EXPECT_TRUE(finite_diff_check([&] { return cross_entropy<double>(x, t, 0); }, {x}, o).passed);
}

TEST(Backward, SquareAndFanOut) {
  auto x = D::from_data({1}, {3});
  x.set_requires_grad();
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 6.0);
  auto y = D::from_data({1}, {3});
  y.set_requires_grad();
  backward(sum(add(y, y)));
  EXPECT_EQ(y.grad()[0], 2.0);
}

TEST(Backward, RepeatedBackwardAccumulates) {
  auto x = D::from_data({1}, {3});
  x.set_requires_grad();
  auto y = sum(mul(x, x));
  backward(y);
  backward(y);
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, NonScalarRootThrows) {
  auto x = random_tensor<double>({2}, 22);
  x.set_requires_grad();
  EXPECT_ANY_THROW(backward(mul(x, x)));
}

TEST(Backward, SharedSubexpressionMatchesUnrolled) {
  auto x = random_tensor<double>({6}, 23);
  auto x2 = x.detach();
  x.set_requires_grad();
  x2.set_requires_grad();
  auto s = exp(x);
  backward(sum(mul(s, s)));
  backward(sum(mul(exp(x2), exp(x2))));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            std::vector<double>(x2.grad().begin(), x2.grad().end()));
}

TEST(Backward, GradientsAreFinite) {
  auto x = random_tensor<double>({4, 3}, 24, -30, 30);
  x.set_requires_grad();
  backward(sum(log_softmax(x, 1)));
  for (double g : x.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Determinism, TwoForwardPassesBitIdentical) {
  auto x = random_tensor<float>({2, 3, 8, 8}, 25), k = random_tensor<float>({4, 3, 3, 3}, 26);
  auto run = [&] { return softmax(conv2d(x, k, F::zeros({4}), 1, 1), 1); };
  EXPECT_TRUE(test::bit_equal(run(), run()));
}

TEST(FiniteDiff, LinearFunctionExact) {
  auto x = random_tensor<double>({5}, 27);
  auto r = finite_diff_check([&] { return sum(x); }, {x});
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_rel_error, 1e-9);
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(FiniteDiff, SoftmaxWeightedPassesTightTolerance) {
  auto x = random_tensor<double>({6}, 28);
  GradcheckOptions o;
  o.tol = 1e-5;
  EXPECT_TRUE(finite_diff_check([&] { return sum(mul(softmax(x, 0), x)); }, {x}, o).passed);
}

TEST(FiniteDiff, InjectedWrongGradientFails) {
  auto x = random_tensor<double>({4}, 29);
  auto wrong = [&] {
    return sum(map_unary<double>(
        x, [](double v) { return v * v; }, [](double v) { return 2.0 * v * 1.01; }));
  };
  auto r = finite_diff_check(wrong, {x});
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 1e-4);
}

TEST(FiniteDiff, NondeterministicFunctionDetected) {
  auto x = random_tensor<double>({3}, 30);
  int calls = 0;
  auto f = [&] { return add_scalar(sum(x), static_cast<double>(++calls)); };
  EXPECT_THROW(finite_diff_check(f, {x}), NondeterministicFunction);
}

TEST(FiniteDiff, RandomisedOperatorShapes) {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng.index(8), k = 1 + rng.index(8), n = 1 + rng.index(8);
    auto a = random_tensor<double>({m, k}, 100 + trial), b = random_tensor<double>({k, n}, 200 + trial);
    auto bias = random_tensor<double>({n}, 300 + trial);
    auto w = random_tensor<double>({m, n}, 400 + trial);
    auto r = finite_diff_check(
        [&] { return sum(mul(softmax(add(matmul(a, b), bias), 1), w)); }, {a, b, bias});
    EXPECT_TRUE(r.passed) << m << "x" << k << "x" << n << " " << r.max_rel_error;
  }
}

TEST(Clip, ThreeFourFive) {
  ParameterList<double> ps;
  auto p = D::zeros({2});
  ps.add("p", p);
  p.grad()[0] = 3;
  p.grad()[1] = 4;
  auto r = clip_grad_global_norm(ps, 3.0);
  EXPECT_DOUBLE_EQ(r.norm, 5.0);
  EXPECT_DOUBLE_EQ(r.scale, 0.6);
  EXPECT_NEAR(p.grad()[0], 1.8, 1e-15);
  EXPECT_NEAR(p.grad()[1], 2.4, 1e-15);
}

TEST(Clip, BelowThresholdUntouched) {
  ParameterList<double> ps;
  auto p = D::zeros({2});
  ps.add("p", p);
  p.grad()[0] = 1;
  p.grad()[1] = 2;
  EXPECT_EQ(clip_grad_global_norm(ps, 3.0).scale, 1.0);
  EXPECT_EQ(p.grad()[0], 1.0);
  EXPECT_EQ(p.grad()[1], 2.0);
}

TEST(Clip, PostClipNormIsMin) {
  for (double s : {0.1, 1.0, 10.0, 100.0}) {
    ParameterList<double> ps;
    auto a = D::zeros({3}), b = D::zeros({2, 2});
    ps.add("a", a);
    ps.add("b", b);
    Rng rng(static_cast<std::uint64_t>(s * 10));
    for (auto& g : a.grad()) g = s * rng.uniform(-1, 1);
    for (auto& g : b.grad()) g = s * rng.uniform(-1, 1);
    const double pre = global_grad_norm(ps);
    clip_grad_global_norm(ps, 3.0);
    EXPECT_NEAR(global_grad_norm(ps), std::min(pre, 3.0), 1e-6);
  }
}

TEST(AdamW, ClosedFormFirstStep) {
  auto w = D::from_data({1}, {1.0});
  ParameterList<double> ps;
  ps.add("w", w);
  AdamW<double> opt(ps, {0.0, 0.9, 0.999, 1e-8});
  w.grad()[0] = 0.5;
  opt.step(0.1);
  EXPECT_NEAR(w.at(0), 0.9, 1e-7);
  EXPECT_EQ(opt.state().step, 1u);
}

TEST(AdamW, ZeroGradientNoDecayUnchanged) {
  auto w = D::from_data({2}, {1.0, -2.0});
  ParameterList<double> ps;
  ps.add("w", w);
  AdamW<double> opt(ps, {0.0, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 5; ++i) {
    w.zero_grad();
    w.grad();
    opt.step(0.1);
  }
  EXPECT_EQ(w.to_vector(), (std::vector<double>{1.0, -2.0}));
  EXPECT_EQ(opt.state().step, 5u);
}

TEST(AdamW, PureDecay) {
  auto w = D::from_data({1}, {1.0});
  ParameterList<double> ps;
  ps.add("w", w);
  AdamW<double> opt(ps, {0.1, 0.9, 0.999, 1e-8});
  w.grad()[0] = 0.0;
  opt.step(0.1);
  EXPECT_NEAR(w.at(0), 0.99, 1e-15);
}

TEST(AdamW, MomentShapesMatchParameters) {
  auto a = D::zeros({3}), b = D::zeros({2, 5});
  ParameterList<double> ps;
  ps.add("a", a);
  ps.add("b", b);
  AdamW<double> opt(ps, {});
  ASSERT_EQ(opt.state().first_moment.size(), 2u);
  EXPECT_EQ(opt.state().first_moment[1].size(), 10u);
  EXPECT_EQ(opt.state().second_moment[0].size(), 3u);
}

TEST(PolyLr, BoundariesAndMidpoint) {
  EXPECT_EQ(poly_lr(1e-4, 0, 100), 1e-4);
  EXPECT_EQ(poly_lr(1e-4, 100, 100), 0.0);
  EXPECT_EQ(poly_lr(1e-4, 150, 100), 0.0);
  EXPECT_NEAR(poly_lr(1e-4, 50, 100, 0.9), 5.359e-5, 1e-8);
  double prev = poly_lr(1e-4, 0, 1000);
  for (std::uint64_t i = 1; i <= 1000; ++i) {
    const double lr = poly_lr(1e-4, i, 1000);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

}  // namespace
}  // namespace senf
