#include <gtest/gtest.h>

#include "senformer/kernels.hpp"
#include "senformer/ops.hpp"
#include "test_support.hpp"

namespace senf {
namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return v;
}

TEST(Kernels, GemmMatchesReferenceAllTransposes) {
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      const std::size_t m = 37, n = 29, k = 41;
      auto a = random_vector(m * k, 1), b = random_vector(k * n, 2);
      std::vector<double> c(m * n, 0.5), r(m * n, 0.5);
      kernels::gemm(ta, tb, m, n, k, a.data(), b.data(), c.data(), true);
      kernels::reference::gemm(ta, tb, m, n, k, a.data(), b.data(), r.data(), true);
      for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], r[i], 1e-12);
    }
  }
}

TEST(Kernels, ConvMatchesDirectReference) {
  for (std::size_t stride : {1u, 2u}) {
    auto x = test::random_tensor<double>({1, 5, 11, 9}, 3);
    auto w = test::random_tensor<double>({7, 5, 3, 3}, 4);
    auto b = test::random_tensor<double>({7}, 5);
    auto y = conv2d(x, w, b, stride, 1);
    std::vector<double> ref(y.numel());
    kernels::reference::conv2d(x.data().data(), 5, 11, 9, w.data().data(), b.data().data(), 7, 3, stride, 1,
                               ref.data());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-12);
  }
}

TEST(Kernels, ResultsIndependentOfThreadCount) {
  const std::size_t m = 128, n = 96, k = 80;
  auto a = random_vector(m * k, 6), b = random_vector(k * n, 7);
  std::vector<double> one(m * n), four(m * n);
  kernels::set_threads(1);
  kernels::gemm(false, false, m, n, k, a.data(), b.data(), one.data(), false);
  auto x = test::random_tensor<float>({2, 16, 32, 32}, 8), w = test::random_tensor<float>({16, 16, 3, 3}, 9);
  auto conv1 = conv2d(x, w, Tensor<float>::zeros({16}), 1, 1);
  kernels::set_threads(4);
  kernels::gemm(false, false, m, n, k, a.data(), b.data(), four.data(), false);
  auto conv4 = conv2d(x, w, Tensor<float>::zeros({16}), 1, 1);
  kernels::set_threads(0);
  EXPECT_EQ(one, four);
  EXPECT_TRUE(test::bit_equal(conv1, conv4));
}

}  // namespace
}  // namespace senf
