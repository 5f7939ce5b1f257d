#include "senformer/kernels.hpp"

#include <omp.h>

#include <algorithm>

namespace senf::kernels {

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) {
  static const int initial = omp_get_max_threads();
  omp_set_num_threads(n > 0 ? n : initial);
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  const bool parallel = m > 1 && m * n * k >= kParallelThreshold;
  const auto rows = static_cast<std::ptrdiff_t>(m);
  if (!trans_b) {
    // i-p-j order keeps the inner loop contiguous over C and B.
#pragma omp parallel for schedule(static) if (parallel)
    for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      T* crow = c + i * n;
      if (!accumulate) std::fill(crow, crow + n, T(0));
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        if (av == T(0)) continue;
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
#pragma omp parallel for schedule(static) if (parallel)
    for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        if (!trans_a) {
          const T* arow = a + i * k;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        } else {
          for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
        }
        crow[j] = accumulate ? crow[j] + acc : acc;
      }
    }
  }
}

template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t h, std::size_t w, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* col) {
  const std::size_t cols = out_h * out_w;
  const auto rows = static_cast<std::ptrdiff_t>(channels * kernel * kernel);
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(rows) * cols >= kParallelThreshold)
  for (std::ptrdiff_t rr = 0; rr < rows; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const std::size_t ch = r / (kernel * kernel);
    const std::size_t ky = (r / kernel) % kernel;
    const std::size_t kx = r % kernel;
    T* dst = col + r * cols;
    const T* src = image + ch * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto ix =
            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                            ix < static_cast<std::ptrdiff_t>(w);
        dst[oy * out_w + ox] = inside ? src[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] : T(0);
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* image) {
  const std::size_t cols = out_h * out_w;
  const auto nch = static_cast<std::ptrdiff_t>(channels);
  // Parallel over channels: patches of different channels never overlap.
#pragma omp parallel for schedule(static) if (channels * kernel * kernel * cols >= kParallelThreshold)
  for (std::ptrdiff_t cc = 0; cc < nch; ++cc) {
    const auto ch = static_cast<std::size_t>(cc);
    T* dst = image + ch * h * w;
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const T* src = col + ((ch * kernel + ky) * kernel + kx) * cols;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += src[oy * out_w + ox];
          }
        }
      }
    }
  }
}

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void conv2d(const T* image, std::size_t in_c, std::size_t h, std::size_t w, const T* weight,
            const T* bias, std::size_t out_c, std::size_t kernel, std::size_t stride,
            std::size_t pad, T* out) {
  const std::size_t out_h = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t out_w = (w + 2 * pad - kernel) / stride + 1;
  for (std::size_t o = 0; o < out_c; ++o) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        T acc = bias ? bias[o] : T(0);
        for (std::size_t c = 0; c < in_c; ++c) {
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                  ix >= static_cast<std::ptrdiff_t>(w)) {
                continue;
              }
              acc += weight[((o * in_c + c) * kernel + ky) * kernel + kx] *
                     image[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
            }
          }
        }
        out[(o * out_h + oy) * out_w + ox] = acc;
      }
    }
  }
}

template void gemm(bool, bool, std::size_t, std::size_t, std::size_t, const float*, const float*,
                   float*, bool);
template void gemm(bool, bool, std::size_t, std::size_t, std::size_t, const double*, const double*,
                   double*, bool);
template void conv2d(const float*, std::size_t, std::size_t, std::size_t, const float*,
                     const float*, std::size_t, std::size_t, std::size_t, std::size_t, float*);
template void conv2d(const double*, std::size_t, std::size_t, std::size_t, const double*,
                     const double*, std::size_t, std::size_t, std::size_t, std::size_t, double*);

}  // namespace reference

#define SENF_INSTANTIATE_KERNELS(T)                                                             \
  template void gemm(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*, T*, \
                     bool);                                                                     \
  template void im2col(const T*, std::size_t, std::size_t, std::size_t, std::size_t,            \
                       std::size_t, std::size_t, std::size_t, std::size_t, T*);                 \
  template void col2im(const T*, std::size_t, std::size_t, std::size_t, std::size_t,            \
                       std::size_t, std::size_t, std::size_t, std::size_t, T*);

SENF_INSTANTIATE_KERNELS(float)
SENF_INSTANTIATE_KERNELS(double)

#undef SENF_INSTANTIATE_KERNELS

}  // namespace senf::kernels
