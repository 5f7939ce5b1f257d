#pragma once

// Hot inner loops used by the differentiable operators.
//
// The top-level functions are OpenMP-parallel. Work is split over output rows
// only, so every output element is produced by exactly one thread with a fixed
// summation order and results are bit-identical for any thread count.
// `reference::` holds plain serial versions kept as test oracles and for the
// benchmark.

#include <cstddef>

namespace senf::kernels {

// C[m,n] (+)= op(A)[m,k] * op(B)[k,n]; op transposes when the flag is set.
// Row-major storage: A is [m,k] (or [k,m] if trans_a), B is [k,n] (or [n,k]).
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

// Unfolds one [channels,h,w] image into [channels*k*k, out_h*out_w] patches.
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t h, std::size_t w, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* col);

// Adjoint of im2col: scatter-adds patch columns back into the image.
template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* image);

// Parallel runs only above this many multiply-adds.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

int max_threads();
// 0 restores the OpenMP default.
void set_threads(int n);

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

// Direct 2-D convolution of one image; weight is [out_c, in_c, k, k].
template <typename T>
void conv2d(const T* image, std::size_t in_c, std::size_t h, std::size_t w, const T* weight,
            const T* bias, std::size_t out_c, std::size_t kernel, std::size_t stride,
            std::size_t pad, T* out);

}  // namespace reference

}  // namespace senf::kernels
