#include "senformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "senformer/kernels.hpp"

namespace senf {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T, typename Fn>
Tensor<T> finish(Shape shape, std::vector<T> data, std::vector<ImplPtr<T>> inputs, Fn&& fn) {
  auto out = std::make_shared<TensorImpl<T>>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const ImplPtr<T>& p) { return p->requires_grad; });
    if (any) {
      out->requires_grad = true;
      out->parents = std::move(inputs);
      out->backward_fn = std::forward<Fn>(fn);
    }
  }
  return Tensor<T>(std::move(out));
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Output shape and per-operand strides (0 on broadcast axes) for a binary op.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  plan.out.assign(nd, 1);
  std::vector<std::size_t> ea(nd, 1), eb(nd, 1);
  std::copy(a.begin(), a.end(), ea.begin() + static_cast<std::ptrdiff_t>(nd - a.size()));
  std::copy(b.begin(), b.end(), eb.begin() + static_cast<std::ptrdiff_t>(nd - b.size()));
  for (std::size_t i = 0; i < nd; ++i) {
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    plan.out[i] = std::max(ea[i], eb[i]);
  }
  plan.stride_a.assign(nd, 0);
  plan.stride_b.assign(nd, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = nd; i-- > 0;) {
    plan.stride_a[i] = ea[i] == 1 ? 0 : sa;
    plan.stride_b[i] = eb[i] == 1 ? 0 : sb;
    sa *= ea[i];
    sb *= eb[i];
  }
  return plan;
}

template <typename Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
  const std::size_t n = shape_numel(plan.out);
  if (plan.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t nd = plan.out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      ia += plan.stride_a[d];
      ib += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.stride_a[d] * idx[d];
      ib -= plan.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* name) {
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<T> out(shape_numel(plan.out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case BinaryKind::kAdd: out[i] = pa[ia] + pb[ib]; break;
      case BinaryKind::kSub: out[i] = pa[ia] - pb[ib]; break;
      case BinaryKind::kMul: out[i] = pa[ia] * pb[ib]; break;
      case BinaryKind::kDiv: out[i] = pa[ia] / pb[ib]; break;
    }
  });
  auto ai = a.impl();
  auto bi = b.impl();
  Shape out_shape = plan.out;
  return finish<T>(std::move(out_shape), std::move(out), {ai, bi},
                   [ai, bi, plan = std::move(plan), kind](TensorImpl<T>& self) {
                     const T* g = self.grad.data();
                     T* ga = ai->requires_grad ? ai->grad_buffer() : nullptr;
                     T* gb = bi->requires_grad ? bi->grad_buffer() : nullptr;
                     const T* va = ai->data.data();
                     const T* vb = bi->data.data();
                     for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                       switch (kind) {
                         case BinaryKind::kAdd:
                           if (ga) ga[ia] += g[i];
                           if (gb) gb[ib] += g[i];
                           break;
                         case BinaryKind::kSub:
                           if (ga) ga[ia] += g[i];
                           if (gb) gb[ib] -= g[i];
                           break;
                         case BinaryKind::kMul:
                           if (ga) ga[ia] += g[i] * vb[ib];
                           if (gb) gb[ib] += g[i] * va[ia];
                           break;
                         case BinaryKind::kDiv:
                           if (ga) ga[ia] += g[i] / vb[ib];
                           if (gb) gb[ib] -= g[i] * va[ia] / (vb[ib] * vb[ib]);
                           break;
                       }
                     });
                   });
}

// Elementwise op whose derivative is expressed through input x and output y.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
  auto xi = x.impl();
  return finish<T>(x.shape(), std::move(out), {xi}, [xi, df](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    const T* g = self.grad.data();
    const T* vx = xi->data.data();
    const T* vy = self.data.data();
    for (std::size_t i = 0; i < self.data.size(); ++i) gx[i] += g[i] * df(vx[i], vy[i]);
  });
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kDiv, "div");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x, T floor) {
  return unary(
      x, [floor](T v) { return std::log(std::max(v, floor)); },
      [floor](T v, T) { return v > floor ? T(1) / v : T(0); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  switch (kind) {
    case Activation::kRelu: return relu(x);
    case Activation::kGelu: return gelu(x);
    case Activation::kSigmoid: return sigmoid(x);
  }
  throw std::invalid_argument("unknown activation kind");
}

template <typename T>
Tensor<T> map_unary(const Tensor<T>& x, std::function<T(T)> f, std::function<T(T)> df) {
  return unary(x, f, [df](T v, T) { return df(v); });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xi = x.impl();
  return finish<T>(std::move(shape), xi->data, {xi}, [xi](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  return reshape(x, {x.numel()});
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.ndim() < 2) throw ShapeError("transpose needs at least 2 axes, got " + shape_str(x.shape()));
  const std::size_t nd = x.ndim();
  const std::size_t m = x.dim(nd - 2), n = x.dim(nd - 1);
  const std::size_t batch = x.numel() / (m * n);
  Shape shape = x.shape();
  std::swap(shape[nd - 2], shape[nd - 1]);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = px[b * m * n + i * n + j];
    }
  }
  auto xi = x.impl();
  return finish<T>(std::move(shape), std::move(out), {xi}, [xi, batch, m, n](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
      }
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of an empty list");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch " + shape_str(shape) + " vs " + shape_str(s));
    s[axis] = shape[axis];
    if (s != shape) throw ShapeError("concat: shapes " + shape_str(shape) + " and " + shape_str(p.shape()) + " differ off-axis");
    total += p.dim(axis);
  }
  const AxisSplit first = split_axis(shape, axis);
  shape[axis] = total;
  std::vector<T> out(shape_numel(shape));
  std::vector<ImplPtr<T>> inputs;
  std::vector<std::size_t> lens;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    const T* src = p.data().data();
    for (std::size_t o = 0; o < first.outer; ++o) {
      std::copy(src + o * len * first.inner, src + (o + 1) * len * first.inner,
                out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * first.inner));
    }
    offset += len;
    inputs.push_back(p.impl());
    lens.push_back(len);
  }
  auto captured = inputs;
  return finish<T>(std::move(shape), std::move(out), std::move(inputs),
                   [captured, lens, first, total](TensorImpl<T>& self) {
                     std::size_t off = 0;
                     for (std::size_t k = 0; k < captured.size(); ++k) {
                       const std::size_t len = lens[k];
                       if (captured[k]->requires_grad) {
                         T* g = captured[k]->grad_buffer();
                         for (std::size_t o = 0; o < first.outer; ++o) {
                           const T* src = self.grad.data() + (o * total + off) * first.inner;
                           T* dst = g + o * len * first.inner;
                           for (std::size_t i = 0; i < len * first.inner; ++i) dst[i] += src[i];
                         }
                       }
                       off += len;
                     }
                   });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (length == 0 || start + length > s.len) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<T> out(shape_numel(shape));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* src = px + (o * s.len + start) * s.inner;
    std::copy(src, src + length * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  auto xi = x.impl();
  return finish<T>(std::move(shape), std::move(out), {xi}, [xi, s, start, length](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = gx + (o * s.len + start) * s.inner;
      const T* src = self.grad.data() + o * length * s.inner;
      for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::int64_t> index) {
  if (shape_numel(out_shape) != index.size()) {
    throw ShapeError("gather: index count does not match " + shape_str(out_shape));
  }
  std::vector<T> out(index.size());
  const T* px = x.data().data();
  const auto n = static_cast<std::int64_t>(x.numel());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ShapeError("gather: index out of range for " + shape_str(x.shape()));
    out[i] = index[i] < 0 ? T(0) : px[index[i]];
  }
  auto xi = x.impl();
  return finish<T>(std::move(out_shape), std::move(out), {xi},
                   [xi, index = std::move(index)](TensorImpl<T>& self) {
                     T* gx = xi->grad_buffer();
                     for (std::size_t i = 0; i < index.size(); ++i) {
                       if (index[i] >= 0) gx[index[i]] += self.grad[i];
                     }
                   });
}

template <typename T>
Tensor<T> repeat_leading(const Tensor<T>& x, std::size_t copies) {
  if (copies == 0) throw ShapeError("repeat_leading with zero copies");
  Shape shape = x.shape();
  shape.insert(shape.begin(), copies);
  const std::size_t n = x.numel();
  std::vector<T> out(n * copies);
  for (std::size_t c = 0; c < copies; ++c) {
    std::copy(x.data().begin(), x.data().end(), out.begin() + static_cast<std::ptrdiff_t>(c * n));
  }
  auto xi = x.impl();
  return finish<T>(std::move(shape), std::move(out), {xi}, [xi, copies, n](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    for (std::size_t c = 0; c < copies; ++c) {
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[c * n + i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto xi = x.impl();
  return finish<T>({1}, {acc}, {xi}, [xi](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  };
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_b = false;
  Shape shape;
  if (a.ndim() == 2 && b.ndim() == 2) {
    m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) fail();
    shape = {m, n};
  } else if (a.ndim() == 3 && b.ndim() == 3) {
    batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) fail();
    shape = {batch, m, n};
  } else if (a.ndim() == 3 && b.ndim() == 2) {
    batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    if (b.dim(0) != k) fail();
    shared_b = true;
    shape = {batch, m, n};
  } else {
    fail();
  }
  std::vector<T> out(batch * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (shared_b || batch == 1) {
    kernels::gemm(false, false, batch * m, n, k, pa, pb, out.data(), false);
  } else {
    for (std::size_t bi = 0; bi < batch; ++bi) {
      kernels::gemm(false, false, m, n, k, pa + bi * m * k, pb + bi * k * n, out.data() + bi * m * n, false);
    }
  }
  auto ai = a.impl();
  auto bi_ = b.impl();
  return finish<T>(std::move(shape), std::move(out), {ai, bi_},
                   [ai, bi_, batch, m, n, k, shared_b](TensorImpl<T>& self) {
                     const T* g = self.grad.data();
                     const T* va = ai->data.data();
                     const T* vb = bi_->data.data();
                     if (shared_b || batch == 1) {
                       const std::size_t rows = batch * m;
                       if (ai->requires_grad) kernels::gemm(false, true, rows, k, n, g, vb, ai->grad_buffer(), true);
                       if (bi_->requires_grad) kernels::gemm(true, false, k, n, rows, va, g, bi_->grad_buffer(), true);
                       return;
                     }
                     for (std::size_t b = 0; b < batch; ++b) {
                       const T* gb = g + b * m * n;
                       if (ai->requires_grad) {
                         kernels::gemm(false, true, m, k, n, gb, vb + b * k * n, ai->grad_buffer() + b * m * k, true);
                       }
                       if (bi_->requires_grad) {
                         kernels::gemm(true, false, k, n, m, va + b * m * k, gb, bi_->grad_buffer() + b * k * n, true);
                       }
                     }
                   });
}

namespace {

template <typename T>
Tensor<T> linear_impl(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  if (weight.ndim() != 2 || x.ndim() < 1 || x.shape().back() != weight.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(0), outf = weight.dim(1);
  if (bias && (bias->numel() != outf)) {
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = outf;
  std::vector<T> out(rows * outf);
  if (bias) {
    const T* pb = bias->data().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(pb, pb + outf, out.begin() + static_cast<std::ptrdiff_t>(r * outf));
  }
  kernels::gemm(false, false, rows, outf, in, x.data().data(), weight.data().data(), out.data(), bias != nullptr);
  auto xi = x.impl();
  auto wi = weight.impl();
  std::vector<ImplPtr<T>> inputs{xi, wi};
  ImplPtr<T> bi = bias ? bias->impl() : nullptr;
  if (bi) inputs.push_back(bi);
  return finish<T>(std::move(shape), std::move(out), std::move(inputs),
                   [xi, wi, bi, rows, in, outf](TensorImpl<T>& self) {
                     const T* g = self.grad.data();
                     if (xi->requires_grad) kernels::gemm(false, true, rows, in, outf, g, wi->data.data(), xi->grad_buffer(), true);
                     if (wi->requires_grad) kernels::gemm(true, false, in, outf, rows, xi->data.data(), g, wi->grad_buffer(), true);
                     if (bi && bi->requires_grad) {
                       T* gb = bi->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < outf; ++j) gb[j] += g[r * outf + j];
                       }
                     }
                   });
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return linear_impl(x, weight, &bias);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  return linear_impl<T>(x, weight, nullptr);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = px[base];
      for (std::size_t c = 1; c < s.len; ++c) mx = std::max(mx, px[base + c * s.inner]);
      T z = T(0);
      for (std::size_t c = 0; c < s.len; ++c) {
        const T e = std::exp(px[base + c * s.inner] - mx);
        out[base + c * s.inner] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.len; ++c) out[base + c * s.inner] /= z;
    }
  }
  auto xi = x.impl();
  return finish<T>(x.shape(), std::move(out), {xi}, [xi, s](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    const T* y = self.data.data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T dot = T(0);
        for (std::size_t c = 0; c < s.len; ++c) dot += g[base + c * s.inner] * y[base + c * s.inner];
        for (std::size_t c = 0; c < s.len; ++c) {
          const std::size_t at = base + c * s.inner;
          gx[at] += y[at] * (g[at] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = px[base];
      for (std::size_t c = 1; c < s.len; ++c) mx = std::max(mx, px[base + c * s.inner]);
      T z = T(0);
      for (std::size_t c = 0; c < s.len; ++c) z += std::exp(px[base + c * s.inner] - mx);
      const T lz = std::log(z) + mx;
      for (std::size_t c = 0; c < s.len; ++c) out[base + c * s.inner] = px[base + c * s.inner] - lz;
    }
  }
  auto xi = x.impl();
  return finish<T>(x.shape(), std::move(out), {xi}, [xi, s](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    const T* y = self.data.data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T gsum = T(0);
        for (std::size_t c = 0; c < s.len; ++c) gsum += g[base + c * s.inner];
        for (std::size_t c = 0; c < s.len; ++c) {
          const std::size_t at = base + c * s.inner;
          gx[at] += g[at] - std::exp(y[at]) * gsum;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.len == 0) throw ShapeError("layer_norm over a zero-length axis");
  if (gain.numel() != s.len || bias.numel() != s.len) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match axis length " + std::to_string(s.len));
  }
  const std::size_t groups = s.outer * s.inner;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(groups);
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  const T n = static_cast<T>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mu = T(0);
      for (std::size_t c = 0; c < s.len; ++c) mu += px[base + c * s.inner];
      mu /= n;
      T var = T(0);
      for (std::size_t c = 0; c < s.len; ++c) {
        const T d = px[base + c * s.inner] - mu;
        var += d * d;
      }
      var /= n;
      const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
      inv_std[o * s.inner + i] = inv;
      for (std::size_t c = 0; c < s.len; ++c) {
        const std::size_t at = base + c * s.inner;
        xhat[at] = (px[at] - mu) * inv;
        out[at] = pg[c] * xhat[at] + pb[c];
      }
    }
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  return finish<T>(x.shape(), std::move(out), {xi, gi, bi},
                   [xi, gi, bi, s, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl<T>& self) {
                     const T* g = self.grad.data();
                     const T* pg = gi->data.data();
                     T* gx = xi->requires_grad ? xi->grad_buffer() : nullptr;
                     T* gg = gi->requires_grad ? gi->grad_buffer() : nullptr;
                     T* gb = bi->requires_grad ? bi->grad_buffer() : nullptr;
                     const T n = static_cast<T>(s.len);
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t i = 0; i < s.inner; ++i) {
                         const std::size_t base = o * s.len * s.inner + i;
                         T sum_d = T(0), sum_dx = T(0);
                         for (std::size_t c = 0; c < s.len; ++c) {
                           const std::size_t at = base + c * s.inner;
                           const T d = g[at] * pg[c];
                           sum_d += d;
                           sum_dx += d * xhat[at];
                           if (gg) gg[c] += g[at] * xhat[at];
                           if (gb) gb[c] += g[at];
                         }
                         if (!gx) continue;
                         const T inv = inv_std[o * s.inner + i];
                         for (std::size_t c = 0; c < s.len; ++c) {
                           const std::size_t at = base + c * s.inner;
                           const T d = g[at] * pg[c];
                           gx[at] += inv / n * (n * d - sum_d - xhat[at] * sum_dx);
                         }
                       }
                     }
                   });
}

namespace {

struct SpatialDims {
  std::size_t batch, channels, h, w;
  bool batched;
};

SpatialDims spatial_dims(const Shape& shape, const char* op) {
  if (shape.size() == 4) return {shape[0], shape[1], shape[2], shape[3], true};
  if (shape.size() == 3) return {1, shape[0], shape[1], shape[2], false};
  throw ShapeError(std::string(op) + " expects [B,C,H,W] or [C,H,W], got " + shape_str(shape));
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  const SpatialDims in = spatial_dims(x.shape(), "conv2d");
  if (weight.ndim() != 4 || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: weight must be [out,in,k,k], got " + shape_str(weight.shape()));
  }
  const std::size_t out_c = weight.dim(0), kernel = weight.dim(2);
  if (weight.dim(1) != in.channels) {
    throw ShapeError("conv2d: input has " + std::to_string(in.channels) + " channels but weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  if (kernel % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  if (bias.numel() != out_c) throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(out_c) + " outputs");
  if (stride == 0) throw ShapeError("conv2d: zero stride");
  if (in.h + 2 * padding < kernel || in.w + 2 * padding < kernel) throw ShapeError("conv2d: input smaller than kernel");
  const std::size_t out_h = (in.h + 2 * padding - kernel) / stride + 1;
  const std::size_t out_w = (in.w + 2 * padding - kernel) / stride + 1;
  const std::size_t patch = in.channels * kernel * kernel;
  const std::size_t pixels = out_h * out_w;
  const bool pointwise = kernel == 1 && stride == 1 && padding == 0;

  std::vector<T> out(in.batch * out_c * pixels);
  std::vector<T> col(pointwise ? 0 : patch * pixels);
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  const T* pb = bias.data().data();
  for (std::size_t b = 0; b < in.batch; ++b) {
    const T* image = px + b * in.channels * in.h * in.w;
    const T* cols = image;
    if (!pointwise) {
      kernels::im2col(image, in.channels, in.h, in.w, kernel, stride, padding, out_h, out_w, col.data());
      cols = col.data();
    }
    T* dst = out.data() + b * out_c * pixels;
    for (std::size_t o = 0; o < out_c; ++o) std::fill(dst + o * pixels, dst + (o + 1) * pixels, pb[o]);
    kernels::gemm(false, false, out_c, pixels, patch, pw, cols, dst, true);
  }
  Shape shape = in.batched ? Shape{in.batch, out_c, out_h, out_w} : Shape{out_c, out_h, out_w};
  auto xi = x.impl();
  auto wi = weight.impl();
  auto bi = bias.impl();
  return finish<T>(std::move(shape), std::move(out), {xi, wi, bi},
                   [xi, wi, bi, in, out_c, kernel, stride, padding, out_h, out_w, patch, pixels,
                    pointwise](TensorImpl<T>& self) {
                     const T* g = self.grad.data();
                     std::vector<T> col(pointwise ? 0 : patch * pixels);
                     std::vector<T> dcol(pointwise ? 0 : patch * pixels);
                     for (std::size_t b = 0; b < in.batch; ++b) {
                       const T* gout = g + b * out_c * pixels;
                       const T* image = xi->data.data() + b * in.channels * in.h * in.w;
                       if (wi->requires_grad) {
                         const T* cols = image;
                         if (!pointwise) {
                           kernels::im2col(image, in.channels, in.h, in.w, kernel, stride, padding, out_h, out_w, col.data());
                           cols = col.data();
                         }
                         kernels::gemm(false, true, out_c, patch, pixels, gout, cols, wi->grad_buffer(), true);
                       }
                       if (bi->requires_grad) {
                         T* gb = bi->grad_buffer();
                         for (std::size_t o = 0; o < out_c; ++o) {
                           T acc = T(0);
                           for (std::size_t p = 0; p < pixels; ++p) acc += gout[o * pixels + p];
                           gb[o] += acc;
                         }
                       }
                       if (xi->requires_grad) {
                         T* gimage = xi->grad_buffer() + b * in.channels * in.h * in.w;
                         if (pointwise) {
                           kernels::gemm(true, false, patch, pixels, out_c, wi->data.data(), gout, gimage, true);
                         } else {
                           kernels::gemm(true, false, patch, pixels, out_c, wi->data.data(), gout, dcol.data(), false);
                           kernels::col2im(dcol.data(), in.channels, in.h, in.w, kernel, stride, padding, out_h, out_w, gimage);
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                       BatchNormState<T>& state, bool training) {
  const SpatialDims in = spatial_dims(x.shape(), "batch_norm2d");
  const std::size_t c_count = in.channels;
  if (gain.numel() != c_count || bias.numel() != c_count || state.running_mean.size() != c_count) {
    throw ShapeError("batch_norm2d: parameters do not match " + std::to_string(c_count) + " channels");
  }
  const std::size_t plane = in.h * in.w;
  const std::size_t count = in.batch * plane;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(training ? x.numel() : 0);
  std::vector<T> inv_std(c_count);
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  const auto nch = static_cast<std::ptrdiff_t>(c_count);
#pragma omp parallel for schedule(static) if (x.numel() >= kernels::kParallelThreshold)
  for (std::ptrdiff_t cc = 0; cc < nch; ++cc) {
    const auto c = static_cast<std::size_t>(cc);
    T mu, var;
    if (training) {
      T acc = T(0);
      for (std::size_t b = 0; b < in.batch; ++b) {
        const T* p = px + (b * c_count + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      mu = acc / static_cast<T>(count);
      T sq = T(0);
      for (std::size_t b = 0; b < in.batch; ++b) {
        const T* p = px + (b * c_count + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<T>(count);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      const T m = static_cast<T>(state.momentum);
      state.running_mean[c] = (T(1) - m) * state.running_mean[c] + m * mu;
      state.running_var[c] = (T(1) - m) * state.running_var[c] + m * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const T inv = T(1) / std::sqrt(var + static_cast<T>(state.eps));
    inv_std[c] = inv;
    for (std::size_t b = 0; b < in.batch; ++b) {
      const std::size_t base = (b * c_count + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (px[base + i] - mu) * inv;
        if (training) xhat[base + i] = xh;
        out[base + i] = pg[c] * xh + pb[c];
      }
    }
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  std::vector<T> means;
  if (!training) means = state.running_mean;
  return finish<T>(x.shape(), std::move(out), {xi, gi, bi},
                   [xi, gi, bi, in, plane, count, training, xhat = std::move(xhat),
                    inv_std = std::move(inv_std), means = std::move(means)](TensorImpl<T>& self) {
                     const T* g = self.grad.data();
                     const T* pg = gi->data.data();
                     const T* vx = xi->data.data();
                     T* gx = xi->requires_grad ? xi->grad_buffer() : nullptr;
                     T* gg = gi->requires_grad ? gi->grad_buffer() : nullptr;
                     T* gb = bi->requires_grad ? bi->grad_buffer() : nullptr;
                     const std::size_t c_count = in.channels;
                     const auto nch = static_cast<std::ptrdiff_t>(c_count);
#pragma omp parallel for schedule(static) if (self.data.size() >= kernels::kParallelThreshold)
                     for (std::ptrdiff_t cc = 0; cc < nch; ++cc) {
                       const auto c = static_cast<std::size_t>(cc);
                       T sum_g = T(0), sum_gx = T(0);
                       for (std::size_t b = 0; b < in.batch; ++b) {
                         const std::size_t base = (b * c_count + c) * plane;
                         for (std::size_t i = 0; i < plane; ++i) {
                           const T xh = training ? xhat[base + i] : (vx[base + i] - means[c]) * inv_std[c];
                           sum_g += g[base + i];
                           sum_gx += g[base + i] * xh;
                         }
                       }
                       if (gg) gg[c] += sum_gx;
                       if (gb) gb[c] += sum_g;
                       if (!gx) continue;
                       const T scale_c = pg[c] * inv_std[c];
                       const T n = static_cast<T>(count);
                       for (std::size_t b = 0; b < in.batch; ++b) {
                         const std::size_t base = (b * c_count + c) * plane;
                         for (std::size_t i = 0; i < plane; ++i) {
                           if (training) {
                             gx[base + i] += scale_c / n * (n * g[base + i] - sum_g - xhat[base + i] * sum_gx);
                           } else {
                             gx[base + i] += scale_c * g[base + i];
                           }
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  if (x.ndim() < 2) throw ShapeError("upsample_nearest needs spatial axes, got " + shape_str(x.shape()));
  if (factor == 0) throw ShapeError("upsample_nearest: non-positive factor");
  const std::size_t nd = x.ndim();
  const std::size_t h = x.dim(nd - 2), w = x.dim(nd - 1);
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t oh = h * factor, ow = w * factor;
  Shape shape = x.shape();
  shape[nd - 2] = oh;
  shape[nd - 1] = ow;
  std::vector<T> out(planes * oh * ow);
  const T* px = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        out[(p * oh + y) * ow + xx] = px[(p * h + y / factor) * w + xx / factor];
      }
    }
  }
  auto xi = x.impl();
  return finish<T>(std::move(shape), std::move(out), {xi}, [xi, planes, h, w, oh, ow, factor](TensorImpl<T>& self) {
    T* gx = xi->grad_buffer();
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          gx[(p * h + y / factor) * w + xx / factor] += self.grad[(p * oh + y) * ow + xx];
        }
      }
    }
  });
}

namespace {

struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.ndim() < 2) throw ShapeError("upsample_bilinear needs spatial axes, got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("upsample_bilinear: non-positive target size");
  const std::size_t nd = x.ndim();
  const std::size_t h = x.dim(nd - 2), w = x.dim(nd - 1);
  const std::size_t planes = x.numel() / (h * w);
  Shape shape = x.shape();
  shape[nd - 2] = out_h;
  shape[nd - 1] = out_w;
  if (h == out_h && w == out_w) return reshape(x, shape);
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  std::vector<T> out(planes * out_h * out_w);
  const T* px = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = px + p * h * w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty[y].frac);
      const T* r0 = src + ty[y].i0 * w;
      const T* r1 = src + ty[y].i1 * w;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const T fx = static_cast<T>(tx[xx].frac);
        const T top = r0[tx[xx].i0] * (T(1) - fx) + r0[tx[xx].i1] * fx;
        const T bot = r1[tx[xx].i0] * (T(1) - fx) + r1[tx[xx].i1] * fx;
        out[(p * out_h + y) * out_w + xx] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  auto xi = x.impl();
  return finish<T>(std::move(shape), std::move(out), {xi},
                   [xi, planes, h, w, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](TensorImpl<T>& self) {
                     T* gx = xi->grad_buffer();
                     for (std::size_t p = 0; p < planes; ++p) {
                       T* dst = gx + p * h * w;
                       for (std::size_t y = 0; y < out_h; ++y) {
                         const T fy = static_cast<T>(ty[y].frac);
                         for (std::size_t xx = 0; xx < out_w; ++xx) {
                           const T fx = static_cast<T>(tx[xx].frac);
                           const T g = self.grad[(p * out_h + y) * out_w + xx];
                           dst[ty[y].i0 * w + tx[xx].i0] += g * (T(1) - fy) * (T(1) - fx);
                           dst[ty[y].i0 * w + tx[xx].i1] += g * (T(1) - fy) * fx;
                           dst[ty[y].i1 * w + tx[xx].i0] += g * fy * (T(1) - fx);
                           dst[ty[y].i1 * w + tx[xx].i1] += g * fy * fx;
                         }
                       }
                     }
                   });
}

namespace {

AxisSplit check_targets(const Shape& shape, std::size_t class_axis, std::span<const std::int32_t> targets,
                        std::int32_t ignore_index, std::size_t* valid) {
  const AxisSplit s = split_axis(shape, class_axis);
  if (targets.size() != s.outer * s.inner) {
    throw ShapeError("loss: " + std::to_string(targets.size()) + " targets for input " + shape_str(shape));
  }
  *valid = 0;
  for (std::int32_t t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= s.len) {
      throw std::out_of_range("loss: target " + std::to_string(t) + " outside [0, " + std::to_string(s.len) + ")");
    }
    ++*valid;
  }
  return s;
}

}  // namespace

template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, std::span<const std::int32_t> targets,
                   std::size_t class_axis, std::int32_t ignore_index) {
  std::size_t valid = 0;
  const AxisSplit s = check_targets(log_probs.shape(), class_axis, targets, ignore_index, &valid);
  const T* p = log_probs.data().data();
  T acc = T(0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::int32_t t = targets[o * s.inner + i];
      if (t == ignore_index) continue;
      acc -= p[(o * s.len + static_cast<std::size_t>(t)) * s.inner + i];
    }
  }
  const T inv = valid ? T(1) / static_cast<T>(valid) : T(0);
  auto li = log_probs.impl();
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return finish<T>({1}, {acc * inv}, {li}, [li, s, inv, ignore_index, tgt = std::move(tgt)](TensorImpl<T>& self) {
    T* g = li->grad_buffer();
    const T gv = self.grad[0] * inv;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::int32_t t = tgt[o * s.inner + i];
        if (t == ignore_index) continue;
        g[(o * s.len + static_cast<std::size_t>(t)) * s.inner + i] -= gv;
      }
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::size_t class_axis, std::int32_t ignore_index) {
  std::size_t valid = 0;
  const AxisSplit s = check_targets(logits.shape(), class_axis, targets, ignore_index, &valid);
  const T* px = logits.data().data();
  std::vector<T> probs(logits.numel());
  T acc = T(0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = px[base];
      for (std::size_t c = 1; c < s.len; ++c) mx = std::max(mx, px[base + c * s.inner]);
      T z = T(0);
      for (std::size_t c = 0; c < s.len; ++c) {
        const T e = std::exp(px[base + c * s.inner] - mx);
        probs[base + c * s.inner] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.len; ++c) probs[base + c * s.inner] /= z;
      const std::int32_t t = targets[o * s.inner + i];
      if (t != ignore_index) acc -= px[base + static_cast<std::size_t>(t) * s.inner] - mx - std::log(z);
    }
  }
  const T inv = valid ? T(1) / static_cast<T>(valid) : T(0);
  auto li = logits.impl();
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return finish<T>({1}, {acc * inv}, {li},
                   [li, s, inv, ignore_index, tgt = std::move(tgt), probs = std::move(probs)](TensorImpl<T>& self) {
                     T* g = li->grad_buffer();
                     const T gv = self.grad[0] * inv;
                     if (gv == T(0)) return;
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t i = 0; i < s.inner; ++i) {
                         const std::int32_t t = tgt[o * s.inner + i];
                         if (t == ignore_index) continue;
                         const std::size_t base = o * s.len * s.inner + i;
                         for (std::size_t c = 0; c < s.len; ++c) {
                           const T onehot = static_cast<std::int32_t>(c) == t ? T(1) : T(0);
                           g[base + c * s.inner] += gv * (probs[base + c * s.inner] - onehot);
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads) {
  const auto fail = [&] {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  };
  if (q.ndim() != k.ndim() || q.ndim() != v.ndim() || (q.ndim() != 2 && q.ndim() != 3)) fail();
  const bool batched = q.ndim() == 3;
  const std::size_t batch = batched ? q.dim(0) : 1;
  const std::size_t nq = q.dim(q.ndim() - 2), d = q.shape().back();
  const std::size_t nk = k.dim(k.ndim() - 2);
  if (k.shape().back() != d || v.shape().back() != d || v.dim(v.ndim() - 2) != nk) fail();
  if (batched && (k.dim(0) != batch || v.dim(0) != batch)) fail();
  if (nk == 0) throw ShapeError("attention over zero tokens");
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  }
  const std::size_t dh = d / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> out(batch * nq * d, T(0));
  std::vector<T> probs(batch * heads * nq * nk);
  const T* pq = q.data().data();
  const T* pk = k.data().data();
  const T* pv = v.data().data();
  const auto nb = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static) if (batch * heads * nq * nk * dh >= kernels::kParallelThreshold)
  for (std::ptrdiff_t bb = 0; bb < nb; ++bb) {
    const auto b = static_cast<std::size_t>(bb);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < nq; ++i) {
        T* prow = probs.data() + ((b * heads + h) * nq + i) * nk;
        const T* qi = pq + (b * nq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          const T* kj = pk + (b * nk + j) * d + h * dh;
          T acc = T(0);
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          prow[j] = acc * scl;
          mx = std::max(mx, prow[j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < nk; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          z += prow[j];
        }
        T* oi = out.data() + (b * nq + i) * d + h * dh;
        for (std::size_t j = 0; j < nk; ++j) {
          prow[j] /= z;
          const T* vj = pv + (b * nk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += prow[j] * vj[c];
        }
      }
    }
  }
  auto qi = q.impl();
  auto ki = k.impl();
  auto vi = v.impl();
  return finish<T>(q.shape(), std::move(out), {qi, ki, vi},
                   [qi, ki, vi, batch, heads, nq, nk, d, dh, scl, probs = std::move(probs)](TensorImpl<T>& self) {
                     const T* g = self.grad.data();
                     const T* pq = qi->data.data();
                     const T* pk = ki->data.data();
                     const T* pv = vi->data.data();
                     T* gq = qi->requires_grad ? qi->grad_buffer() : nullptr;
                     T* gk = ki->requires_grad ? ki->grad_buffer() : nullptr;
                     T* gv = vi->requires_grad ? vi->grad_buffer() : nullptr;
                     const auto nb = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static) if (batch * heads * nq * nk * dh >= kernels::kParallelThreshold)
                     for (std::ptrdiff_t bb = 0; bb < nb; ++bb) {
                       const auto b = static_cast<std::size_t>(bb);
                       std::vector<T> ds(nk);
                       for (std::size_t h = 0; h < heads; ++h) {
                         for (std::size_t i = 0; i < nq; ++i) {
                           const T* prow = probs.data() + ((b * heads + h) * nq + i) * nk;
                           const T* go = g + (b * nq + i) * d + h * dh;
                           T dot = T(0);
                           for (std::size_t j = 0; j < nk; ++j) {
                             const T* vj = pv + (b * nk + j) * d + h * dh;
                             T dp = T(0);
                             for (std::size_t c = 0; c < dh; ++c) dp += go[c] * vj[c];
                             ds[j] = dp;
                             dot += dp * prow[j];
                             if (gv) {
                               T* gvj = gv + (b * nk + j) * d + h * dh;
                               for (std::size_t c = 0; c < dh; ++c) gvj[c] += prow[j] * go[c];
                             }
                           }
                           const T* qrow = pq + (b * nq + i) * d + h * dh;
                           for (std::size_t j = 0; j < nk; ++j) {
                             const T dsj = prow[j] * (ds[j] - dot) * scl;
                             if (dsj == T(0)) continue;
                             const T* kj = pk + (b * nk + j) * d + h * dh;
                             if (gq) {
                               T* gqi = gq + (b * nq + i) * d + h * dh;
                               for (std::size_t c = 0; c < dh; ++c) gqi[c] += dsj * kj[c];
                             }
                             if (gk) {
                               T* gkj = gk + (b * nk + j) * d + h * dh;
                               for (std::size_t c = 0; c < dh; ++c) gkj[c] += dsj * qrow[c];
                             }
                           }
                         }
                       }
                     }
                   });
}

template <typename T>
std::vector<std::int32_t> argmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<std::int32_t> out(s.outer * s.inner);
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.len; ++c) {
        if (px[base + c * s.inner] > px[base + best * s.inner]) best = c;
      }
      out[o * s.inner + i] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

#define SENF_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                        \
  template Tensor<T> exp(const Tensor<T>&);                                                             \
  template Tensor<T> log(const Tensor<T>&, T);                                                          \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                            \
  template Tensor<T> gelu(const Tensor<T>&);                                                            \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                         \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                          \
  template Tensor<T> map_unary(const Tensor<T>&, std::function<T(T)>, std::function<T(T)>);             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
  template Tensor<T> flatten(const Tensor<T>&);                                                         \
  template Tensor<T> transpose(const Tensor<T>&);                                                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                    \
  template Tensor<T> gather(const Tensor<T>&, Shape, std::vector<std::int64_t>);                        \
  template Tensor<T> repeat_leading(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                             \
  template Tensor<T> mean(const Tensor<T>&);                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,          \
                            std::size_t);                                                               \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                  BatchNormState<T>&, bool);                                            \
  template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> nll_loss(const Tensor<T>&, std::span<const std::int32_t>, std::size_t,             \
                              std::int32_t);                                                            \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>, std::size_t,        \
                                   std::int32_t);                                                       \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                          std::size_t);                                                 \
  template std::vector<std::int32_t> argmax(const Tensor<T>&, std::size_t);

SENF_INSTANTIATE_OPS(float)
SENF_INSTANTIATE_OPS(double)

#undef SENF_INSTANTIATE_OPS

}  // namespace senf
