#include "senformer/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "senformer/rng.hpp"

namespace senf {

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a mixed key.
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

double Rng::truncated_normal(double stddev) {
  for (;;) {
    const double v = normal(0.0, 1.0);
    if (std::abs(v) <= 2.0) return v * stddev;
  }
}

template <typename T>
void ParameterList<T>::add(std::string name, Tensor<T> tensor, double lr_scale) {
  for (const auto& p : items_) {
    if (p.tensor.same_node(tensor)) return;
  }
  tensor.set_requires_grad(true);
  items_.push_back({std::move(name), std::move(tensor), lr_scale});
}

template <typename T>
std::size_t ParameterList<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

template <typename T>
void ParameterList<T>::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

template <typename T>
AdamW<T>::AdamW(ParameterList<T> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_.items()) {
    state_.first_moment.emplace_back(p.tensor.numel(), T(0));
    state_.second_moment.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const T b1 = static_cast<T>(config_.beta1);
  const T b2 = static_cast<T>(config_.beta2);
  auto& items = params_.items();
  for (std::size_t k = 0; k < items.size(); ++k) {
    Tensor<T>& param = items[k].tensor;
    auto values = param.data();
    const std::span<const T> grad = std::as_const(param).grad();
    auto& m = state_.first_moment[k];
    auto& v = state_.second_moment[k];
    const double step_lr = lr * items[k].lr_scale;
    const T decay = static_cast<T>(step_lr * config_.weight_decay);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = grad.empty() ? T(0) : grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double m_hat = static_cast<double>(m[i]) / bc1;
      const double v_hat = static_cast<double>(v[i]) / bc2;
      const auto update = static_cast<T>(step_lr * m_hat / (std::sqrt(v_hat) + config_.eps));
      values[i] = values[i] - update - decay * values[i];
    }
  }
}

template <typename T>
double global_grad_norm(const ParameterList<T>& params) {
  double sq = 0.0;
  for (const auto& p : params.items()) {
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <typename T>
ClipResult clip_grad_global_norm(ParameterList<T>& params, double max_norm) {
  ClipResult result;
  result.norm = global_grad_norm(params);
  if (result.norm > max_norm) {
    result.scale = max_norm / result.norm;
    const T s = static_cast<T>(result.scale);
    for (auto& p : params.items()) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.grad()) g *= s;
    }
  }
  return result;
}

double poly_lr(double base_lr, std::uint64_t iter, std::uint64_t max_iter, double power) {
  if (max_iter == 0) return base_lr;
  if (iter >= max_iter) return 0.0;
  const double progress = static_cast<double>(iter) / static_cast<double>(max_iter);
  return base_lr * std::pow(1.0 - progress, power);
}

template class ParameterList<float>;
template class ParameterList<double>;
template class AdamW<float>;
template class AdamW<double>;
template ClipResult clip_grad_global_norm(ParameterList<float>&, double);
template ClipResult clip_grad_global_norm(ParameterList<double>&, double);
template double global_grad_norm(const ParameterList<float>&);
template double global_grad_norm(const ParameterList<double>&);

}  // namespace senf
