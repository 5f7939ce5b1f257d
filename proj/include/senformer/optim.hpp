#pragma once

// Parameter bookkeeping, AdamW, global-norm gradient clipping and the poly
// learning-rate schedule.

#include <cstdint>
#include <string>
#include <vector>

#include "senformer/ops.hpp"
#include "senformer/tensor.hpp"

namespace senf {

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  double lr_scale = 1.0;
};

// Ordered, de-duplicated list of learnable tensors. A tensor registered twice
// (shared weights) keeps its first name.
template <typename T>
class ParameterList {
 public:
  void add(std::string name, Tensor<T> tensor, double lr_scale = 1.0);
  const std::vector<NamedParameter<T>>& items() const { return items_; }
  std::vector<NamedParameter<T>>& items() { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<NamedParameter<T>> items_;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

struct AdamWConfig {
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;
};

// Decoupled weight decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p),
// with lr multiplied by each parameter's lr_scale.
template <typename T>
class AdamW {
 public:
  AdamW(ParameterList<T> params, AdamWConfig config);

  void step(double lr);
  const ParameterList<T>& parameters() const { return params_; }
  const AdamWConfig& config() const { return config_; }
  OptimizerState<T>& state() { return state_; }
  const OptimizerState<T>& state() const { return state_; }

 private:
  ParameterList<T> params_;
  AdamWConfig config_;
  OptimizerState<T> state_;
};

struct ClipResult {
  double norm = 0.0;   // global L2 norm before clipping
  double scale = 1.0;  // factor applied to every gradient
};

template <typename T>
ClipResult clip_grad_global_norm(ParameterList<T>& params, double max_norm);

template <typename T>
double global_grad_norm(const ParameterList<T>& params);

// base * (1 - iter / max_iter)^power; iterations past the end give 0.
double poly_lr(double base_lr, std::uint64_t iter, std::uint64_t max_iter, double power = 0.9);

extern template class ParameterList<float>;
extern template class ParameterList<double>;
extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace senf
