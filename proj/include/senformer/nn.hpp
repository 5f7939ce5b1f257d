#pragma once

// Parameterised layers shared by the backbone, pyramid, learners and
// attention modules. Each layer owns its tensors; sharing between learners is
// expressed by sharing the owning object (std::shared_ptr), never by copying.

#include <string>
#include <vector>

#include "senformer/ops.hpp"
#include "senformer/optim.hpp"
#include "senformer/rng.hpp"

namespace senf {

inline constexpr double kProjectionInitStd = 0.02;

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]; unused when !has_bias
  bool has_bias = true;

  static Linear make(std::size_t in, std::size_t out, bool bias, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void zero();
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;
};

// Normalises over the last axis.
template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNorm make(std::size_t dim);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out], held at zero and not a parameter when !has_bias
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool has_bias = true;

  // Kaiming-normal weights (std sqrt(2 / fan_in)), zero bias, "same" padding.
  static Conv2d make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng,
                     bool bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gain;
  Tensor<T> bias;
  BatchNormState<T> state;

  static BatchNorm2d make(std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;
  void buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out);
};

// conv -> batch norm -> relu
template <typename T>
struct ConvBnRelu {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  static ConvBnRelu make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;
  void buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out);
};

}  // namespace senf
