#include "senformer/nn.hpp"

#include <cmath>

namespace senf {

template <typename T>
Linear<T> Linear<T>::make(std::size_t in, std::size_t out, bool bias, Rng& rng) {
  std::vector<T> w(in * out);
  for (T& v : w) v = static_cast<T>(rng.truncated_normal(kProjectionInitStd));
  Linear layer;
  layer.weight = Tensor<T>::from_data({in, out}, std::move(w));
  layer.bias = Tensor<T>::zeros({out});
  layer.has_bias = bias;
  return layer;
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  return has_bias ? linear(x, weight, bias) : linear(x, weight);
}

template <typename T>
void Linear<T>::zero() {
  std::fill(weight.data().begin(), weight.data().end(), T(0));
  std::fill(bias.data().begin(), bias.data().end(), T(0));
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  out.add(prefix + ".weight", weight, lr_scale);
  if (has_bias) out.add(prefix + ".bias", bias, lr_scale);
}

template <typename T>
LayerNorm<T> LayerNorm<T>::make(std::size_t dim) {
  return {Tensor<T>::full({dim}, T(1)), Tensor<T>::zeros({dim})};
}

template <typename T>
Tensor<T> LayerNorm<T>::operator()(const Tensor<T>& x) const {
  return layer_norm(x, gain, bias, x.ndim() - 1);
}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  out.add(prefix + ".gain", gain, lr_scale);
  out.add(prefix + ".bias", bias, lr_scale);
}

template <typename T>
Conv2d<T> Conv2d<T>::make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng,
                          bool bias) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
  std::vector<T> w(out * in * kernel * kernel);
  for (T& v : w) v = static_cast<T>(rng.normal(0.0, stddev));
  Conv2d conv;
  conv.weight = Tensor<T>::from_data({out, in, kernel, kernel}, std::move(w));
  conv.bias = Tensor<T>::zeros({out});
  conv.stride = stride;
  conv.padding = (kernel - 1) / 2;
  conv.has_bias = bias;
  return conv;
}

template <typename T>
Tensor<T> Conv2d<T>::operator()(const Tensor<T>& x) const {
  return conv2d(x, weight, bias, stride, padding);
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  out.add(prefix + ".weight", weight, lr_scale);
  if (has_bias) out.add(prefix + ".bias", bias, lr_scale);
}

template <typename T>
BatchNorm2d<T> BatchNorm2d<T>::make(std::size_t channels) {
  return {Tensor<T>::full({channels}, T(1)), Tensor<T>::zeros({channels}), BatchNormState<T>(channels)};
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool training) {
  return batch_norm2d(x, gain, bias, state, training);
}

template <typename T>
void BatchNorm2d<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  out.add(prefix + ".gain", gain, lr_scale);
  out.add(prefix + ".bias", bias, lr_scale);
}

template <typename T>
void BatchNorm2d<T>::buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
  out.push_back({prefix + ".running_mean", &state.running_mean});
  out.push_back({prefix + ".running_var", &state.running_var});
}

template <typename T>
ConvBnRelu<T> ConvBnRelu<T>::make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng) {
  // batch norm removes any per-channel offset, so the conv carries no bias
  return {Conv2d<T>::make(in, out, kernel, stride, rng, false), BatchNorm2d<T>::make(out)};
}

template <typename T>
Tensor<T> ConvBnRelu<T>::forward(const Tensor<T>& x, bool training) {
  return relu(bn.forward(conv(x), training));
}

template <typename T>
void ConvBnRelu<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  conv.collect(prefix + ".conv", out, lr_scale);
  bn.collect(prefix + ".bn", out, lr_scale);
}

template <typename T>
void ConvBnRelu<T>::buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
  bn.buffers(prefix + ".bn", out);
}

template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct BatchNorm2d<float>;
template struct BatchNorm2d<double>;
template struct ConvBnRelu<float>;
template struct ConvBnRelu<double>;

}  // namespace senf
