#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared TensorImpl node. Operations that
// consume tensors requiring gradients record their inputs and a backward
// closure on the result; backward() walks that graph in reverse topological
// order and accumulates into every reachable leaf that requires a gradient.
//
// A graph belongs to one thread of control. Grad recording can be disabled
// per thread with NoGradGuard, which is how evaluation with frozen weights
// avoids building graphs at all.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace senf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

std::uint64_t next_node_id();

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t id = next_node_id();
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorImpl&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = TensorImpl<T>;

  Tensor();
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from_data(Shape shape, std::vector<T> data);
  static Tensor scalar(T value);

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T> to_vector() const { return impl_->data; }
  T item() const;
  T at(std::size_t flat_index) const { return impl_->data.at(flat_index); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true);
  bool has_grad() const { return !impl_->grad.empty(); }
  // Allocates a zero gradient buffer on first access.
  std::span<T> grad() {
    impl_->grad_buffer();
    return impl_->grad;
  }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();

  bool is_leaf() const { return !impl_->backward_fn; }
  std::uint64_t node_id() const { return impl_->id; }
  bool same_node(const Tensor& other) const { return impl_ == other.impl_; }

  // New leaf holding a copy of the values; no gradient history.
  Tensor detach() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Runs reverse-mode differentiation from a single-element root. Leaf gradients
// accumulate across calls; interior gradients are reset at the start of each
// call so a graph may be differentiated more than once.
template <typename T>
void backward(const Tensor<T>& root);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template void backward(const Tensor<float>&);
extern template void backward(const Tensor<double>&);

}  // namespace senf
