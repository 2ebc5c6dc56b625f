#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xfeat/error.hpp"

namespace xfeat {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Graph recording switch. Thread-local, so inference on one thread never
// interferes with a training step on another.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads the output gradient and accumulates into inputs that need it.
  std::function<void(std::span<const T> out_grad)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;

  T* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

// Dense row-major tensor with optional reverse-mode gradient tracking.
// Copies are shallow: two Tensor objects may refer to the same storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return {impl_->grad_buffer(), impl_->data.size()}; }
  void zero_grad();

  // Same values, no history. Gradients never flow through the result.
  Tensor detach() const;
  Tensor clone() const;
  Tensor reshape(Shape shape) const;

  // Reverse-mode accumulation from a scalar.
  void backward() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(impl_->data[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<Impl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<Impl> impl_;
};

// One convolution in the cost ledger: f_ops == height*width*c_in*c_out*kernel^2
// where height/width are the output spatial dims actually computed.
struct FlopEntry {
  std::string layer;
  std::uint64_t height = 0;
  std::uint64_t width = 0;
  std::uint64_t c_in = 0;
  std::uint64_t c_out = 0;
  std::uint64_t kernel = 0;
  std::uint64_t f_ops = 0;
};

class FlopCounter {
 public:
  void record(std::string_view layer, std::uint64_t height, std::uint64_t width,
              std::uint64_t c_in, std::uint64_t c_out, std::uint64_t kernel);
  const std::vector<FlopEntry>& entries() const { return entries_; }
  std::uint64_t total() const { return total_; }
  void clear();

 private:
  std::vector<FlopEntry> entries_;
  std::uint64_t total_ = 0;
};

// Builds an op result. Attaches a graph node when recording is enabled and
// any input requires a gradient. Throws NumericError on non-finite data.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<const Tensor<T>*> inputs,
                      std::function<void(std::span<const T>)> backward,
                      std::string_view op_name);

// Accumulation target for an op's backward closure; null when the input
// does not need a gradient.
template <typename T>
T* grad_target(const std::shared_ptr<detail::TensorImpl<T>>& impl) {
  return impl && impl->requires_grad ? impl->grad_buffer() : nullptr;
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace xfeat
