#include "xfeat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace xfeat {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_to_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis out of range for shape " + shape_to_string(shape()));
  return impl_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), impl_->data);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), impl_->data);
  out.impl_->requires_grad = impl_->requires_grad && !impl_->grad_fn;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape()) + " to " +
                     shape_to_string(new_shape));
  }
  auto src = impl_;
  return make_result<T>(
      std::move(new_shape), impl_->data, {this},
      [src](std::span<const T> g) {
        if (T* dst = grad_target(src)) {
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
      },
      "reshape");
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar, got shape " + shape_to_string(shape()));
  }
  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& inputs = node->grad_fn ? node->grad_fn->inputs
                                       : std::vector<std::shared_ptr<Impl>>{};
    if (next < inputs.size()) {
      Impl* child = inputs[next++].get();
      if (child && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  impl_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->grad_fn && node->grad.size() == node->data.size()) {
      node->grad_fn->backward(node->grad);
    }
  }
}

void FlopCounter::record(std::string_view layer, std::uint64_t height, std::uint64_t width,
                         std::uint64_t c_in, std::uint64_t c_out, std::uint64_t kernel) {
  FlopEntry e{std::string(layer), height, width, c_in, c_out, kernel,
              height * width * c_in * c_out * kernel * kernel};
  total_ += e.f_ops;
  entries_.push_back(std::move(e));
}

void FlopCounter::clear() {
  entries_.clear();
  total_ = 0;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<const Tensor<T>*> inputs,
                      std::function<void(std::span<const T>)> backward,
                      std::string_view op_name) {
  for (const T& v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name) + ": non-finite value in output");
    }
  }
  Tensor<T> out(std::move(shape), std::move(data));
  if (!GradMode::enabled() || !backward) return out;
  bool needs = false;
  for (const auto* in : inputs) needs = needs || (in && in->requires_grad());
  if (!needs) return out;
  auto node = std::make_shared<detail::Node<T>>();
  for (const auto* in : inputs) {
    if (in && in->defined()) node->inputs.push_back(in->impl());
  }
  node->backward = std::move(backward);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_result<float>(Shape, std::vector<float>, std::vector<const Tensor<float>*>,
                                          std::function<void(std::span<const float>)>,
                                          std::string_view);
template Tensor<double> make_result<double>(Shape, std::vector<double>,
                                            std::vector<const Tensor<double>*>,
                                            std::function<void(std::span<const double>)>,
                                            std::string_view);

}  // namespace xfeat
