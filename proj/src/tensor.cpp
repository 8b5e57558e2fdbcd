#include "cpg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace cpg {

namespace {

thread_local bool grad_mode_enabled = true;
std::atomic<std::uint64_t> next_node_id{1};

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

std::uint64_t graph_nodes_created() { return next_node_id.load() - 1; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (!is_leaf()) throw std::logic_error("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = value;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (impl_->grad.empty() && !impl_->data.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (!impl_ || numel() != 1) {
    throw ShapeError("backward() requires a scalar, got shape " +
                     (impl_ ? shape_str(shape()) : std::string("<undefined>")));
  }
  if (!impl_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Node ids increase with creation order and every node is created after
  // its inputs, so descending id is a valid reverse topological order.
  std::vector<detail::Node<T>*> nodes;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack;
  if (impl_->grad_fn) stack.push_back(impl_->grad_fn.get());
  while (!stack.empty()) {
    auto* node = stack.back();
    stack.pop_back();
    if (!seen.insert(node).second) continue;
    nodes.push_back(node);
    for (const auto& in : node->inputs) {
      if (in->grad_fn && !seen.count(in->grad_fn.get())) stack.push_back(in->grad_fn.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const auto* a, const auto* b) { return a->id > b->id; });

  if (impl_->grad.empty()) impl_->grad.assign(1, T(0));
  impl_->grad[0] += T(1);

  for (auto* node : nodes) {
    auto out = node->output.lock();
    if (!out || out->grad.empty()) continue;
    node->backward(std::span<const T>(out->grad));
  }
}

namespace {

template <typename T, typename Range>
Tensor<T> build_result(Shape shape, std::vector<T> data, const Range& inputs, std::string_view name,
                       BackwardFn<T> backward,
                       const std::function<Tensor<T>(std::shared_ptr<detail::TensorImpl<T>>)>& wrap) {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError(std::string(name) + ": result data does not match shape " + shape_str(shape));
  }
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs_grad = false;
  if (GradMode::enabled()) {
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  if (needs_grad) {
    auto node = std::make_shared<detail::Node<T>>();
    node->id = next_node_id.fetch_add(1);
    node->name = name;
    for (const auto& t : inputs) {
      if (t.requires_grad()) node->inputs.push_back(t.impl());
    }
    node->output = impl;
    node->backward = std::move(backward);
    impl->requires_grad = true;
    impl->grad_fn = std::move(node);
  }
  return wrap(std::move(impl));
}

}  // namespace

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::string_view name, BackwardFn<T> backward) {
  return build_result<T>(std::move(shape), std::move(data), inputs, name, std::move(backward),
                         [](auto impl) { return Tensor<T>(std::move(impl)); });
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::string_view name, BackwardFn<T> backward) {
  return build_result<T>(std::move(shape), std::move(data), inputs, name, std::move(backward),
                         [](auto impl) { return Tensor<T>(std::move(impl)); });
}

template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_result(Shape, std::vector<float>, std::initializer_list<Tensor<float>>,
                                   std::string_view, BackwardFn<float>);
template Tensor<double> make_result(Shape, std::vector<double>, std::initializer_list<Tensor<double>>,
                                    std::string_view, BackwardFn<double>);
template Tensor<float> make_result(Shape, std::vector<float>, const std::vector<Tensor<float>>&,
                                   std::string_view, BackwardFn<float>);
template Tensor<double> make_result(Shape, std::vector<double>, const std::vector<Tensor<double>>&,
                                    std::string_view, BackwardFn<double>);

}  // namespace cpg
