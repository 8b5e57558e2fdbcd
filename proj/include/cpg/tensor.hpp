#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cpg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thread-local switch controlling whether new operations are recorded for
/// differentiation. Recording is on by default.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
using BackwardFn = std::function<void(std::span<const T> grad_out)>;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  std::uint64_t id = 0;
  std::string_view name;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::weak_ptr<TensorImpl<T>> output;
  BackwardFn<T> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;
};

}  // namespace detail

/// Dense row-major array with reverse-mode differentiation. Copies share
/// storage; a tensor is a handle to its implementation.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  /// Size of dimension `axis`; negative values count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  /// Writable view of the values. Intended for leaves (parameters, buffers).
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool value);
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros on first access.
  std::span<T> mutable_grad();
  void zero_grad();

  /// Copy of the values as a new leaf without history.
  Tensor detach() const;

  /// Reverse-mode sweep seeded with d(this)/d(this) = 1. Requires numel() == 1.
  void backward() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  template <typename U>
  friend Tensor<U> make_result(Shape, std::vector<U>, std::initializer_list<Tensor<U>>,
                               std::string_view, BackwardFn<U>);
  template <typename U>
  friend Tensor<U> make_result(Shape, std::vector<U>, const std::vector<Tensor<U>>&,
                               std::string_view, BackwardFn<U>);

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Build the output of an operation. When recording is enabled and any input
/// requires a gradient, a graph node is attached whose backward rule receives
/// the output gradient. The rule must not capture the output tensor itself.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::string_view name, BackwardFn<T> backward);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::string_view name, BackwardFn<T> backward);

/// Gradient buffer of `t` for accumulation inside backward rules.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  Tensor<T> handle = t;
  return handle.mutable_grad();
}

/// Number of graph nodes created so far in this process (monotonic).
std::uint64_t graph_nodes_created();

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace cpg
