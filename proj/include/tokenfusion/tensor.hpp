#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tokenfusion/errors.hpp"

namespace tokenfusion {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Debug switch: when on, every op checks its output for NaN/Inf and throws
/// NumericalError on the first hit. Off by default (costs a full scan per op).
inline bool& finite_checks() {
  static bool enabled = false;
  return enabled;
}

template <typename T>
struct DTypeName;
template <>
struct DTypeName<float> {
  static constexpr const char* value = "float32";
};
template <>
struct DTypeName<double> {
  static constexpr const char* value = "float64";
};

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward first touches this tensor
  bool requires_grad = false;
};

}  // namespace detail

/// Row-major n-d array of float32 or float64. A Tensor is a cheap handle:
/// copies alias the same storage (so tape nodes and the caller see the same
/// gradient buffer); clone() makes an independent deep copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    validate_shape(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<size_t>(numel_of(impl_->shape)), fill);
  }

  Tensor(Shape shape, std::vector<T> values)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    validate_shape(shape);
    require(numel_of(shape) == static_cast<int64_t>(values.size()),
            "tensor: " + std::to_string(values.size()) +
                " values cannot fill shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    return Tensor(std::move(shape), value);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t extent(int64_t axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }

  T item() const {
    require(numel() == 1, "item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    return impl_->data[static_cast<size_t>(flat_index(idx))];
  }

  void set(std::initializer_list<int64_t> idx, T value) {
    impl_->data[static_cast<size_t>(flat_index(idx))] = value;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }

  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }

  /// Allocates a zero-filled gradient buffer if none exists yet.
  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }

  /// Drops the gradient buffer; the next backward pass starts from zeros.
  void zero_grad() { impl_->grad.clear(); }

  Tensor grad_tensor() const {
    require(has_grad(), "grad_tensor: no gradient recorded for shape " + shape_str(shape()));
    return Tensor(impl_->shape, std::vector<T>(impl_->grad.begin(), impl_->grad.end()));
  }

  Tensor clone() const {
    return Tensor(impl_->shape, std::vector<T>(impl_->data.begin(), impl_->data.end()));
  }

  /// Stable identity of the underlying storage, for aliasing checks.
  const void* id() const { return impl_.get(); }

 private:
  static void validate_shape(const Shape& shape) {
    for (int64_t e : shape)
      require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
  }

  int64_t flat_index(std::initializer_list<int64_t> idx) const {
    require(static_cast<int64_t>(idx.size()) == rank(),
            "index rank mismatch for shape " + shape_str(shape()));
    int64_t flat = 0;
    size_t d = 0;
    for (int64_t i : idx) {
      require(i >= 0 && i < impl_->shape[d], "index out of range for shape " + shape_str(shape()));
      flat = flat * impl_->shape[d] + i;
      ++d;
    }
    return flat;
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

template <typename T>
void accumulate_grad(Tensor<T>& t, std::span<const T> contribution) {
  t.ensure_grad();
  auto dst = t.grad();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += contribution[i];
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, which is by construction a valid topological order of the forward
/// graph: every node's inputs were recorded (or are leaves) before it.
template <typename T>
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  /// The tape ops currently record onto; null means pure evaluation.
  static Tape*& current() {
    thread_local Tape* active = nullptr;
    return active;
  }

  void record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward_fn) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward_fn)});
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

/// RAII guard installing a fresh tape as the active one.
template <typename T>
struct TapeScope {
  Tape<T> tape;
  Tape<T>* previous;

  TapeScope() : previous(Tape<T>::current()) { Tape<T>::current() = &tape; }
  ~TapeScope() { Tape<T>::current() = previous; }

  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

/// Reverse pass over a recorded tape. Seeds d(loss)/d(loss) = 1, then visits
/// each node exactly once in reverse order; nodes whose outputs never
/// received a gradient are off the loss's ancestry and are skipped. Gradient
/// contributions accumulate additively across fan-out.
template <typename T>
inline size_t backward(Tensor<T> loss, Tape<T>& tape) {
  require(loss.numel() == 1,
          "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  loss.ensure_grad();
  loss.grad()[0] += T(1);
  size_t visited = 0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
    ++visited;
  }
  return visited;
}

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericalError(std::string("non-finite value produced by ") + op);
  }
}

/// Epilogue shared by every differentiable op: optional finite check, then
/// tape recording when gradients are being tracked.
template <typename T>
inline void finish_op(const char* op, std::vector<Tensor<T>> inputs, Tensor<T> out,
                      std::function<void()> backward_fn) {
  if (finite_checks()) check_finite(out, op);
  Tape<T>* tape = Tape<T>::current();
  if (!tape) return;
  bool needs = false;
  for (const auto& in : inputs)
    if (in.requires_grad()) needs = true;
  if (!needs) return;
  out.set_requires_grad(true);
  tape->record(op, std::move(inputs), std::move(out), std::move(backward_fn));
}

}  // namespace detail

}  // namespace tokenfusion
