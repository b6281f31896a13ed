#pragma once

// Dense real tensors with a reverse-mode tape.
//
// A Tensor is a cheap shared handle. Tensors created by an operation whose
// inputs require gradients are recorded on the thread's current Tape; calling
// Tape::backward on a scalar result walks the recorded nodes in reverse
// construction order and accumulates gradients into every tensor that
// requires them.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace caft {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for operand shapes that violate an operation's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation would produce NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for misuse of the tape (double backward, detached roots, ...).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class OpKind : std::uint8_t {
  matmul,
  add,
  mul,
  scale,
  transpose,
  reshape,
  concat,
  slice,
  softmax_last,
  sigmoid,
  log,
  exp,
  layernorm,
  gelu,
  mean_axis,
  sum_axis,
  l2_normalize_last,
  embedding_lookup,
  masked_fill,
  log_sigmoid,
};

const char* op_name(OpKind kind);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  // Non-null when produced by a recorded operation.
  const Tape* tape = nullptr;
  std::uint64_t tape_epoch = 0;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  /// Extent of `axis`; negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return impl_->values.size(); }

  std::span<const double> values() const { return impl_->values; }
  /// Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_values() { return impl_->values; }
  double item() const;
  double at(std::size_t flat_index) const { return impl_->values.at(flat_index); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient view; all zeros when nothing has been accumulated yet.
  std::span<const double> grad() const;
  void zero_grad() { impl_->grad.clear(); }

  /// Copy of the values with no tape history.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl& impl() const { return *impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
  friend Tensor make_result(Shape, std::vector<double>);
};

/// Allocates a fresh result tensor (not yet recorded).
Tensor make_result(Shape shape, std::vector<double> values);

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// The tape operations record onto for this thread.
  static Tape& current();

  /// Records `output` as produced by `kind` from `inputs` when recording is
  /// enabled and any input requires a gradient. Returns true when recorded.
  bool record(OpKind kind, const std::vector<Tensor>& inputs, Tensor& output, BackwardFn fn);

  /// Populates gradients of every tensor requiring one with d(root)/d(tensor).
  void backward(const Tensor& root);

  /// Drops all recorded nodes and re-arms backward.
  void reset();

  std::size_t size() const { return nodes_.size(); }
  /// Operation kinds in construction order.
  std::vector<OpKind> kinds() const;

  /// Nodes visited by the last backward, in visiting order (indices into the tape).
  const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

 private:
  struct Node {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::deque<Node> nodes_;
  std::vector<std::size_t> visit_order_;
  std::uint64_t epoch_ = 1;
  bool consumed_ = false;
};

/// Redirects recording to `tape` for the guard's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for the guard's lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace caft
