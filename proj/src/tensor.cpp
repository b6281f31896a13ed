#include "caft/tensor.hpp"

#include <sstream>

namespace caft {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::softmax_last: return "softmax-last-axis";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::log: return "log";
    case OpKind::exp: return "exp";
    case OpKind::layernorm: return "layernorm";
    case OpKind::gelu: return "gelu";
    case OpKind::mean_axis: return "mean-axis";
    case OpKind::sum_axis: return "sum-axis";
    case OpKind::l2_normalize_last: return "l2-normalize-last-axis";
    case OpKind::embedding_lookup: return "embedding-lookup";
    case OpKind::masked_fill: return "masked-fill";
    case OpKind::log_sigmoid: return "log-sigmoid";
  }
  return "unknown";
}

namespace {

void validate_shape(const Shape& shape, std::size_t count) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != count) {
    throw ShapeError("shape " + shape_str(shape) + " does not hold " + std::to_string(count) + " values");
  }
}

thread_local Tape* t_current_tape = nullptr;
thread_local bool t_grad_enabled = true;

}  // namespace

Tensor make_result(Shape shape, std::vector<double> values) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape, values.size());
  Tensor t = make_result(std::move(shape), std::move(values));
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->values[0];
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::detach() const { return Tensor::from(shape(), impl_->values, false); }

Tape& Tape::current() {
  thread_local Tape default_tape;
  return t_current_tape ? *t_current_tape : default_tape;
}

bool Tape::record(OpKind kind, const std::vector<Tensor>& inputs, Tensor& output, BackwardFn fn) {
  if (!t_grad_enabled) return false;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return false;
  output.impl_->requires_grad = true;
  output.impl_->tape = this;
  output.impl_->tape_epoch = epoch_;
  nodes_.push_back(Node{kind, inputs, output, std::move(fn)});
  return true;
}

void Tape::backward(const Tensor& root) {
  if (!root.defined()) throw TapeError("backward on an undefined tensor");
  if (root.numel() != 1) throw TapeError("backward root must be a scalar, got " + shape_str(root.shape()));
  auto& r = root.impl();
  if (!r.requires_grad || r.tape != this || r.tape_epoch != epoch_) {
    throw TapeError("backward root is detached from this tape");
  }
  if (consumed_) throw TapeError("backward already ran on this tape; call reset() first");
  consumed_ = true;
  r.grad_buffer()[0] += 1.0;
  visit_order_.clear();
  visit_order_.reserve(nodes_.size());
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    auto& node = nodes_[i];
    visit_order_.push_back(i);
    auto& out = node.output.impl();
    if (out.grad.empty()) continue;  // output never reached the root
    node.fn(out.grad);
  }
}

void Tape::reset() {
  nodes_.clear();
  visit_order_.clear();
  consumed_ = false;
  ++epoch_;
}

std::vector<OpKind> Tape::kinds() const {
  std::vector<OpKind> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.push_back(n.kind);
  return out;
}

TapeScope::TapeScope(Tape& tape) : previous_(t_current_tape) { t_current_tape = &tape; }
TapeScope::~TapeScope() { t_current_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

}  // namespace caft
