#include "mutr/autodiff.hpp"

#include "mutr/kernels.hpp"

namespace mutr {

namespace {
thread_local Tape* tls_current_tape = nullptr;
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<VarNode>();
  node->value = std::move(value);
  node->needs_grad = requires_grad;
  return Var(std::move(node));
}

const Tensor& Var::grad() const {
  if (!node_) throw ConfigError("grad() on undefined var");
  if (!node_->grad.defined()) {
    node_->grad = Tensor::zeros(node_->value.shape(), node_->value.dtype());
  }
  return node_->grad;
}

void Var::zero_grad() const {
  if (!node_) return;
  node_->grad = Tensor();
}

Tape::Tape() {
  previous_ = tls_current_tape;
  if (previous_ != nullptr) {
    throw ConfigError("a tape is already active; tapes are single-owner");
  }
  tls_current_tape = this;
}

Tape::~Tape() { tls_current_tape = previous_; }

Tape* Tape::current() { return tls_current_tape; }

void Tape::record(std::function<void()> backward_fn) {
  if (consumed_) throw ConfigError("recording onto a consumed tape");
  records_.push_back(std::move(backward_fn));
}

void Tape::backward(const Var& loss) {
  if (consumed_) throw ConfigError("backward on a consumed tape");
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ConfigError("backward requires a scalar loss");
  }
  if (loss.node()->producer != this) {
    throw ConfigError("loss was not produced under this tape");
  }
  const double v = loss.value().get(0);
  if (!std::isfinite(v)) throw NumericError("backward on non-finite loss");
  loss.node()->grad = Tensor::full(loss.value().shape(), loss.value().dtype(), 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    (*it)();
  }
  records_.clear();
  consumed_ = true;
}

namespace detail {

bool grad_recording(std::initializer_list<const Var*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Var* v : inputs) {
    if (v != nullptr && v->defined() && v->needs_grad()) return true;
  }
  return false;
}

Var make_output(Tensor value, bool on_grad_path) {
  auto node = std::make_shared<VarNode>();
  node->value = std::move(value);
  node->needs_grad = on_grad_path;
  node->producer = on_grad_path ? Tape::current() : nullptr;
  return Var(std::move(node));
}

void accum_grad(const std::shared_ptr<VarNode>& node, Tensor delta, bool owned) {
  if (!node->grad.defined()) {
    // Adopting a shared buffer would alias another node's gradient.
    node->grad = owned ? std::move(delta) : delta.clone();
    return;
  }
  Tensor& g = node->grad;
  if (g.dtype() == DType::kF32) {
    kern::axpy<float>(1.0f, delta.data<float>(), g.data<float>(), g.numel());
  } else {
    kern::axpy<double>(1.0, delta.data<double>(), g.data<double>(), g.numel());
  }
}

void ensure_finite(const Tensor& t, const char* op_name) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op_name) + " produced non-finite values");
  }
}

}  // namespace detail

}  // namespace mutr
