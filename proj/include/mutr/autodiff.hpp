#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mutr/tensor.hpp"

namespace mutr {

class Tape;

struct VarNode {
  Tensor value;
  Tensor grad;              // undefined until first accumulation or grad()
  bool needs_grad = false;  // participates in the differentiable path
  Tape* producer = nullptr; // tape that recorded the producing op, if any
};

// Handle to a node in the computation graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<VarNode> node) : node_(std::move(node)) {}

  // A leaf holds externally owned data (parameters, inputs). Gradients flow
  // into it when requires_grad is set.
  static Var leaf(Tensor value, bool requires_grad);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() const { return node_->value; }
  bool needs_grad() const { return node_ && node_->needs_grad; }

  // Accumulated gradient; zeros of the value's shape if nothing flowed here.
  const Tensor& grad() const;
  bool has_grad() const { return node_ && node_->grad.defined(); }
  void zero_grad() const;

  const std::shared_ptr<VarNode>& node() const { return node_; }

 private:
  std::shared_ptr<VarNode> node_;
};

// Single-owner record of executed differentiable ops. Constructing a tape
// makes it current for the thread; ops record their backward closures onto
// the current tape when an input needs gradients. Replay happens once, in
// reverse execution order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::function<void()> backward_fn);

  // Seeds the scalar loss gradient with 1 and replays the tape in reverse.
  // The tape is consumed afterwards.
  void backward(const Var& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return records_.size(); }

 private:
  std::vector<std::function<void()>> records_;
  bool consumed_ = false;
  Tape* previous_ = nullptr;
};

// Op-implementation helpers.
namespace detail {

// True when the current op must record a backward closure.
bool grad_recording(std::initializer_list<const Var*> inputs);

// Creates the output node for an op; marks it grad-path when recording.
Var make_output(Tensor value, bool on_grad_path);

// grad += delta. `owned` means the buffer is fresh and may be adopted on the
// first accumulation; shared buffers (views of other tensors) must pass false.
void accum_grad(const std::shared_ptr<VarNode>& node, Tensor delta,
                bool owned = true);

void ensure_finite(const Tensor& t, const char* op_name);

}  // namespace detail

}  // namespace mutr
