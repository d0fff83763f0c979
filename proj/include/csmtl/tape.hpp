#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

/// Handle to a tensor recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

enum class OpTag {
  conv2d,
  channel_bias,
  batch_norm,
  relu,
  matmul,
  add,
  mul,
  scale,
  exp,
  sum,
  element,
  mse_loss,
  cross_entropy_loss,
};

inline const char* op_name(OpTag tag) {
  switch (tag) {
    case OpTag::conv2d: return "conv2d";
    case OpTag::channel_bias: return "channel_bias";
    case OpTag::batch_norm: return "batch_norm";
    case OpTag::relu: return "relu";
    case OpTag::matmul: return "matmul";
    case OpTag::add: return "add";
    case OpTag::mul: return "mul";
    case OpTag::scale: return "scale";
    case OpTag::exp: return "exp";
    case OpTag::sum: return "sum";
    case OpTag::element: return "element";
    case OpTag::mse_loss: return "mse_loss";
    case OpTag::cross_entropy_loss: return "cross_entropy_loss";
  }
  return "unknown";
}

/// Append-only record of a forward computation, replayed in reverse by
/// backward(). Leaves registered with leaf() alias caller-owned tensors;
/// their gradients accumulate into the caller's grad buffers. The caller
/// keeps those tensors alive for the tape's lifetime.
///
/// A tape is confined to one thread.
class Tape {
 public:
  struct Node;
  /// Reads the node's output grad and accumulates into its inputs' grads.
  using BackwardFn = std::function<void(Tape&, const Node&)>;

  struct Node {
    OpTag tag;
    std::vector<std::size_t> inputs;
    std::size_t output;
    // Saved forward context lives in the closure.
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Registers a trainable tensor owned by the caller.
  Var leaf(Tensor& tensor) {
    slots_.push_back(Slot{&tensor, nullptr, true});
    return Var{slots_.size() - 1};
  }

  /// Registers a tensor owned by the tape that never needs a gradient.
  Var constant(Tensor tensor) {
    auto owned = std::make_unique<Tensor>(std::move(tensor));
    Tensor* ptr = owned.get();
    slots_.push_back(Slot{ptr, std::move(owned), false});
    return Var{slots_.size() - 1};
  }

  /// Records an operation output; `inputs` order is preserved in Node::inputs.
  Var record(OpTag tag, std::vector<Var> inputs, Tensor output, BackwardFn backward) {
    if (!output.values_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op_name(tag));
    }
    bool needs_grad = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (Var v : inputs) {
      check(v);
      needs_grad = needs_grad || slots_[v.id].requires_grad;
      ids.push_back(v.id);
    }
    auto owned = std::make_unique<Tensor>(std::move(output));
    Tensor* ptr = owned.get();
    slots_.push_back(Slot{ptr, std::move(owned), needs_grad});
    const std::size_t out_id = slots_.size() - 1;
    nodes_.push_back(Node{tag, std::move(ids), out_id, std::move(backward)});
    return Var{out_id};
  }

  Tensor& tensor(Var v) {
    check(v);
    return *slots_[v.id].tensor;
  }
  const Tensor& tensor(Var v) const {
    check(v);
    return *slots_[v.id].tensor;
  }
  const Tensor& value(Var v) const { return tensor(v); }

  bool requires_grad(Var v) const {
    check(v);
    return slots_[v.id].requires_grad;
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Reverse-mode sweep from a scalar loss. Intermediate gradients are reset
  /// on every call; leaf gradients accumulate (+=). Only nodes on a path to
  /// the loss are visited, each exactly once.
  void backward(Var loss) {
    check(loss);
    if (tensor(loss).size() != 1) {
      throw InvariantError("backward() needs a scalar loss, got shape " +
                           shape_string(tensor(loss).shape()));
    }
    for (Slot& s : slots_) {
      if (s.owned) s.tensor->zero_grad();
    }
    std::vector<bool> needed(slots_.size(), false);
    needed[loss.id] = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!needed[it->output]) continue;
      for (std::size_t in : it->inputs) {
        if (in >= it->output) throw InvariantError("tape node input does not precede its output");
        needed[in] = true;
      }
    }
    tensor(loss).grad()[0] += 1.0;
    last_visits_ = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!needed[it->output] || !slots_[it->output].requires_grad) continue;
      it->backward(*this, *it);
      ++last_visits_;
    }
    for (const Slot& s : slots_) {
      if (!s.owned && !s.tensor->grad_finite()) {
        throw NumericError("non-finite gradient after backward pass");
      }
    }
  }

  /// Nodes executed by the most recent backward().
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  struct Slot {
    Tensor* tensor;
    std::unique_ptr<Tensor> owned;
    bool requires_grad;
  };

  void check(Var v) const {
    if (v.id >= slots_.size()) throw InvariantError("Var does not belong to this tape");
  }

  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

}  // namespace csmtl
