#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "irpatch/tensor.hpp"

namespace irpatch::diff {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  div,
  scalar_mul,
  affine,
  matmul,
  conv2d,
  leaky_relu,
  sigmoid,
  exp,
  log,
  softmax,
  reduce_mean,
  reduce_sum,
  max_axis,
  bilinear_sample,
  concat,
  reshape,
  slice,
  gather,
  clamp,
  step,
  bce_with_logits,
  smooth_l1,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::scalar_mul: return "scalar-mul";
    case OpKind::affine: return "affine";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::leaky_relu: return "leaky-relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::softmax: return "softmax";
    case OpKind::reduce_mean: return "reduce-mean";
    case OpKind::reduce_sum: return "reduce-sum";
    case OpKind::max_axis: return "max-over-axis";
    case OpKind::bilinear_sample: return "bilinear-sample";
    case OpKind::concat: return "concat";
    case OpKind::reshape: return "reshape";
    case OpKind::slice: return "slice";
    case OpKind::gather: return "gather";
    case OpKind::clamp: return "clamp";
    case OpKind::step: return "step";
    case OpKind::bce_with_logits: return "bce-with-logits";
    case OpKind::smooth_l1: return "smooth-l1";
  }
  return "?";
}

class Tape;

/// Handle to a tensor recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// What an op's adjoint sees. `grads[i]` is null when input i needs no gradient.
struct BackwardArgs {
  const Tensor& upstream;
  const Tensor& output;
  std::span<const Tensor* const> inputs;
  std::span<Tensor* const> grads;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Gradients of a scalar root, indexed by node id.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Tensor>> grads, bool crossed_step)
      : grads_(std::move(grads)), crossed_step_(crossed_step) {}

  bool has(Var v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }

  const Tensor& operator[](Var v) const {
    if (!has(v)) throw std::out_of_range("gradient: node " + std::to_string(v.id) + " not reached");
    return *grads_[v.id];
  }

  /// True when backpropagation had to pass through a non-differentiable step.
  bool crossed_nondifferentiable() const noexcept { return crossed_step_; }

 private:
  std::vector<std::optional<Tensor>> grads_;
  bool crossed_step_ = false;
};

/// Records a computation in topological order and replays adjoints in reverse.
/// A tape belongs to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{OpKind::leaf, {}, std::move(value), requires_grad, true, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(OpKind kind, std::vector<Var> inputs, Tensor value, BackwardFn backward,
             bool differentiable = true) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape != this) {
        throw std::invalid_argument(std::string(op_name(kind)) + ": input recorded on another tape");
      }
      ids.push_back(in.id);
      needs = needs || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{kind, std::move(ids), std::move(value), needs, differentiable, std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Gradients backward(Var root) const {
    if (root.tape != this) throw std::invalid_argument("backward: root is not on this tape");
    const Tensor& rv = nodes_.at(root.id).value;
    if (rv.size() != 1) {
      throw ShapeError("backward: root must be scalar, got " + shape_str(rv.shape()));
    }
    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[root.id] = Tensor(rv.shape(), 1.0);
    bool crossed_step = false;

    std::vector<const Tensor*> in_vals;
    std::vector<Tensor*> in_grads;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      const Node& node = nodes_[id];
      if (!grads[id] || node.inputs.empty() || !node.requires_grad) continue;
      if (!node.differentiable) {
        crossed_step = true;
        continue;
      }
      in_vals.clear();
      in_grads.clear();
      for (std::size_t in : node.inputs) {
        in_vals.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (!grads[in]) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
          in_grads.push_back(&*grads[in]);
        } else {
          in_grads.push_back(nullptr);
        }
      }
      node.backward(BackwardArgs{*grads[id], node.value, in_vals, in_grads});
    }
    return Gradients(std::move(grads), crossed_step);
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad;
    bool differentiable;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable references across record()
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace irpatch::diff
