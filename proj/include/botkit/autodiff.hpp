#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "botkit/tensor.hpp"

namespace botkit {

// One recorded op application. The vjp function maps the output cotangent to
// one cotangent per parent, in parent order, reusing the captured forward
// inputs. Nodes off every gradient path keep no parents, so pure inference
// frees intermediates as soon as their Var handles die.
struct Node {
  Tensor value;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<std::vector<Tensor>(const Tensor& cotangent)> vjp;
  Tensor grad;                // accumulated for leaves after backward()
  bool requires_grad = false; // leaf parameter flag
  bool grad_path = false;     // some ancestor requires grad
};

// Value handle into the differentiable graph.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const;
  bool has_grad() const { return node_ && node_->grad.defined(); }
  void zero_grad() { node_->grad = Tensor(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool grad_path() const { return node_ && (node_->grad_path || node_->requires_grad); }

  // Overwrites a leaf parameter's value in place (finite-difference probes).
  void set_value(const Tensor& t);

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Records an op result. Drops parents/vjp when no parent is on a grad path.
Var make_op(Tensor value, std::vector<Var> parents,
            std::function<std::vector<Tensor>(const Tensor&)> vjp);

// Reverse sweep from root, seeding with `cotangent` (defaults to ones).
// Accumulates into node->grad for every requires_grad leaf reached.
// Deterministic: traversal and accumulation order depend only on graph shape.
void backward(const Var& root, Tensor cotangent = Tensor());

}  // namespace botkit
