#include "botkit/autodiff.hpp"

#include <unordered_map>

namespace botkit {

Var::Var(Tensor value, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::grad() const {
  if (!node_ || !node_->grad.defined()) throw Error("no gradient recorded; run backward() first");
  return node_->grad;
}

void Var::set_value(const Tensor& t) {
  if (!node_) throw Error("set_value on undefined Var");
  node_->value = t;
}

Var make_op(Tensor value, std::vector<Var> parents,
            std::function<std::vector<Tensor>(const Tensor&)> vjp) {
  Var out(std::move(value));
  bool needs = false;
  for (const Var& p : parents) {
    if (p.defined() && (p.requires_grad() || p.grad_path())) needs = true;
  }
  if (needs) {
    auto& node = *out.node();
    node.grad_path = true;
    node.vjp = std::move(vjp);
    node.parents.reserve(parents.size());
    for (const Var& p : parents) node.parents.push_back(p.node());
  }
  return out;
}

namespace {

void accumulate(Tensor& slot, const Tensor& delta) {
  if (!slot.defined()) {
    // Copy so later += does not alias the producer's tensor.
    slot = Tensor::from_data(delta.shape(), std::vector<double>(delta.data(), delta.data() + delta.numel()),
                             delta.dtype());
    return;
  }
  if (slot.shape() != delta.shape()) throw ShapeError("cotangent shape mismatch during backward");
  double* a = slot.mutable_data();
  const double* b = delta.data();
  int64_t n = slot.numel();
  for (int64_t i = 0; i < n; ++i) a[i] += b[i];
  finalize_dtype(slot);
}

}  // namespace

void backward(const Var& root, Tensor cotangent) {
  if (!root.defined()) throw Error("backward on undefined Var");
  if (!root.grad_path()) return;
  if (!cotangent.defined()) cotangent = Tensor::full(root.value().shape(), 1.0, root.value().dtype());
  if (cotangent.shape() != root.value().shape()) {
    throw ShapeError("cotangent shape " + cotangent.shape_str() + " != output shape " +
                     root.value().shape_str());
  }

  // Iterative post-order topological sort over the grad-relevant subgraph.
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 open, 2 done
  std::vector<Node*> stack{root.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    int& st = state[n];
    if (st == 0) {
      st = 1;
      for (auto& p : n->parents) {
        Node* pn = p.get();
        if ((pn->grad_path || pn->requires_grad) && state[pn] == 0) stack.push_back(pn);
      }
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        order.push_back(n);
      }
    }
  }

  std::unordered_map<Node*, Tensor> cot;
  cot[root.node().get()] = std::move(cotangent);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto found = cot.find(n);
    if (found == cot.end()) continue;
    Tensor ct = std::move(found->second);
    cot.erase(found);
    if (n->requires_grad) accumulate(n->grad, ct);
    if (!n->vjp) continue;
    std::vector<Tensor> parent_cts = n->vjp(ct);
    if (parent_cts.size() != n->parents.size()) throw Error("vjp arity mismatch");
    for (size_t i = 0; i < n->parents.size(); ++i) {
      Node* pn = n->parents[i].get();
      if (!(pn->grad_path || pn->requires_grad)) continue;
      if (!parent_cts[i].defined()) continue;
      accumulate(cot[pn], parent_cts[i]);
    }
  }
}

}  // namespace botkit
