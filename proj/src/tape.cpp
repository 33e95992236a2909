// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/tape.hpp"

namespace chordprompt {

const Tensor& Var::value() const {
  CP_REQUIRE(tape_ != nullptr, "use of an unbound Var");
  return tape_->value(index_);
}

bool Var::requires_grad() const { return tape_ != nullptr && tape_->needs_grad(index_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const std::string& id, Tensor value) {
  CP_REQUIRE(!id.empty(), "parameter id must be non-empty");
  CP_REQUIRE(!params_.contains(id), "parameter '" + id + "' registered twice on one tape");
  nodes_.push_back(Node{std::move(value), {}, {}, true, id});
  params_.emplace(id, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  bool rg = false;
  for (const Var& p : parents) {
    CP_REQUIRE(p.tape() == this, "op mixes Vars from different tapes");
    rg = rg || nodes_[p.index()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, rg, {}});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_accum(std::size_t i) {
  Node& n = nodes_[i];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size())
    n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

GradMap Tape::backward(Var loss) {
  CP_REQUIRE(loss.tape() == this, "loss belongs to a different tape");
  const Tensor& lv = nodes_[loss.index()].value;
  CP_REQUIRE(lv.size() == 1, "backward requires a scalar loss, got shape " + shape_str(lv.shape()));

  for (auto& n : nodes_) n.grad = Tensor();
  grad_accum(loss.index())[0] = 1.0;

  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }

  GradMap out;
  for (const auto& [id, idx] : params_) {
    const Node& n = nodes_[idx];
    out.emplace(id, n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad);
  }
  return out;
}

}  // namespace chordprompt
