// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "chordprompt/tensor.hpp"

namespace chordprompt {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t index() const noexcept { return index_; }
  Tape* tape() const noexcept { return tape_; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

using GradMap = std::map<std::string, Tensor>;

/// Records a forward computation and replays it in reverse to get gradients.
///
/// Leaves are either constants (never differentiated) or parameters keyed by
/// a unique string id. Nodes whose inputs are all constants store no backward
/// closure, so frozen sub-graphs cost nothing during backward().
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(const std::string& id, Tensor value);

  /// Gradient of the scalar `loss` with respect to every parameter on this tape.
  /// Parameters the loss does not depend on get an all-zero entry.
  GradMap backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t i) const { return nodes_[i].value; }
  bool needs_grad(std::size_t i) const { return nodes_[i].requires_grad; }

  // Op authoring interface.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);
  /// Upstream gradient of node i; empty tensor if nothing flowed into it.
  const Tensor& grad(std::size_t i) const { return nodes_[i].grad; }
  /// Accumulation buffer for node i, zero-initialised on first use.
  Tensor& grad_accum(std::size_t i);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    std::string param_id;
  };
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

// ---- differentiable op vocabulary ----------------------------------------
// All matrices are rank-2 row-major; "rows" are tokens or samples.

Var matmul(Var a, Var b);      // [m,k]·[k,n]
Var matmul_nt(Var a, Var b);   // [m,k]·[n,k]ᵀ
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var x, Var bias);  // bias [C] broadcast over rows of x [R,C]
/// x holds `batch` consecutive blocks of rows; `block` [T,C] is added to each.
Var add_tiled(Var x, Var block, std::size_t batch);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var x);
Var sum(Var x);
Var reshape(Var x, Shape shape);
Var gather_rows(Var table, std::span<const std::size_t> ids);
Var concat_rows(std::span<const Var> parts);
/// Inserts `rows` [P,C] into each of `batch` blocks of `seq` rows of x,
/// before the block (front) or after it. Output [batch*(seq+P), C].
Var splice_rows(Var x, std::size_t batch, std::size_t seq, Var rows, bool front);
Var l2_normalize_rows(Var x);
/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

/// Multi-head scaled dot-product attention over `batch` sequences of `seq`
/// tokens. q, k, v are [batch*seq, C] with C divisible by heads. When `probs`
/// is non-null the attention weights [batch, heads, seq, seq] are appended.
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
              std::vector<Tensor>* probs = nullptr);

}  // namespace chordprompt
