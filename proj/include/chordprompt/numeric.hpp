// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>

#include "chordprompt/optim.hpp"
#include "chordprompt/tape.hpp"

namespace chordprompt {

/// Temperature softmax over a vector, or over each row of a matrix.
/// Uses max-subtraction, so adding a constant to a row leaves it unchanged.
Tensor softmax(const Tensor& scores, double tau);

/// Index of the largest element; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

using ParamVars = std::map<std::string, Var>;
/// Builds a scalar loss on `tape` from parameter handles. Must be a pure
/// function of the parameter values: the finite-difference oracle calls it
/// 2N+1 times and compares results, so any hidden randomness or mutable
/// state makes the reported error meaningless.
using LossBuilder = std::function<Var(Tape& tape, const ParamVars& params)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares tape gradients with central differences (f(x+ε)−f(x−ε))/2ε,
/// element by element. Relative error uses max(|analytic|, |numeric|, 1e-12)
/// as denominator.
FiniteDiffReport finite_diff_check(const LossBuilder& f, const ParamMap& params, double eps);

}  // namespace chordprompt
