// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "chordprompt/tape.hpp"

namespace chordprompt {

using ParamMap = std::map<std::string, Tensor>;

struct AdamWConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// Per-parameter moments plus the shared step counter.
struct OptimState {
  AdamWConfig hp;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::uint64_t step = 0;

  OptimState() = default;
  explicit OptimState(AdamWConfig config) : hp(config) {}
};

/// One decoupled-weight-decay Adam update over every entry of `params`.
///
/// Each parameter needs a gradient of identical shape in `grads`; extra
/// gradient entries are ignored. Update order per element:
///   p -= lr * wd * p
///   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g²
///   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
void adamw_step(ParamMap& params, const GradMap& grads, OptimState& state);

}  // namespace chordprompt
