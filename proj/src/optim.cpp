// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/optim.hpp"

#include <cmath>

namespace chordprompt {

void adamw_step(ParamMap& params, const GradMap& grads, OptimState& state) {
  // Validate everything before touching any state.
  for (const auto& [id, p] : params) {
    auto it = grads.find(id);
    CP_REQUIRE(it != grads.end(), "adamw_step: no gradient for parameter '" + id + "'");
    CP_REQUIRE(it->second.shape() == p.shape(),
               "adamw_step: gradient shape " + shape_str(it->second.shape()) +
                   " does not match parameter '" + id + "' shape " + shape_str(p.shape()));
    auto m = state.first_moment.find(id);
    if (m != state.first_moment.end())
      CP_REQUIRE(m->second.shape() == p.shape(), "adamw_step: moment shape mismatch for '" + id + "'");
  }

  const AdamWConfig& hp = state.hp;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);

  for (auto& [id, p] : params) {
    const Tensor& g = grads.at(id);
    auto [mit, m_new] = state.first_moment.try_emplace(id, p.shape(), 0.0);
    auto [vit, v_new] = state.second_moment.try_emplace(id, p.shape(), 0.0);
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= hp.learning_rate * hp.weight_decay * p[i];
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= hp.learning_rate * mhat / (std::sqrt(vhat) + hp.epsilon);
    }
  }
}

}  // namespace chordprompt
