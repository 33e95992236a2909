// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/numeric.hpp"

#include <algorithm>
#include <cmath>

namespace chordprompt {

namespace {

void softmax_span(std::span<const double> in, std::span<double> out, double tau) {
  const double mx = *std::max_element(in.begin(), in.end());
  double z = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp((in[i] - mx) / tau);
    z += out[i];
  }
  for (auto& v : out) v /= z;
}

double eval_loss(const LossBuilder& f, const ParamMap& params) {
  Tape tape;
  ParamVars vars;
  for (const auto& [id, t] : params) vars.emplace(id, tape.constant(t));
  return f(tape, vars).value().item();
}

}  // namespace

Tensor softmax(const Tensor& scores, double tau) {
  CP_REQUIRE(tau > 0.0, "softmax: temperature must be positive, got " + std::to_string(tau));
  CP_REQUIRE(scores.rank() == 1 || scores.rank() == 2, "softmax: expected vector or matrix");
  CP_REQUIRE(scores.size() > 0, "softmax: empty input");
  Tensor out(scores.shape());
  if (scores.rank() == 1) {
    softmax_span(scores.data(), out.data(), tau);
  } else {
    for (std::size_t r = 0; r < scores.rows(); ++r) softmax_span(scores.row(r), out.row(r), tau);
  }
  return out;
}

std::size_t argmax(std::span<const double> v) {
  CP_REQUIRE(!v.empty(), "argmax of empty sequence");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

FiniteDiffReport finite_diff_check(const LossBuilder& f, const ParamMap& params, double eps) {
  CP_REQUIRE(eps > 0.0, "finite_diff_check: eps must be positive");

  GradMap analytic;
  {
    Tape tape;
    ParamVars vars;
    for (const auto& [id, t] : params) vars.emplace(id, tape.parameter(id, t));
    analytic = tape.backward(f(tape, vars));
  }

  FiniteDiffReport report;
  ParamMap probe = params;
  for (const auto& [id, base] : params) {
    Tensor& p = probe.at(id);
    const Tensor& ga = analytic.at(id);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double x0 = base[i];
      p[i] = x0 + eps;
      const double fp = eval_loss(f, probe);
      p[i] = x0 - eps;
      const double fm = eval_loss(f, probe);
      p[i] = x0;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double denom = std::max({std::abs(ga[i]), std::abs(numeric), 1e-12});
      const double rel = std::abs(ga[i] - numeric) / denom;
      ++report.checked;
      if (report.checked == 1 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = id;
        report.worst_index = i;
        report.worst_analytic = ga[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace chordprompt
