// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/metrics.hpp"

#include <cmath>
#include <string>

#include "chordprompt/errors.hpp"

namespace chordprompt {

void AccuracyMatrix::validate() const {
  const std::size_t n = steps.size();
  CP_REQUIRE(n > 0, "accuracy matrix: no training steps");
  auto check_row = [&](const std::vector<double>& row, const std::string& name) {
    CP_REQUIRE(row.size() == n, "accuracy matrix: " + name + " has " + std::to_string(row.size()) +
                                    " entries, expected " + std::to_string(n));
    for (double v : row)
      CP_REQUIRE(v >= 0.0 && v <= 1.0, "accuracy matrix: " + name + " entry outside [0, 1]");
  };
  if (zero_shot) check_row(*zero_shot, "zero-shot row");
  for (std::size_t i = 0; i < n; ++i) check_row(steps[i], "row " + std::to_string(i + 1));
}

namespace {

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

Metrics compute_metrics(const AccuracyMatrix& m, const MetricsOptions& opts) {
  m.validate();
  const std::size_t n = m.tasks();
  Metrics out;

  std::vector<double> cells, zs_cells;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> col;
    if (opts.transfer_includes_zero_shot_row && m.zero_shot) {
      col.push_back((*m.zero_shot)[j]);
      cells.push_back((*m.zero_shot)[j]);
      zs_cells.push_back((*m.zero_shot)[j]);
    }
    for (std::size_t i = 0; i < j; ++i) {
      col.push_back(m.steps[i][j]);
      cells.push_back(m.steps[i][j]);
      if (m.zero_shot) zs_cells.push_back((*m.zero_shot)[j]);
    }
    out.transfer_per_dataset.push_back(col.empty() ? std::nullopt : std::optional(mean(col)));
  }
  if (!cells.empty()) out.transfer = mean(cells);
  if (!zs_cells.empty()) out.zero_shot_transfer = mean(zs_cells);
  std::vector<double> present;
  for (const auto& t : out.transfer_per_dataset)
    if (t) present.push_back(*t);
  if (!present.empty()) out.transfer_dataset_mean = mean(present);

  std::vector<double> all;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> col, trained;
    if (m.zero_shot) col.push_back((*m.zero_shot)[j]);
    for (std::size_t i = 0; i < n; ++i) {
      col.push_back(m.steps[i][j]);
      if (i >= j) trained.push_back(m.steps[i][j]);
    }
    out.avg_per_dataset.push_back(mean(col));
    out.avg_trained_per_dataset.push_back(mean(trained));
  }
  if (m.zero_shot) all = *m.zero_shot;
  for (const auto& row : m.steps) all.insert(all.end(), row.begin(), row.end());
  out.avg = mean(all);
  out.avg_trained = mean(out.avg_trained_per_dataset);

  out.last_per_dataset = m.steps.back();
  out.last = mean(out.last_per_dataset);
  return out;
}

std::vector<double> ema(const std::vector<double>& values, std::size_t window) {
  CP_REQUIRE(window > 0, "ema: window must be positive");
  const double alpha = 2.0 / (static_cast<double>(window) + 1.0);
  std::vector<double> out;
  out.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    out.push_back(i == 0 ? values[0] : alpha * values[i] + (1.0 - alpha) * out.back());
  return out;
}

}  // namespace chordprompt
