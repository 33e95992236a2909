// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

namespace chordprompt {

/// Task-incremental accuracy grid. steps[i][j] is the test accuracy on task j
/// after training tasks 0..i; `zero_shot` is the optional row before any
/// training.
struct AccuracyMatrix {
  std::optional<std::vector<double>> zero_shot;
  std::vector<std::vector<double>> steps;

  std::size_t tasks() const noexcept { return steps.size(); }
  /// Square N×N steps, matching zero-shot width, entries in [0, 1].
  void validate() const;
};

struct MetricsOptions {
  /// Also count the zero-shot row in Transfer (every column of it).
  bool transfer_includes_zero_shot_row = false;
};

struct Metrics {
  /// Mean of steps[i][j] over i < j; absent for a single task.
  std::optional<double> transfer;
  /// Per task j: mean over i < j; absent for the first task.
  std::vector<std::optional<double>> transfer_per_dataset;
  /// Mean of the present per-dataset Transfer values.
  std::optional<double> transfer_dataset_mean;
  /// Same cells as `transfer`, read from the zero-shot row instead.
  std::optional<double> zero_shot_transfer;

  /// Plain mean of every entry, zero-shot row included when present.
  double avg = 0.0;
  std::vector<double> avg_per_dataset;
  /// Per task j: mean over the rows where j is already trained (i >= j),
  /// then averaged over tasks.
  double avg_trained = 0.0;
  std::vector<double> avg_trained_per_dataset;

  /// Mean of the final row.
  double last = 0.0;
  std::vector<double> last_per_dataset;
};

Metrics compute_metrics(const AccuracyMatrix& m, const MetricsOptions& opts = {});

/// Exponential moving average with alpha = 2 / (window + 1), seeded with the
/// first value. Returns one value per input.
std::vector<double> ema(const std::vector<double>& values, std::size_t window);

}  // namespace chordprompt
