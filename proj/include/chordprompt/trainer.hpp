// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "chordprompt/benchmark.hpp"
#include "chordprompt/metrics.hpp"
#include "chordprompt/numeric.hpp"
#include "chordprompt/pool.hpp"

namespace chordprompt {

struct TrainConfig {
  std::uint32_t iterations = 2000;
  std::uint32_t few_shot_iterations = 500;
  double learning_rate = 2e-3;
  double weight_decay = 0.01;
  std::uint32_t batch_size = 64;
  double tau = 0.01;
  std::uint32_t depth = 4;
  std::uint32_t length = 2;
  double gamma = 0.8;
  std::uint64_t seed = 0;
  bool few_shot = false;
  std::uint32_t shots = 5;

  std::uint32_t effective_iterations() const { return few_shot ? few_shot_iterations : iterations; }
  void validate(const EncoderConfig& encoder) const;
};

// ---- scoring ----------------------------------------------------------------

/// Cosine similarity of x [d] against each row of ys [n, d]. Zero vectors
/// raise DegenerateInput.
Tensor scores(const Tensor& x, const Tensor& ys);
/// Cosine similarity matrix [rows(xs), rows(ys)].
Tensor score_matrix(const Tensor& xs, const Tensor& ys);
/// Mean over rows of -log softmax(scores/tau)[label].
double ce_loss(const Tensor& scores, std::span<const std::size_t> labels, double tau);

// ---- base pretraining -------------------------------------------------------

struct PretrainConfig {
  std::uint32_t max_iterations = 5000;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double tau = 0.05;
  /// Distinct classes per batch; 0 means all of them (capped at 64).
  std::uint32_t batch_classes = 0;
  double target_accuracy = 0.85;
  std::uint32_t eval_every = 100;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  BackboneWeights weights;
  double accuracy = 0.0;  // held-out zero-shot accuracy over every base class
  bool converged = false;
  std::uint32_t iterations = 0;
  std::vector<double> loss_trace;
};

/// Trains the whole dual encoder with the symmetric contrastive loss (image
/// to text and text to image, averaged) on batches of distinct classes,
/// stopping once held-out accuracy reaches the target or at the cap.
PretrainResult pretrain_base(const EncoderConfig& config, const TaskDataset& base,
                             const PretrainConfig& pc);

/// Zero-shot accuracy of the prompt-free model over `samples`, scoring
/// against every class name of `d`.
double base_accuracy(const BackboneWeights& w, const TaskDataset& d, const std::vector<Sample>& samples);

/// Largest cosine between the keys of two different tasks. Routing is sound
/// when this stays below gamma (own keys score 1).
double max_cross_key_similarity(const BackboneWeights& w, std::span<const TaskDataset> tasks);

// ---- prompt training --------------------------------------------------------

/// Prompt-training loss for one batch: cosine scores of prompted image
/// features against prompted class-name features, scaled by 1/tau, with
/// cross-entropy against `labels`. `params` holds prompt and aligner vars
/// (ids as in to_param_map).
Var task_loss(Tape& tape, const BackboneVars& backbone, const ParamVars& params, std::size_t depth,
              std::span<const Tensor> images, std::span<const std::size_t> labels,
              std::span<const TokenSeq> class_names, double tau);

struct TaskResult {
  PromptSet prompts;
  AlignerParams aligner;
  Prototype key;
  std::vector<double> loss_trace;
};

/// Trains prompts and aligners for one task; the backbone is read only.
/// Randomness comes from Rng(config.seed).derive(task_index + 1).
TaskResult train_task(const BackboneWeights& w, const TaskDataset& task, const TrainConfig& config,
                      std::size_t task_index);

/// Trains tasks in order, adding entry i with creation step i + 1.
PromptPool train_sequence(const BackboneWeights& w, std::span<const TaskDataset> tasks,
                          const TrainConfig& config,
                          std::vector<std::vector<double>>* loss_traces = nullptr);

// ---- inference --------------------------------------------------------------

struct Route {
  bool fallback = true;
  std::size_t entry = 0;
  double similarity = 0.0;
};

/// Routes a dataset by its class-name prototype. gamma above 1 can never be
/// reached and always falls back.
Route route(const PromptPool& pool, const BackboneWeights& w, std::span<const TokenSeq> class_names,
            double gamma);

/// Predictions of the prompt-free model: argmax cosine, ties to the lowest index.
std::vector<std::size_t> predict_base(const BackboneWeights& w, std::span<const Tensor> images,
                                      std::span<const TokenSeq> class_names);
/// Predictions with one entry's prompts: argmax softmax(cos/tau).
std::vector<std::size_t> predict_with_entry(const BackboneWeights& w, const PoolEntry& entry,
                                            std::span<const Tensor> images,
                                            std::span<const TokenSeq> class_names, double tau);
/// Routed batch prediction; the route is computed once for the whole batch.
std::vector<std::size_t> predict(const PromptPool& pool, const BackboneWeights& w,
                                 std::span<const Tensor> images,
                                 std::span<const TokenSeq> class_names, double gamma, double tau,
                                 Route* route_out = nullptr);
/// Single-image routed inference.
std::size_t infer(const PromptPool& pool, const BackboneWeights& w, const Tensor& image,
                  std::span<const TokenSeq> class_names, double gamma, double tau);

struct EvalConfig {
  double gamma = 0.8;
  double tau = 0.01;
  /// Route a task that is not yet in the snapshot to the base model without
  /// consulting the threshold.
  bool untrained_fallback = false;
};

struct EvalResult {
  AccuracyMatrix matrix;
  /// [snapshot][task][sample] predicted class index.
  std::vector<std::vector<std::vector<std::uint32_t>>> predictions;
  /// [snapshot][task]
  std::vector<std::vector<Route>> routes;
};

/// Snapshot s holds the first s entries of `pool`, s = 0..size.
std::vector<PromptPool> step_snapshots(const PromptPool& pool);

/// Row s of the result uses snapshots[s] on every task's test split;
/// snapshots[0] becomes the zero-shot row.
EvalResult evaluate_matrix(std::span<const PromptPool> snapshots, const BackboneWeights& w,
                           std::span<const TaskDataset> tasks, const EvalConfig& config);

}  // namespace chordprompt
