// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chordprompt/encoder.hpp"
#include "chordprompt/rng.hpp"

namespace chordprompt {

struct Sample {
  Tensor image;  // [H, W, C]
  std::uint32_t label = 0;
};

struct TaskDataset {
  std::string task_id;
  std::vector<TokenSeq> class_names;
  std::vector<Sample> train;
  std::vector<Sample> test;

  std::size_t num_classes() const noexcept { return class_names.size(); }
  /// Throws ContractViolation on out-of-range labels or malformed images.
  void validate(const EncoderConfig& config) const;
};

/// Rendering styles. Neutral is the pretraining look; the others shift a domain.
enum class Style : std::uint32_t { Neutral = 0, ChannelPermute = 1, Inverted = 2, Patterned = 3 };
const char* style_name(Style s);

struct BenchmarkConfig {
  std::uint64_t seed = 7;
  std::uint32_t domains = 3;
  std::uint32_t classes = 6;            // per domain
  std::uint32_t samples_per_class = 30; // per domain, split into train/test
  std::uint32_t base_samples_per_class = 150;
  double test_fraction = 1.0 / 3.0;
  /// Strength of the domain style shift in [0, 1].
  double style_strength = 1.0;
  std::uint32_t image_size = 16;
  std::uint32_t channels = 3;
  std::uint32_t vocab_size = 64;

  void validate() const;
};

inline constexpr std::uint32_t kShapes = 6;
inline constexpr std::uint32_t kTextures = 6;
inline constexpr std::uint32_t kEndToken = 1;

/// Pretraining set plus the ordered domain tasks. The base set holds every
/// domain class rendered in the neutral style under its domain's class name.
struct Benchmark {
  TaskDataset base;
  std::vector<TaskDataset> tasks;
  std::vector<Style> styles;  // per task
};

/// Deterministic in every field of `config`.
Benchmark gen_benchmark(const BenchmarkConfig& config);

/// Renders one (shape, texture) image in a given style. Exposed for tests.
Tensor render_sample(std::uint32_t shape, std::uint32_t texture, Style style, double strength,
                     std::uint32_t domain_seed, const BenchmarkConfig& config, Rng& rng);

/// k training samples per class (first k in order after a seeded shuffle);
/// classes with fewer samples keep all of them. Test split untouched.
TaskDataset few_shot_subset(const TaskDataset& d, std::uint32_t k, Rng& rng);

/// Applies a task-order permutation; `order` must be a permutation of 0..n-1.
std::vector<TaskDataset> reorder(const std::vector<TaskDataset>& tasks,
                                 const std::vector<std::size_t>& order);

// ---- persistence ("CPDS") -------------------------------------------------

std::vector<std::uint8_t> serialize_dataset(const TaskDataset& d);
TaskDataset deserialize_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const TaskDataset& d, const std::string& path);
TaskDataset load_dataset(const std::string& path);

}  // namespace chordprompt
