// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chordprompt/encoder.hpp"
#include "chordprompt/hash.hpp"
#include "chordprompt/prompt.hpp"

namespace chordprompt {

/// Unit-norm task key in the joint embedding space, [d_joint].
struct Prototype {
  Tensor vector;
};

/// Identifies the shapes every entry of a pool must share.
Digest pool_config_hash(const EncoderConfig& config, std::size_t depth, std::size_t length);

/// Normalised sum of the rows of `embeddings` [n, d], summed in row order.
/// Zero rows -> ContractViolation; zero-norm sum -> DegenerateInput.
Prototype prototype_from_embeddings(const Tensor& embeddings);

/// Key of a task from its class names under the prompt-free text encoder.
///
/// Class embeddings are summed in lexicographic order of their token
/// sequences, so the result does not depend on how the list is ordered.
Prototype extract_prototype(const BackboneWeights& w, std::span<const TokenSeq> class_names);

struct PoolEntry {
  std::string task_id;
  Prototype key;
  PromptSet prompts;
  AlignerParams aligner;
  std::uint32_t creation_step = 0;
  Digest config_hash{};
};

/// Ordered task store. Every entry carries the pool's config hash.
class PromptPool {
 public:
  PromptPool() = default;
  explicit PromptPool(const Digest& config_hash) : hash_(config_hash) {}

  const Digest& config_hash() const noexcept { return hash_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const PoolEntry& operator[](std::size_t i) const { return entries_.at(i); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  /// Index of the entry with this id, if any.
  std::optional<std::size_t> find(const std::string& task_id) const;
  /// Copy holding only the first n entries (pool as of training step n).
  PromptPool prefix(std::size_t n) const;

 private:
  friend void pool_add(PromptPool&, PoolEntry);
  friend PromptPool deserialize_pool(std::span<const std::uint8_t>);
  Digest hash_{};
  std::vector<PoolEntry> entries_;
};

/// Appends `entry`, or replaces the entry with the same task_id in place.
/// Throws ContractViolation on a config-hash mismatch, a non-unit key, or
/// shapes differing from the entries already stored.
void pool_add(PromptPool& pool, PoolEntry entry);

struct PoolMatch {
  std::size_t index = 0;
  double similarity = 0.0;
};

/// Cosine similarity of `query` against every key; the best entry if its
/// similarity reaches gamma, nullopt (fall back to the base model) otherwise.
/// Ties go to the lowest index. gamma must lie in [-1, 1].
std::optional<PoolMatch> pool_query(const PromptPool& pool, const Prototype& query, double gamma);

double cosine(std::span<const double> a, std::span<const double> b);

// ---- persistence ("CPP1") -------------------------------------------------
//
// magic "CPP1", version u32, config hash (32 bytes), entry count u32, then per
// entry: task_id (u16 length + bytes), creation step u32, key [d], text
// prompts [D,p,d_t], visual prompts [D,p,d_v], v2t [D,d_t,d_v], t2v
// [D,d_v,d_t]; each tensor is rank u32, dims u32..., f64 payload. A SHA-256
// of all preceding bytes closes the file.

inline constexpr std::uint32_t kPoolVersion = 1;

std::vector<std::uint8_t> serialize_pool(const PromptPool& pool);
/// Throws FormatError (with offset) on any defect; never returns a partial pool.
PromptPool deserialize_pool(std::span<const std::uint8_t> bytes);
void pool_save(const PromptPool& pool, const std::string& path);
PromptPool pool_load(const std::string& path);

}  // namespace chordprompt
