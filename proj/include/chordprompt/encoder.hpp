// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chordprompt/rng.hpp"
#include "chordprompt/tape.hpp"

namespace chordprompt {

/// Shape of the frozen dual encoder.
struct EncoderConfig {
  std::uint32_t layers = 4;
  std::uint32_t text_width = 64;
  std::uint32_t vision_width = 64;
  std::uint32_t heads = 4;
  std::uint32_t max_text_tokens = 8;
  std::uint32_t image_size = 16;
  std::uint32_t patch_size = 4;
  std::uint32_t channels = 3;
  std::uint32_t vocab_size = 64;
  std::uint32_t joint_width = 32;
  std::uint32_t mlp_hidden = 128;

  /// Desk-scale default used for every training run.
  static EncoderConfig mini() { return {}; }
  /// ViT-B/16-shaped dimensions; only used for parameter accounting.
  static EncoderConfig vit_b16();

  std::uint32_t patches_per_side() const { return image_size / patch_size; }
  std::uint32_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::uint32_t patch_dim() const { return patch_size * patch_size * channels; }

  /// Throws ContractViolation naming the first offending field.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

using TokenSeq = std::vector<std::uint32_t>;

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // weights stored [in, out]
  Tensor ln2_gain, ln2_bias;
  Tensor fc1, fc1_bias, fc2, fc2_bias;
};

/// Every tensor of the backbone. Frozen during continual learning.
struct BackboneWeights {
  EncoderConfig config;

  Tensor token_embedding;  // [vocab, d_t]
  Tensor text_position;    // [N_t, d_t]
  std::vector<LayerWeights> text_layers;
  Tensor text_final_gain, text_final_bias;
  Tensor text_proj;  // [d_t, d_joint]

  Tensor patch_weight;      // [patch_dim, d_v]
  Tensor patch_bias;        // [d_v]
  Tensor class_embedding;   // [1, d_v]
  Tensor vision_position;   // [N_b + 1, d_v]
  std::vector<LayerWeights> vision_layers;
  Tensor vision_final_gain, vision_final_bias;
  Tensor vision_proj;  // [d_v, d_joint]

  static BackboneWeights init(const EncoderConfig& config, Rng& rng);

  /// Visits (name, tensor) pairs in declaration order, which is also the
  /// checkpoint order.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  std::size_t parameter_count() const;
};

bool bit_equal(const BackboneWeights& a, const BackboneWeights& b);

// ---- tape-level forward ---------------------------------------------------

struct LayerVars {
  Var ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln2_gain, ln2_bias, fc1, fc1_bias, fc2, fc2_bias;
};

struct BackboneVars {
  EncoderConfig config;
  Var token_embedding, text_position;
  std::vector<LayerVars> text_layers;
  Var text_final_gain, text_final_bias, text_proj;
  Var patch_weight, patch_bias, class_embedding, vision_position;
  std::vector<LayerVars> vision_layers;
  Var vision_final_gain, vision_final_bias, vision_proj;
};

/// Registers the backbone on a tape, as parameters (ids from for_each) when
/// `trainable`, otherwise as constants.
BackboneVars bind_backbone(Tape& tape, const BackboneWeights& w, bool trainable);

/// Prompt tokens for one layer. `injected` is optional: when bound it must
/// match `direct` in shape and feeds only the value pathway.
struct LayerPrompt {
  Var direct;
  Var injected;
};

/// Rows entering self-attention for one prompted block: `query_key` is
/// [x_b, P] per sample and feeds queries, keys and the residual stream;
/// `value` is [x_b, P + P̂] and feeds only the value projection. With no
/// injected prompt both handles are the same node.
struct AttentionInputs {
  Var query_key;
  Var value;
  std::size_t seq = 0;
};

AttentionInputs inject_values(Var x, std::size_t batch, std::size_t seq, const LayerPrompt& prompt);

/// Attention weights observed during a forward pass, one [B, heads, T, T]
/// tensor per layer in execution order.
struct EncodeTrace {
  std::vector<Tensor> attention;
};

/// One pre-LN transformer block over `batch` sequences of `seq` rows.
///
/// With a prompt, the block sees [x_b, P] per sample. Queries, keys and the
/// residual stream use P; the value projection reads [x_b, P + P̂] instead.
/// The prompt rows are dropped from the output, so it has `seq` rows per
/// sample again.
Var transformer_block(const LayerVars& w, Var x, std::size_t batch, std::size_t seq,
                      std::size_t heads, const LayerPrompt* prompt, EncodeTrace* trace);

/// [n, d_joint] text features. Layer l (0-based) is prompted when l < prompts.size().
Var text_features(Tape& tape, const BackboneVars& w, std::span<const TokenSeq> texts,
                  std::span<const LayerPrompt> prompts, EncodeTrace* trace = nullptr);

/// [n, d_joint] image features; images are [H, W, C].
Var image_features(Tape& tape, const BackboneVars& w, std::span<const Tensor> images,
                   std::span<const LayerPrompt> prompts, EncodeTrace* trace = nullptr);

/// Flattened non-overlapping patches [N_b, patch*patch*C], row-major over the
/// patch grid; each row is ordered (dy, dx, channel).
Tensor patchify(const EncoderConfig& config, const Tensor& image);

// ---- value-level API ------------------------------------------------------

/// [N_b + 1, d_v]: class token then projected patches, positions added.
Tensor embed_patches(const BackboneWeights& w, const Tensor& image);

/// Prompt depth is prompts.size(); `injected` is empty or the same length.
Tensor text_encode(const BackboneWeights& w, const TokenSeq& tokens,
                   std::span<const Tensor> prompts, std::span<const Tensor> injected,
                   EncodeTrace* trace = nullptr);
Tensor image_encode(const BackboneWeights& w, const Tensor& image, std::span<const Tensor> prompts,
                    std::span<const Tensor> injected, EncodeTrace* trace = nullptr);

/// Batched variants returning [n, d_joint].
Tensor text_encode_batch(const BackboneWeights& w, std::span<const TokenSeq> texts,
                         std::span<const Tensor> prompts, std::span<const Tensor> injected);
Tensor image_encode_batch(const BackboneWeights& w, std::span<const Tensor> images,
                          std::span<const Tensor> prompts, std::span<const Tensor> injected);

Tensor base_text_encode(const BackboneWeights& w, const TokenSeq& tokens);
Tensor base_image_encode(const BackboneWeights& w, const Tensor& image);

// ---- checkpoint ("CPBB") --------------------------------------------------

inline constexpr std::uint32_t kBackboneVersion = 1;

std::vector<std::uint8_t> serialize_backbone(const BackboneWeights& w);
BackboneWeights deserialize_backbone(std::span<const std::uint8_t> bytes);
void save_backbone(const BackboneWeights& w, const std::string& path);
BackboneWeights load_backbone(const std::string& path);

}  // namespace chordprompt
