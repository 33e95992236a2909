// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chordprompt/encoder.hpp"
#include "chordprompt/optim.hpp"

namespace chordprompt {

/// Learnable per-layer prompt tokens for both encoders of one task.
/// Layer l holds text[l] [p, d_t] and visual[l] [p, d_v]; both modalities
/// share one prompt length p.
struct PromptSet {
  std::vector<Tensor> text;
  std::vector<Tensor> visual;

  std::size_t depth() const noexcept { return text.size(); }
  std::size_t length() const { return text.empty() ? 0 : text[0].rows(); }

  /// Normal(0, stddev) initialisation.
  static PromptSet init(std::size_t depth, std::size_t length, std::size_t text_width,
                        std::size_t vision_width, Rng& rng, double stddev = 0.02);

  /// Throws ContractViolation on mismatched lengths/widths or non-finite entries.
  void validate(std::size_t text_width, std::size_t vision_width) const;
};

/// Per-layer cross-modal projections: v2t[l] is [d_t, d_v], t2v[l] is [d_v, d_t].
struct AlignerParams {
  std::vector<Tensor> v2t;
  std::vector<Tensor> t2v;

  std::size_t depth() const noexcept { return v2t.size(); }

  static AlignerParams zeros(std::size_t depth, std::size_t text_width, std::size_t vision_width);
  void validate(std::size_t text_width, std::size_t vision_width) const;
};

/// Visual prompt mapped into text width: V · A_v2t(l)ᵀ, [p, d_t].
Tensor project_v2t(const AlignerParams& aligner, const Tensor& visual, std::size_t layer);
/// Text prompt mapped into vision width: T · A_t2v(l)ᵀ, [p, d_v].
Tensor project_t2v(const AlignerParams& aligner, const Tensor& text, std::size_t layer);

/// Projected prompts for every layer: text[l] = project_v2t(V_l), visual[l] = project_t2v(T_l).
struct InjectedPrompts {
  std::vector<Tensor> text;
  std::vector<Tensor> visual;
};
InjectedPrompts cross_project(const PromptSet& prompts, const AlignerParams& aligner);

/// Trainable parameters of one task:
///   D·p·d_t + D·p·d_v + (D if per-layer else 1)·2·d_t·d_v
std::uint64_t count_trainable(const EncoderConfig& config, std::uint64_t depth,
                              std::uint64_t length, bool per_layer_aligner);

// ---- tape binding -----------------------------------------------------------

/// Parameter ids: "prompt.text.<l>", "prompt.visual.<l>", "aligner.v2t.<l>", "aligner.t2v.<l>".
ParamMap to_param_map(const PromptSet& prompts, const AlignerParams& aligner);
void from_param_map(const ParamMap& params, PromptSet& prompts, AlignerParams& aligner);

/// Per-layer prompts for both encoders with their cross-modal injections.
struct CrossModalPrompts {
  std::vector<LayerPrompt> text;
  std::vector<LayerPrompt> visual;
};

/// Builds T̂_l = V_l·A_v2tᵀ and V̂_l = T_l·A_t2vᵀ on the tape from bound
/// parameters (ids as in to_param_map).
CrossModalPrompts cross_modal_prompts(const std::map<std::string, Var>& vars, std::size_t depth);

}  // namespace chordprompt
