// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/prompt.hpp"

#include "kernels.hpp"

namespace chordprompt {

PromptSet PromptSet::init(std::size_t depth, std::size_t length, std::size_t text_width,
                          std::size_t vision_width, Rng& rng, double stddev) {
  CP_REQUIRE(depth == 0 || length > 0, "prompt length must be positive");
  PromptSet p;
  for (std::size_t l = 0; l < depth; ++l) {
    p.text.push_back(rng.normal_tensor({length, text_width}, stddev));
    p.visual.push_back(rng.normal_tensor({length, vision_width}, stddev));
  }
  return p;
}

void PromptSet::validate(std::size_t text_width, std::size_t vision_width) const {
  CP_REQUIRE(text.size() == visual.size(), "prompt set: text depth " + std::to_string(text.size()) +
                                               " != visual depth " + std::to_string(visual.size()));
  const std::size_t p = length();
  for (std::size_t l = 0; l < text.size(); ++l) {
    const Shape ts{p, text_width}, vs{p, vision_width};
    CP_REQUIRE(text[l].shape() == ts, "prompt set: text prompt " + std::to_string(l) + " has shape " +
                                          shape_str(text[l].shape()) + ", expected " + shape_str(ts));
    CP_REQUIRE(visual[l].shape() == vs, "prompt set: visual prompt " + std::to_string(l) +
                                            " has shape " + shape_str(visual[l].shape()) +
                                            ", expected " + shape_str(vs));
    CP_REQUIRE(text[l].all_finite() && visual[l].all_finite(), "prompt set: non-finite entry");
  }
}

AlignerParams AlignerParams::zeros(std::size_t depth, std::size_t text_width,
                                   std::size_t vision_width) {
  AlignerParams a;
  for (std::size_t l = 0; l < depth; ++l) {
    a.v2t.emplace_back(Shape{text_width, vision_width}, 0.0);
    a.t2v.emplace_back(Shape{vision_width, text_width}, 0.0);
  }
  return a;
}

void AlignerParams::validate(std::size_t text_width, std::size_t vision_width) const {
  CP_REQUIRE(v2t.size() == t2v.size(), "aligner: direction depths differ");
  for (std::size_t l = 0; l < v2t.size(); ++l) {
    CP_REQUIRE(v2t[l].shape() == (Shape{text_width, vision_width}),
               "aligner: v2t[" + std::to_string(l) + "] has shape " + shape_str(v2t[l].shape()));
    CP_REQUIRE(t2v[l].shape() == (Shape{vision_width, text_width}),
               "aligner: t2v[" + std::to_string(l) + "] has shape " + shape_str(t2v[l].shape()));
    CP_REQUIRE(v2t[l].all_finite() && t2v[l].all_finite(), "aligner: non-finite entry");
  }
}

namespace {

Tensor project(const std::vector<Tensor>& mats, const Tensor& prompt, std::size_t layer,
               const char* name) {
  CP_REQUIRE(layer < mats.size(), std::string(name) + ": layer " + std::to_string(layer) +
                                      " outside prompt depth " + std::to_string(mats.size()));
  const Tensor& a = mats[layer];
  CP_REQUIRE(prompt.rank() == 2 && prompt.cols() == a.cols(),
             std::string(name) + ": prompt shape " + shape_str(prompt.shape()) +
                 " incompatible with matrix " + shape_str(a.shape()));
  Tensor out({prompt.rows(), a.rows()});
  detail::gemm_nt(prompt.ptr(), a.ptr(), out.ptr(), prompt.rows(), a.cols(), a.rows(), false);
  return out;
}

}  // namespace

Tensor project_v2t(const AlignerParams& aligner, const Tensor& visual, std::size_t layer) {
  return project(aligner.v2t, visual, layer, "project_v2t");
}

Tensor project_t2v(const AlignerParams& aligner, const Tensor& text, std::size_t layer) {
  return project(aligner.t2v, text, layer, "project_t2v");
}

InjectedPrompts cross_project(const PromptSet& prompts, const AlignerParams& aligner) {
  CP_REQUIRE(prompts.depth() == aligner.depth(), "cross_project: prompt depth " +
                                                     std::to_string(prompts.depth()) +
                                                     " != aligner depth " +
                                                     std::to_string(aligner.depth()));
  InjectedPrompts out;
  for (std::size_t l = 0; l < prompts.depth(); ++l) {
    out.text.push_back(project_v2t(aligner, prompts.visual[l], l));
    out.visual.push_back(project_t2v(aligner, prompts.text[l], l));
  }
  return out;
}

std::uint64_t count_trainable(const EncoderConfig& c, std::uint64_t depth, std::uint64_t length,
                              bool per_layer_aligner) {
  if (depth == 0) return 0;
  const std::uint64_t dt = c.text_width, dv = c.vision_width;
  const std::uint64_t aligners = per_layer_aligner ? depth : 1;
  return depth * length * dt + depth * length * dv + aligners * 2 * dt * dv;
}

namespace {

std::string key(const char* kind, std::size_t l) { return std::string(kind) + "." + std::to_string(l); }

}  // namespace

ParamMap to_param_map(const PromptSet& prompts, const AlignerParams& aligner) {
  ParamMap m;
  for (std::size_t l = 0; l < prompts.depth(); ++l) {
    m.emplace(key("prompt.text", l), prompts.text[l]);
    m.emplace(key("prompt.visual", l), prompts.visual[l]);
  }
  for (std::size_t l = 0; l < aligner.depth(); ++l) {
    m.emplace(key("aligner.v2t", l), aligner.v2t[l]);
    m.emplace(key("aligner.t2v", l), aligner.t2v[l]);
  }
  return m;
}

void from_param_map(const ParamMap& params, PromptSet& prompts, AlignerParams& aligner) {
  for (std::size_t l = 0; l < prompts.depth(); ++l) {
    prompts.text[l] = params.at(key("prompt.text", l));
    prompts.visual[l] = params.at(key("prompt.visual", l));
  }
  for (std::size_t l = 0; l < aligner.depth(); ++l) {
    aligner.v2t[l] = params.at(key("aligner.v2t", l));
    aligner.t2v[l] = params.at(key("aligner.t2v", l));
  }
}

CrossModalPrompts cross_modal_prompts(const std::map<std::string, Var>& vars, std::size_t depth) {
  CrossModalPrompts out;
  for (std::size_t l = 0; l < depth; ++l) {
    const Var t = vars.at(key("prompt.text", l));
    const Var v = vars.at(key("prompt.visual", l));
    out.text.push_back({t, matmul_nt(v, vars.at(key("aligner.v2t", l)))});
    out.visual.push_back({v, matmul_nt(t, vars.at(key("aligner.t2v", l)))});
  }
  return out;
}

}  // namespace chordprompt
