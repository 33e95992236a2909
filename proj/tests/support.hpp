// SPDX-License-Identifier: Apache-2.0
// Small fixtures shared by the unit tests.
#pragma once

#include <string>
#include <vector>

#include "chordprompt/encoder.hpp"
#include "chordprompt/rng.hpp"

namespace testing_support {

inline chordprompt::EncoderConfig tiny(std::uint32_t layers) {
  chordprompt::EncoderConfig c;
  c.layers = layers;
  c.text_width = 4;
  c.vision_width = 6;
  c.heads = 2;
  c.max_text_tokens = 5;
  c.image_size = 4;
  c.patch_size = 2;
  c.channels = 3;
  c.vocab_size = 9;
  c.joint_width = 3;
  c.mlp_hidden = 8;
  return c;
}

// Every tensor random, including biases and norm parameters, so no term of
// the forward pass can hide behind a zero.
inline chordprompt::BackboneWeights random_backbone(const chordprompt::EncoderConfig& c,
                                                    std::uint64_t seed) {
  chordprompt::Rng rng(seed);
  chordprompt::BackboneWeights w = chordprompt::BackboneWeights::init(c, rng);
  w.for_each([&](const std::string& name, chordprompt::Tensor& t) {
    const bool gain = name.find("gain") != std::string::npos;
    for (auto& v : t.data()) v = (gain ? 1.0 : 0.0) + rng.normal(0.0, 0.5);
  });
  return w;
}

inline std::vector<chordprompt::Tensor> rand_prompts(chordprompt::Rng& rng, std::size_t depth,
                                                     std::size_t len, std::size_t d) {
  std::vector<chordprompt::Tensor> out;
  for (std::size_t l = 0; l < depth; ++l) out.push_back(rng.normal_tensor({len, d}, 0.7));
  return out;
}

inline chordprompt::Tensor rand_image(chordprompt::Rng& rng, const chordprompt::EncoderConfig& c) {
  return rng.normal_tensor({c.image_size, c.image_size, c.channels}, 1.0);
}

}  // namespace testing_support
