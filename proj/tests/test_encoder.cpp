// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "chordprompt/binary_io.hpp"
#include "chordprompt/encoder.hpp"
#include "oracle.hpp"
#include "support.hpp"

namespace cp = chordprompt;
using cp::Tensor;

using testing_support::rand_image;
using testing_support::rand_prompts;
using testing_support::random_backbone;
using testing_support::tiny;

TEST(EncoderConfigTest, Validation) {
  EXPECT_NO_THROW(cp::EncoderConfig::mini().validate());
  EXPECT_NO_THROW(cp::EncoderConfig::vit_b16().validate());
  auto c = cp::EncoderConfig::mini();
  c.heads = 3;
  EXPECT_THROW(c.validate(), cp::ContractViolation);
  c = cp::EncoderConfig::mini();
  c.patch_size = 5;
  EXPECT_THROW(c.validate(), cp::ContractViolation);
  EXPECT_EQ(cp::EncoderConfig::mini().num_patches(), 16u);
  EXPECT_EQ(cp::EncoderConfig::vit_b16().num_patches(), 196u);
}

TEST(EmbedPatchesTest, RowCountMini) {
  cp::Rng rng(1);
  const auto c = cp::EncoderConfig::mini();
  auto w = cp::BackboneWeights::init(c, rng);
  const Tensor e = cp::embed_patches(w, rand_image(rng, c));
  EXPECT_EQ(e.shape(), (cp::Shape{17, 64}));
}

TEST(EmbedPatchesTest, ZeroImageGivesBias) {
  const auto c = tiny(1);
  auto w = random_backbone(c, 3);
  for (auto& v : w.vision_position.data()) v = 0.0;
  const Tensor e = cp::embed_patches(w, Tensor({4, 4, 3}, 0.0));
  for (std::size_t k = 0; k < c.vision_width; ++k) EXPECT_EQ(e(0, k), w.class_embedding[k]);
  for (std::size_t r = 1; r < e.rows(); ++r)
    for (std::size_t k = 0; k < c.vision_width; ++k) EXPECT_EQ(e(r, k), w.patch_bias[k]);
}

TEST(EmbedPatchesTest, MatchesFlatPatchOracle) {
  const auto c = tiny(1);
  auto w = random_backbone(c, 4);
  cp::Rng rng(5);
  const Tensor img = rand_image(rng, c);
  const Tensor e = cp::embed_patches(w, img);
  const auto ref = oracle::embed_patches(w, img);
  ASSERT_EQ(e.rows(), ref.size());
  for (std::size_t r = 0; r < ref.size(); ++r)
    for (std::size_t k = 0; k < ref[r].size(); ++k) EXPECT_NEAR(e(r, k), ref[r][k], 1e-12);
}

TEST(EmbedPatchesTest, WrongSizeRejected) {
  const auto c = tiny(1);
  auto w = random_backbone(c, 4);
  EXPECT_THROW(cp::embed_patches(w, Tensor({5, 4, 3})), cp::ContractViolation);
}

TEST(TextEncodeTest, DepthZeroIsBase) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 10);
  const cp::TokenSeq t{1, 4, 2};
  EXPECT_TRUE(cp::bit_equal(cp::text_encode(w, t, {}, {}), cp::base_text_encode(w, t)));
  EXPECT_TRUE(cp::bit_equal(cp::base_text_encode(w, t), cp::base_text_encode(w, t)));
}

TEST(TextEncodeTest, ZeroInjectionMatchesDirectOnly) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 11);
  cp::Rng rng(12);
  const auto p = rand_prompts(rng, 2, 2, c.text_width);
  const std::vector<Tensor> zero(2, Tensor({2, c.text_width}, 0.0));
  const cp::TokenSeq t{3, 0, 8, 5};
  EXPECT_LE(cp::max_abs_diff(cp::text_encode(w, t, p, zero), cp::text_encode(w, t, p, {})), 1e-12);
}

TEST(TextEncodeTest, SingleLayerMatchesOracle) {
  const auto c = tiny(1);
  auto w = random_backbone(c, 13);
  cp::Rng rng(14);
  const auto p = rand_prompts(rng, 1, 2, c.text_width);
  const auto pi = rand_prompts(rng, 1, 2, c.text_width);
  const cp::TokenSeq t{7, 2, 2};
  EXPECT_LE(oracle::max_diff(oracle::text_encode(w, t, p, pi), cp::text_encode(w, t, p, pi)), 1e-12);
  EXPECT_LE(oracle::max_diff(oracle::text_encode(w, t, {}, {}), cp::base_text_encode(w, t)), 1e-12);
}

TEST(TextEncodeTest, PartialDepthMatchesOracle) {
  const auto c = tiny(3);
  auto w = random_backbone(c, 15);
  cp::Rng rng(16);
  const auto p = rand_prompts(rng, 2, 3, c.text_width);
  const auto pi = rand_prompts(rng, 2, 3, c.text_width);
  const cp::TokenSeq t{1, 2, 3, 4, 5};
  EXPECT_LE(oracle::max_diff(oracle::text_encode(w, t, p, pi), cp::text_encode(w, t, p, pi)), 1e-12);
}

TEST(TextEncodeTest, ShapeErrors) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 17);
  cp::Rng rng(18);
  const auto p = rand_prompts(rng, 2, 2, c.text_width);
  const auto bad = rand_prompts(rng, 2, 3, c.text_width);
  const cp::TokenSeq t{1, 2};
  EXPECT_THROW(cp::text_encode(w, t, p, bad), cp::ContractViolation);
  EXPECT_THROW(cp::text_encode(w, t, rand_prompts(rng, 3, 2, c.text_width), {}),
               cp::ContractViolation);
  EXPECT_THROW(cp::text_encode(w, cp::TokenSeq{1, 2, 3, 4, 5, 6}, {}, {}), cp::ContractViolation);
  EXPECT_THROW(cp::text_encode(w, cp::TokenSeq{9}, {}, {}), cp::ContractViolation);
}

TEST(ImageEncodeTest, DepthZeroIsBase) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 20);
  cp::Rng rng(21);
  const Tensor img = rand_image(rng, c);
  EXPECT_TRUE(cp::bit_equal(cp::image_encode(w, img, {}, {}), cp::base_image_encode(w, img)));
}

TEST(ImageEncodeTest, ZeroInjectionMatchesDirectOnly) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 22);
  cp::Rng rng(23);
  const Tensor img = rand_image(rng, c);
  const auto p = rand_prompts(rng, 2, 2, c.vision_width);
  const std::vector<Tensor> zero(2, Tensor({2, c.vision_width}, 0.0));
  EXPECT_LE(cp::max_abs_diff(cp::image_encode(w, img, p, zero), cp::image_encode(w, img, p, {})),
            1e-12);
}

TEST(ImageEncodeTest, SingleLayerMatchesOracle) {
  const auto c = tiny(1);
  auto w = random_backbone(c, 24);
  cp::Rng rng(25);
  const Tensor img = rand_image(rng, c);
  const auto p = rand_prompts(rng, 1, 2, c.vision_width);
  const auto pi = rand_prompts(rng, 1, 2, c.vision_width);
  EXPECT_LE(oracle::max_diff(oracle::image_encode(w, img, p, pi), cp::image_encode(w, img, p, pi)),
            1e-12);
}

TEST(ImageEncodeTest, TwoLayerMatchesOracle) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 26);
  cp::Rng rng(27);
  const Tensor img = rand_image(rng, c);
  const auto p = rand_prompts(rng, 1, 4, c.vision_width);
  const auto pi = rand_prompts(rng, 1, 4, c.vision_width);
  EXPECT_LE(oracle::max_diff(oracle::image_encode(w, img, p, pi), cp::image_encode(w, img, p, pi)),
            1e-12);
}

TEST(AttentionTraceTest, RowStochasticAndInjectionInvariant) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 30);
  cp::Rng rng(31);
  const Tensor img = rand_image(rng, c);
  const auto p = rand_prompts(rng, 2, 2, c.vision_width);
  const auto pi1 = rand_prompts(rng, 2, 2, c.vision_width);
  const auto pi2 = rand_prompts(rng, 2, 2, c.vision_width);
  cp::EncodeTrace t1, t2;
  const Tensor y1 = cp::image_encode(w, img, p, pi1, &t1);
  const Tensor y2 = cp::image_encode(w, img, p, pi2, &t2);
  ASSERT_EQ(t1.attention.size(), 2u);
  EXPECT_GT(cp::max_abs_diff(y1, y2), 1e-6);
  // Layer 0 sees identical queries and keys; the layer-1 inputs already
  // differ through the values, so only layer 0 is comparable bit-for-bit.
  EXPECT_TRUE(cp::bit_equal(t1.attention[0], t2.attention[0]));
  for (const auto& a : t1.attention) {
    const std::size_t T = a.dim(3);
    for (std::size_t r = 0; r < a.size() / T; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < T; ++k) s += a[r * T + k];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(AttentionTraceTest, PerLayerInjectionInvariance) {
  // With a single prompted layer every attention map is computed before any
  // injected value reaches a query or key, in both encoders.
  const auto c = tiny(1);
  auto w = random_backbone(c, 32);
  cp::Rng rng(33);
  const auto p = rand_prompts(rng, 1, 3, c.text_width);
  cp::EncodeTrace a, b;
  cp::text_encode(w, {1, 2, 3}, p, rand_prompts(rng, 1, 3, c.text_width), &a);
  cp::text_encode(w, {1, 2, 3}, p, rand_prompts(rng, 1, 3, c.text_width), &b);
  ASSERT_EQ(a.attention.size(), 1u);
  EXPECT_TRUE(cp::bit_equal(a.attention[0], b.attention[0]));
}

TEST(BatchTest, PermutationAndBatchInvariance) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 40);
  cp::Rng rng(41);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(rand_image(rng, c));
  const auto p = rand_prompts(rng, 2, 2, c.vision_width);
  const auto pi = rand_prompts(rng, 2, 2, c.vision_width);
  const Tensor all = cp::image_encode_batch(w, imgs, p, pi);
  std::vector<Tensor> rev(imgs.rbegin(), imgs.rend());
  const Tensor r = cp::image_encode_batch(w, rev, p, pi);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const Tensor one = cp::image_encode(w, imgs[i], p, pi);
    for (std::size_t k = 0; k < c.joint_width; ++k) {
      EXPECT_EQ(all(i, k), one[k]);
      EXPECT_EQ(r(imgs.size() - 1 - i, k), one[k]);
    }
  }
  // Mixed text lengths are grouped internally and returned in input order.
  const std::vector<cp::TokenSeq> texts{{1, 2, 3}, {4}, {5, 6}, {7, 8, 1}};
  const Tensor tb = cp::text_encode_batch(w, texts, {}, {});
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const Tensor one = cp::base_text_encode(w, texts[i]);
    for (std::size_t k = 0; k < c.joint_width; ++k) EXPECT_EQ(tb(i, k), one[k]);
  }
}

TEST(CheckpointTest, RoundTripBitExact) {
  const auto c = tiny(2);
  auto w = random_backbone(c, 50);
  const auto bytes = cp::serialize_backbone(w);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CPBB");
  auto back = cp::deserialize_backbone(bytes);
  EXPECT_TRUE(cp::bit_equal(w, back));
  EXPECT_EQ(cp::serialize_backbone(back), bytes);
  EXPECT_EQ(back.parameter_count(), w.parameter_count());
}

TEST(CheckpointTest, CorruptionFailsClosed) {
  const auto c = tiny(1);
  auto bytes = cp::serialize_backbone(random_backbone(c, 51));
  auto bad = bytes;
  bad[1] ^= 0xFF;
  EXPECT_THROW(cp::deserialize_backbone(bad), cp::FormatError);
  bad = bytes;
  bad[4] = 9;  // version
  EXPECT_THROW(cp::deserialize_backbone(bad), cp::FormatError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(cp::deserialize_backbone(bad), cp::FormatError);
  bad = bytes;
  bad[8] = 0xFF;  // layer count
  bad[9] = 0xFF;
  EXPECT_THROW(cp::deserialize_backbone(bad), cp::FormatError);
  try {
    bad = bytes;
    bad.resize(10);
    cp::deserialize_backbone(bad);
    FAIL();
  } catch (const cp::FormatError& e) {
    EXPECT_GE(e.offset(), 8u);
  }
}
