// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "chordprompt/binary_io.hpp"
#include "chordprompt/pool.hpp"
#include "support.hpp"

namespace cp = chordprompt;
using cp::Tensor;

namespace {

Tensor unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  const std::size_t d = v.size();
  return Tensor({d}, std::move(v));
}

struct PoolFixture {
  cp::EncoderConfig config = testing_support::tiny(2);
  std::size_t depth = 2, length = 2;
  cp::Digest hash = cp::pool_config_hash(config, depth, length);

  cp::PoolEntry entry(const std::string& id, Tensor key, cp::Rng& rng) const {
    cp::PoolEntry e;
    e.task_id = id;
    e.key = {std::move(key)};
    e.prompts = cp::PromptSet::init(depth, length, config.text_width, config.vision_width, rng);
    e.aligner = cp::AlignerParams::zeros(depth, config.text_width, config.vision_width);
    for (auto& t : e.aligner.v2t) t = rng.normal_tensor(t.shape(), 0.1);
    e.config_hash = hash;
    return e;
  }

  cp::PromptPool three(std::uint64_t seed) const {
    cp::Rng rng(seed);
    cp::PromptPool p(hash);
    for (int i = 0; i < 3; ++i) {
      auto e = entry("task" + std::to_string(i), unit({rng.normal(0, 1), rng.normal(0, 1), 1.0}), rng);
      e.creation_step = static_cast<std::uint32_t>(i + 1);
      cp::pool_add(p, e);
    }
    return p;
  }
};

bool same_entry(const cp::PoolEntry& a, const cp::PoolEntry& b) {
  if (a.task_id != b.task_id || a.creation_step != b.creation_step ||
      a.config_hash != b.config_hash || !cp::bit_equal(a.key.vector, b.key.vector))
    return false;
  if (a.prompts.depth() != b.prompts.depth()) return false;
  for (std::size_t l = 0; l < a.prompts.depth(); ++l)
    if (!cp::bit_equal(a.prompts.text[l], b.prompts.text[l]) ||
        !cp::bit_equal(a.prompts.visual[l], b.prompts.visual[l]) ||
        !cp::bit_equal(a.aligner.v2t[l], b.aligner.v2t[l]) ||
        !cp::bit_equal(a.aligner.t2v[l], b.aligner.t2v[l]))
      return false;
  return true;
}

}  // namespace

TEST(PrototypeTest, SingleClassIsNormalisedEmbedding) {
  const auto c = testing_support::tiny(2);
  const auto w = testing_support::random_backbone(c, 1);
  const std::vector<cp::TokenSeq> names{{3, 4, 1}};
  const auto p = cp::extract_prototype(w, names);
  const Tensor y = cp::base_text_encode(w, names[0]);
  double n = 0.0;
  for (double v : y.data()) n += v * v;
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(p.vector[i], y[i] / std::sqrt(n), 1e-15);
}

TEST(PrototypeTest, HandSum) {
  const auto p = cp::prototype_from_embeddings(Tensor({2, 2}, {1, 0, 0, 1}));
  EXPECT_NEAR(p.vector[0], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(p.vector[1], 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(PrototypeTest, Errors) {
  EXPECT_THROW(cp::prototype_from_embeddings(Tensor({0, 3}, 0.0)), cp::ContractViolation);
  EXPECT_THROW(cp::prototype_from_embeddings(Tensor({2, 2}, {1, -2, -1, 2})), cp::DegenerateInput);
  const auto w = testing_support::random_backbone(testing_support::tiny(1), 2);
  EXPECT_THROW(cp::extract_prototype(w, std::vector<cp::TokenSeq>{}), cp::ContractViolation);
}

TEST(PrototypeTest, PermutationInvariantAndUnitNorm) {
  const auto c = testing_support::tiny(2);
  const auto w = testing_support::random_backbone(c, 3);
  std::vector<cp::TokenSeq> names{{2, 3, 1}, {4, 5, 1}, {6, 1}, {7, 8, 2, 1}, {3, 1}};
  const auto ref = cp::extract_prototype(w, names);
  double n = 0.0;
  for (double v : ref.vector.data()) n += v * v;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
  cp::Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto perm = rng.permutation(names.size());
    std::vector<cp::TokenSeq> shuffled;
    for (auto i : perm) shuffled.push_back(names[i]);
    EXPECT_TRUE(cp::bit_equal(cp::extract_prototype(w, shuffled).vector, ref.vector));
  }
}

TEST(PoolAddTest, Examples) {
  PoolFixture fx;
  cp::Rng rng(5);
  cp::PromptPool p(fx.hash);
  cp::pool_add(p, fx.entry("a", unit({1, 0, 0}), rng));
  EXPECT_EQ(p.size(), 1u);
  auto second = fx.entry("a", unit({0, 1, 0}), rng);
  cp::pool_add(p, second);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_TRUE(same_entry(p[0], second));
  cp::pool_add(p, fx.entry("b", unit({0, 0, 1}), rng));
  cp::pool_add(p, fx.entry("c", unit({1, 1, 0}), rng));
  std::vector<std::string> ids;
  for (const auto& e : p) ids.push_back(e.task_id);
  EXPECT_EQ(ids, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(p.find("b"), std::optional<std::size_t>(1));
  EXPECT_FALSE(p.find("z").has_value());
  EXPECT_EQ(p.prefix(2).size(), 2u);
  EXPECT_EQ(p.prefix(0).size(), 0u);
}

TEST(PoolAddTest, Rejections) {
  PoolFixture fx;
  cp::Rng rng(6);
  cp::PromptPool p(fx.hash);
  auto bad_hash = fx.entry("a", unit({1, 0, 0}), rng);
  bad_hash.config_hash[0] ^= 1;
  EXPECT_THROW(cp::pool_add(p, bad_hash), cp::ContractViolation);
  EXPECT_THROW(cp::pool_add(p, fx.entry("a", Tensor({3}, {1, 1, 0}), rng)), cp::ContractViolation);
  EXPECT_THROW(cp::pool_add(p, fx.entry("", unit({1, 0, 0}), rng)), cp::ContractViolation);
  cp::pool_add(p, fx.entry("a", unit({1, 0, 0}), rng));
  PoolFixture longer;
  longer.length = 3;
  auto wrong_shape = longer.entry("b", unit({0, 1, 0}), rng);
  wrong_shape.config_hash = fx.hash;
  EXPECT_THROW(cp::pool_add(p, wrong_shape), cp::ContractViolation);
  EXPECT_EQ(p.size(), 1u);
}

TEST(PoolQueryTest, Examples) {
  PoolFixture fx;
  cp::Rng rng(7);
  cp::PromptPool p(fx.hash);
  EXPECT_FALSE(cp::pool_query(p, {unit({1, 0, 0})}, 0.8).has_value());
  cp::pool_add(p, fx.entry("x", unit({1, 0, 0}), rng));
  cp::pool_add(p, fx.entry("y", unit({0, 1, 0}), rng));
  auto m = cp::pool_query(p, {unit({0, 1, 0})}, 0.8);
  ASSERT_TRUE(m.has_value());
  EXPECT_EQ(m->index, 1u);
  EXPECT_EQ(m->similarity, 1.0);
  m = cp::pool_query(p, {unit({0.9, 0.1, 0})}, 0.8);
  ASSERT_TRUE(m.has_value());
  EXPECT_EQ(m->index, 0u);
  EXPECT_NEAR(m->similarity, 0.9 / std::sqrt(0.82), 1e-12);
  EXPECT_NEAR(m->similarity, 0.9939, 1e-4);
  EXPECT_FALSE(cp::pool_query(p, {unit({0, 0, 1})}, 0.5).has_value());
  EXPECT_THROW(cp::pool_query(p, {unit({0, 0, 1})}, 1.5), cp::ContractViolation);
  EXPECT_THROW(cp::pool_query(p, {unit({0, 0, 1})}, -1.01), cp::ContractViolation);
}

// Brute-force argmax-with-threshold, written independently of pool_query.
TEST(PoolQueryTest, MatchesBruteForceOracle) {
  PoolFixture fx;
  cp::Rng rng(8);
  // A small palette of directions makes exact ties between entries common.
  std::vector<Tensor> palette;
  for (int i = 0; i < 5; ++i)
    palette.push_back(unit({rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1)}));
  std::size_t ties = 0, fallbacks = 0, boundary = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    cp::PromptPool p(fx.hash);
    const std::size_t n = rng.below(7);
    std::vector<Tensor> keys;
    for (std::size_t i = 0; i < n; ++i) {
      keys.push_back(rng.below(2) ? palette[rng.below(palette.size())]
                                  : unit({rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1)}));
      cp::pool_add(p, fx.entry("t" + std::to_string(i), keys.back(), rng));
    }
    const Tensor q = rng.below(3) == 0 && n > 0 ? keys[rng.below(n)]
                                                : unit({rng.normal(0, 1), rng.normal(0, 1),
                                                        rng.normal(0, 1)});
    std::vector<double> sims;
    for (const auto& k : keys) {
      double d = 0, a = 0, b = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        d += q[j] * k[j];
        a += q[j] * q[j];
        b += k[j] * k[j];
      }
      sims.push_back(d / (std::sqrt(a) * std::sqrt(b)));
    }
    double gamma = rng.uniform() * 2.0 - 1.0;
    if (n > 0 && rng.below(4) == 0) gamma = std::clamp(sims[rng.below(n)], -1.0, 1.0);

    std::optional<std::size_t> want;
    for (std::size_t i = 0; i < n; ++i) {
      bool best = true;
      for (std::size_t j = 0; j < n; ++j)
        if (sims[j] > sims[i] || (sims[j] == sims[i] && j < i)) best = false;
      if (best && sims[i] >= gamma) want = i;
    }
    const auto got = cp::pool_query(p, {q}, gamma);
    ASSERT_EQ(got.has_value(), want.has_value()) << "instance " << inst;
    if (got) {
      ASSERT_EQ(got->index, *want) << "instance " << inst;
      ASSERT_EQ(got->similarity, sims[*want]);
      if (std::count(sims.begin(), sims.end(), sims[*want]) > 1) ++ties;
      if (got->similarity == gamma) ++boundary;
    } else {
      ++fallbacks;
    }
  }
  EXPECT_GT(ties, 20u);
  EXPECT_GT(fallbacks, 20u);
  EXPECT_GT(boundary, 5u);
}

TEST(PoolIoTest, RoundTrips) {
  PoolFixture fx;
  const cp::PromptPool empty(fx.hash);
  const auto eb = cp::serialize_pool(empty);
  const auto e2 = cp::deserialize_pool(eb);
  EXPECT_EQ(e2.size(), 0u);
  EXPECT_EQ(e2.config_hash(), fx.hash);
  EXPECT_EQ(cp::serialize_pool(e2), eb);

  const auto p = fx.three(9);
  const auto bytes = cp::serialize_pool(p);
  const auto q = cp::deserialize_pool(bytes);
  ASSERT_EQ(q.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(same_entry(p[i], q[i]));
  EXPECT_EQ(cp::serialize_pool(q), bytes);

  const auto path = (std::filesystem::temp_directory_path() / "cp_pool_rt.cpp1").string();
  cp::pool_save(p, path);
  EXPECT_EQ(cp::read_file(path), bytes);
  EXPECT_EQ(cp::serialize_pool(cp::pool_load(path)), bytes);
  std::filesystem::remove(path);
}

TEST(PoolIoTest, DepthZeroRoundTrip) {
  PoolFixture fx;
  fx.depth = 0;
  fx.hash = cp::pool_config_hash(fx.config, 0, fx.length);
  cp::Rng rng(10);
  cp::PromptPool p(fx.hash);
  cp::pool_add(p, fx.entry("a", unit({1, 2, 3}), rng));
  const auto bytes = cp::serialize_pool(p);
  EXPECT_EQ(cp::serialize_pool(cp::deserialize_pool(bytes)), bytes);
}

TEST(PoolIoTest, CorruptionFailsClosed) {
  PoolFixture fx;
  const auto bytes = cp::serialize_pool(fx.three(11));
  // every header byte (magic, version, hash, count) and a sample of the body
  for (std::size_t i = 0; i < bytes.size(); i += (i < 44 ? 1 : 37)) {
    auto bad = bytes;
    bad[i] ^= 0x5A;
    EXPECT_THROW(cp::deserialize_pool(bad), cp::FormatError) << "byte " << i;
  }
  for (std::size_t n = 0; n < bytes.size(); n += 13) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(n));
    EXPECT_THROW(cp::deserialize_pool(cut), cp::FormatError) << "length " << n;
  }
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(cp::deserialize_pool(longer), cp::FormatError);
  try {
    auto bad = bytes;
    bad[0] = 'X';
    cp::deserialize_pool(bad);
    FAIL();
  } catch (const cp::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
  EXPECT_THROW(cp::pool_load("/nonexistent/pool.cpp1"), cp::FileError);
}
