// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/pool.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "chordprompt/binary_io.hpp"

namespace chordprompt {

Digest pool_config_hash(const EncoderConfig& c, std::size_t depth, std::size_t length) {
  std::string s = "chordprompt.pool";
  auto field = [&](const char* name, std::uint64_t v) {
    s += ';';
    s += name;
    s += '=';
    s += std::to_string(v);
  };
  field("layers", c.layers);
  field("text_width", c.text_width);
  field("vision_width", c.vision_width);
  field("heads", c.heads);
  field("max_text_tokens", c.max_text_tokens);
  field("image_size", c.image_size);
  field("patch_size", c.patch_size);
  field("channels", c.channels);
  field("vocab_size", c.vocab_size);
  field("joint_width", c.joint_width);
  field("mlp_hidden", c.mlp_hidden);
  field("depth", depth);
  field("length", length);
  return sha256(s);
}

Prototype prototype_from_embeddings(const Tensor& e) {
  CP_REQUIRE(e.rank() == 2 && e.rows() > 0, "prototype: need at least one class embedding");
  Tensor sum({e.cols()}, 0.0);
  for (std::size_t r = 0; r < e.rows(); ++r)
    for (std::size_t j = 0; j < e.cols(); ++j) sum[j] += e(r, j);
  double sq = 0.0;
  for (double v : sum.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm))
    throw DegenerateInput("prototype: class embeddings sum to a zero-norm vector");
  for (auto& v : sum.data()) v /= norm;
  return {std::move(sum)};
}

Prototype extract_prototype(const BackboneWeights& w, std::span<const TokenSeq> class_names) {
  CP_REQUIRE(!class_names.empty(), "extract_prototype: empty class list");
  std::vector<std::size_t> order(class_names.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return class_names[a] < class_names[b]; });
  std::vector<TokenSeq> sorted;
  sorted.reserve(order.size());
  for (auto i : order) sorted.push_back(class_names[i]);
  return prototype_from_embeddings(text_encode_batch(w, sorted, {}, {}));
}

// ---- pool -------------------------------------------------------------------

std::optional<std::size_t> PromptPool::find(const std::string& task_id) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].task_id == task_id) return i;
  return std::nullopt;
}

PromptPool PromptPool::prefix(std::size_t n) const {
  CP_REQUIRE(n <= entries_.size(), "pool prefix " + std::to_string(n) + " exceeds size " +
                                       std::to_string(entries_.size()));
  PromptPool p(hash_);
  p.entries_.assign(entries_.begin(), entries_.begin() + static_cast<std::ptrdiff_t>(n));
  return p;
}

namespace {

std::vector<Shape> signature(const PoolEntry& e) {
  std::vector<Shape> s{e.key.vector.shape()};
  for (const auto& t : e.prompts.text) s.push_back(t.shape());
  for (const auto& t : e.prompts.visual) s.push_back(t.shape());
  for (const auto& t : e.aligner.v2t) s.push_back(t.shape());
  for (const auto& t : e.aligner.t2v) s.push_back(t.shape());
  return s;
}

void check_entry(const PoolEntry& e) {
  CP_REQUIRE(!e.task_id.empty() && e.task_id.size() <= 0xFFFF,
             "pool entry: task id must have 1..65535 bytes");
  const Tensor& k = e.key.vector;
  CP_REQUIRE(k.rank() == 1 && k.size() > 0 && k.all_finite(),
             "pool entry '" + e.task_id + "': key must be a finite vector");
  double sq = 0.0;
  for (double v : k.data()) sq += v * v;
  CP_REQUIRE(std::abs(std::sqrt(sq) - 1.0) <= 1e-12,
             "pool entry '" + e.task_id + "': key is not unit-norm");
  CP_REQUIRE(e.prompts.depth() == e.aligner.depth(),
             "pool entry '" + e.task_id + "': prompt depth " + std::to_string(e.prompts.depth()) +
                 " != aligner depth " + std::to_string(e.aligner.depth()));
  if (e.prompts.depth() > 0) {
    CP_REQUIRE(e.prompts.text[0].rank() == 2 && e.prompts.visual.size() > 0 &&
                   e.prompts.visual[0].rank() == 2,
               "pool entry '" + e.task_id + "': prompts must be matrices");
    const std::size_t dt = e.prompts.text[0].cols(), dv = e.prompts.visual[0].cols();
    e.prompts.validate(dt, dv);
    e.aligner.validate(dt, dv);
  }
}

}  // namespace

void pool_add(PromptPool& pool, PoolEntry entry) {
  CP_REQUIRE(entry.config_hash == pool.hash_, "pool_add: entry '" + entry.task_id +
                                                  "' has config hash " + to_hex(entry.config_hash) +
                                                  ", pool expects " + to_hex(pool.hash_));
  check_entry(entry);
  const auto at = pool.find(entry.task_id);
  for (std::size_t i = 0; i < pool.entries_.size(); ++i) {
    if (at && *at == i) continue;
    CP_REQUIRE(signature(pool.entries_[i]) == signature(entry),
               "pool_add: entry '" + entry.task_id + "' shapes differ from entry '" +
                   pool.entries_[i].task_id + "'");
    break;
  }
  if (at)
    pool.entries_[*at] = std::move(entry);
  else
    pool.entries_.push_back(std::move(entry));
}

double cosine(std::span<const double> a, std::span<const double> b) {
  CP_REQUIRE(a.size() == b.size(), "cosine: length " + std::to_string(a.size()) +
                                       " != " + std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateInput("cosine: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::optional<PoolMatch> pool_query(const PromptPool& pool, const Prototype& query, double gamma) {
  CP_REQUIRE(gamma >= -1.0 && gamma <= 1.0,
             "pool_query: gamma " + std::to_string(gamma) + " outside [-1, 1]");
  if (pool.empty()) return std::nullopt;
  PoolMatch best{0, cosine(query.vector.data(), pool[0].key.vector.data())};
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const double s = cosine(query.vector.data(), pool[i].key.vector.data());
    if (s > best.similarity) best = {i, s};
  }
  if (best.similarity >= gamma) return best;
  return std::nullopt;
}

// ---- persistence ------------------------------------------------------------

namespace {

constexpr char kPoolMagic[4] = {'C', 'P', 'P', '1'};

void write_stack(ByteWriter& out, const std::vector<Tensor>& layers) {
  const std::size_t r = layers.empty() ? 0 : layers[0].rows();
  const std::size_t c = layers.empty() ? 0 : layers[0].cols();
  out.u32(3);
  out.u32(static_cast<std::uint32_t>(layers.size()));
  out.u32(static_cast<std::uint32_t>(r));
  out.u32(static_cast<std::uint32_t>(c));
  for (const auto& t : layers) out.f64s(t.data());
}

std::vector<Tensor> read_stack(ByteReader& in) {
  const std::size_t at = in.offset();
  Tensor t = in.tensor(3);
  if (t.rank() != 3) throw FormatError("expected a rank-3 tensor stack", at);
  const std::size_t d = t.dim(0), r = t.dim(1), c = t.dim(2);
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < d; ++l) {
    Tensor m({r, c});
    std::memcpy(m.ptr(), t.ptr() + l * r * c, r * c * sizeof(double));
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_pool(const PromptPool& pool) {
  ByteWriter out;
  out.raw(std::string_view(kPoolMagic, 4));
  out.u32(kPoolVersion);
  out.bytes(pool.config_hash());
  out.u32(static_cast<std::uint32_t>(pool.size()));
  for (const auto& e : pool) {
    out.u16(static_cast<std::uint16_t>(e.task_id.size()));
    out.raw(e.task_id);
    out.u32(e.creation_step);
    out.tensor(e.key.vector);
    write_stack(out, e.prompts.text);
    write_stack(out, e.prompts.visual);
    write_stack(out, e.aligner.v2t);
    write_stack(out, e.aligner.t2v);
  }
  const Digest tail = sha256(out.buffer());
  out.bytes(tail);
  return out.take();
}

PromptPool deserialize_pool(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 32) throw FormatError("pool file shorter than its checksum", 0);
  const auto body = bytes.first(bytes.size() - 32);
  ByteReader in(body);
  if (in.str(4) != std::string_view(kPoolMagic, 4)) throw FormatError("bad pool magic", 0);
  const std::size_t vat = in.offset();
  if (const auto v = in.u32(); v != kPoolVersion)
    throw FormatError("unsupported pool version " + std::to_string(v), vat);
  Digest hash{};
  const std::string h = in.str(32);
  std::memcpy(hash.data(), h.data(), 32);
  Digest expect{};
  std::memcpy(expect.data(), bytes.data() + body.size(), 32);
  if (sha256(body) != expect) throw FormatError("pool checksum mismatch", body.size());

  PromptPool pool(hash);
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = in.offset();
    PoolEntry e;
    e.task_id = in.str(in.u16());
    e.creation_step = in.u32();
    e.key.vector = in.tensor(1);
    e.prompts.text = read_stack(in);
    e.prompts.visual = read_stack(in);
    e.aligner.v2t = read_stack(in);
    e.aligner.t2v = read_stack(in);
    e.config_hash = hash;
    if (pool.find(e.task_id)) throw FormatError("duplicate task id '" + e.task_id + "'", at);
    try {
      pool_add(pool, std::move(e));
    } catch (const ContractViolation& err) {
      throw FormatError(err.what(), at);
    }
  }
  if (!in.at_end()) throw FormatError("trailing bytes after last pool entry", in.offset());
  return pool;
}

void pool_save(const PromptPool& pool, const std::string& path) {
  write_file(path, serialize_pool(pool));
}

PromptPool pool_load(const std::string& path) { return deserialize_pool(read_file(path)); }

}  // namespace chordprompt
