// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/encoder.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "chordprompt/binary_io.hpp"

namespace chordprompt {

EncoderConfig EncoderConfig::vit_b16() {
  EncoderConfig c;
  c.layers = 12;
  c.text_width = 512;
  c.vision_width = 768;
  c.heads = 8;
  c.max_text_tokens = 77;
  c.image_size = 224;
  c.patch_size = 16;
  c.channels = 3;
  c.vocab_size = 49408;
  c.joint_width = 512;
  c.mlp_hidden = 2048;
  return c;
}

void EncoderConfig::validate() const {
  auto positive = [](std::uint32_t v, const char* name) {
    CP_REQUIRE(v > 0, std::string("encoder config: ") + name + " must be positive");
  };
  positive(layers, "layers");
  positive(text_width, "text_width");
  positive(vision_width, "vision_width");
  positive(heads, "heads");
  positive(max_text_tokens, "max_text_tokens");
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(channels, "channels");
  positive(vocab_size, "vocab_size");
  positive(joint_width, "joint_width");
  positive(mlp_hidden, "mlp_hidden");
  CP_REQUIRE(text_width % heads == 0, "encoder config: text_width not divisible by heads");
  CP_REQUIRE(vision_width % heads == 0, "encoder config: vision_width not divisible by heads");
  CP_REQUIRE(image_size % patch_size == 0, "encoder config: image_size not divisible by patch_size");
}

namespace {

LayerWeights allocate_layer(std::size_t d, std::size_t hidden) {
  LayerWeights l;
  l.ln1_gain = Tensor({d}, 1.0);
  l.ln1_bias = Tensor({d});
  l.wq = Tensor({d, d});
  l.bq = Tensor({d});
  l.wk = Tensor({d, d});
  l.bk = Tensor({d});
  l.wv = Tensor({d, d});
  l.bv = Tensor({d});
  l.wo = Tensor({d, d});
  l.bo = Tensor({d});
  l.ln2_gain = Tensor({d}, 1.0);
  l.ln2_bias = Tensor({d});
  l.fc1 = Tensor({d, hidden});
  l.fc1_bias = Tensor({hidden});
  l.fc2 = Tensor({hidden, d});
  l.fc2_bias = Tensor({d});
  return l;
}

BackboneWeights allocate(const EncoderConfig& c) {
  c.validate();
  BackboneWeights w;
  w.config = c;
  const std::size_t dt = c.text_width, dv = c.vision_width, dj = c.joint_width;
  w.token_embedding = Tensor({c.vocab_size, dt});
  w.text_position = Tensor({c.max_text_tokens, dt});
  for (std::uint32_t l = 0; l < c.layers; ++l) w.text_layers.push_back(allocate_layer(dt, c.mlp_hidden));
  w.text_final_gain = Tensor({dt}, 1.0);
  w.text_final_bias = Tensor({dt});
  w.text_proj = Tensor({dt, dj});
  w.patch_weight = Tensor({c.patch_dim(), dv});
  w.patch_bias = Tensor({dv});
  w.class_embedding = Tensor({1, dv});
  w.vision_position = Tensor({c.num_patches() + 1, dv});
  for (std::uint32_t l = 0; l < c.layers; ++l) w.vision_layers.push_back(allocate_layer(dv, c.mlp_hidden));
  w.vision_final_gain = Tensor({dv}, 1.0);
  w.vision_final_bias = Tensor({dv});
  w.vision_proj = Tensor({dv, dj});
  return w;
}

void fill_normal(Tensor& t, Rng& rng, double std) {
  for (auto& v : t.data()) v = std * rng.normal();
}

void init_layer(LayerWeights& l, Rng& rng, std::size_t layers) {
  const double in_d = 1.0 / std::sqrt(static_cast<double>(l.wq.rows()));
  const double in_h = 1.0 / std::sqrt(static_cast<double>(l.fc2.rows()));
  const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(layers));
  fill_normal(l.wq, rng, in_d);
  fill_normal(l.wk, rng, in_d);
  fill_normal(l.wv, rng, in_d);
  fill_normal(l.wo, rng, in_d * depth);
  fill_normal(l.fc1, rng, in_d);
  fill_normal(l.fc2, rng, in_h * depth);
}

template <class LW, class F>
void visit_layer(const std::string& p, LW& l, F& fn) {
  fn(p + "ln1_gain", l.ln1_gain);
  fn(p + "ln1_bias", l.ln1_bias);
  fn(p + "wq", l.wq);
  fn(p + "bq", l.bq);
  fn(p + "wk", l.wk);
  fn(p + "bk", l.bk);
  fn(p + "wv", l.wv);
  fn(p + "bv", l.bv);
  fn(p + "wo", l.wo);
  fn(p + "bo", l.bo);
  fn(p + "ln2_gain", l.ln2_gain);
  fn(p + "ln2_bias", l.ln2_bias);
  fn(p + "fc1", l.fc1);
  fn(p + "fc1_bias", l.fc1_bias);
  fn(p + "fc2", l.fc2);
  fn(p + "fc2_bias", l.fc2_bias);
}

template <class BW, class F>
void visit_backbone(BW& w, F& fn) {
  fn("text.token_embedding", w.token_embedding);
  fn("text.position", w.text_position);
  for (std::size_t l = 0; l < w.text_layers.size(); ++l)
    visit_layer("text.layer" + std::to_string(l) + ".", w.text_layers[l], fn);
  fn("text.final_gain", w.text_final_gain);
  fn("text.final_bias", w.text_final_bias);
  fn("text.proj", w.text_proj);
  fn("vision.patch_weight", w.patch_weight);
  fn("vision.patch_bias", w.patch_bias);
  fn("vision.class_embedding", w.class_embedding);
  fn("vision.position", w.vision_position);
  for (std::size_t l = 0; l < w.vision_layers.size(); ++l)
    visit_layer("vision.layer" + std::to_string(l) + ".", w.vision_layers[l], fn);
  fn("vision.final_gain", w.vision_final_gain);
  fn("vision.final_bias", w.vision_final_bias);
  fn("vision.proj", w.vision_proj);
}

}  // namespace

BackboneWeights BackboneWeights::init(const EncoderConfig& config, Rng& rng) {
  BackboneWeights w = allocate(config);
  const std::size_t L = config.layers;
  fill_normal(w.token_embedding, rng, 0.02);
  fill_normal(w.text_position, rng, 0.01);
  for (auto& l : w.text_layers) init_layer(l, rng, L);
  fill_normal(w.text_proj, rng, 1.0 / std::sqrt(static_cast<double>(config.text_width)));
  fill_normal(w.patch_weight, rng, 1.0 / std::sqrt(static_cast<double>(config.patch_dim())));
  fill_normal(w.class_embedding, rng, 0.02);
  fill_normal(w.vision_position, rng, 0.02);
  for (auto& l : w.vision_layers) init_layer(l, rng, L);
  fill_normal(w.vision_proj, rng, 1.0 / std::sqrt(static_cast<double>(config.vision_width)));
  return w;
}

void BackboneWeights::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_backbone(*this, fn);
}

void BackboneWeights::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_backbone(*this, fn);
}

std::size_t BackboneWeights::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

bool bit_equal(const BackboneWeights& a, const BackboneWeights& b) {
  if (!(a.config == b.config)) return false;
  std::vector<const Tensor*> ta, tb;
  a.for_each([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
  b.for_each([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!bit_equal(*ta[i], *tb[i])) return false;
  return true;
}

BackboneVars bind_backbone(Tape& tape, const BackboneWeights& w, bool trainable) {
  std::map<std::string, Var> vars;
  w.for_each([&](const std::string& name, const Tensor& t) {
    vars.emplace(name, trainable ? tape.parameter(name, t) : tape.constant(t));
  });
  auto layer = [&](const std::string& p) {
    LayerVars l;
    l.ln1_gain = vars.at(p + "ln1_gain");
    l.ln1_bias = vars.at(p + "ln1_bias");
    l.wq = vars.at(p + "wq");
    l.bq = vars.at(p + "bq");
    l.wk = vars.at(p + "wk");
    l.bk = vars.at(p + "bk");
    l.wv = vars.at(p + "wv");
    l.bv = vars.at(p + "bv");
    l.wo = vars.at(p + "wo");
    l.bo = vars.at(p + "bo");
    l.ln2_gain = vars.at(p + "ln2_gain");
    l.ln2_bias = vars.at(p + "ln2_bias");
    l.fc1 = vars.at(p + "fc1");
    l.fc1_bias = vars.at(p + "fc1_bias");
    l.fc2 = vars.at(p + "fc2");
    l.fc2_bias = vars.at(p + "fc2_bias");
    return l;
  };
  BackboneVars b;
  b.config = w.config;
  b.token_embedding = vars.at("text.token_embedding");
  b.text_position = vars.at("text.position");
  for (std::size_t l = 0; l < w.text_layers.size(); ++l)
    b.text_layers.push_back(layer("text.layer" + std::to_string(l) + "."));
  b.text_final_gain = vars.at("text.final_gain");
  b.text_final_bias = vars.at("text.final_bias");
  b.text_proj = vars.at("text.proj");
  b.patch_weight = vars.at("vision.patch_weight");
  b.patch_bias = vars.at("vision.patch_bias");
  b.class_embedding = vars.at("vision.class_embedding");
  b.vision_position = vars.at("vision.position");
  for (std::size_t l = 0; l < w.vision_layers.size(); ++l)
    b.vision_layers.push_back(layer("vision.layer" + std::to_string(l) + "."));
  b.vision_final_gain = vars.at("vision.final_gain");
  b.vision_final_bias = vars.at("vision.final_bias");
  b.vision_proj = vars.at("vision.proj");
  return b;
}

AttentionInputs inject_values(Var x, std::size_t batch, std::size_t seq, const LayerPrompt& prompt) {
  CP_REQUIRE(prompt.direct.valid(), "inject_values: missing direct prompt");
  AttentionInputs in;
  in.seq = seq + prompt.direct.value().rows();
  in.query_key = splice_rows(x, batch, seq, prompt.direct, false);
  in.value = in.query_key;
  if (prompt.injected.valid()) {
    CP_REQUIRE(prompt.injected.shape() == prompt.direct.shape(),
               "injected prompt shape " + shape_str(prompt.injected.shape()) +
                   " does not match direct prompt shape " + shape_str(prompt.direct.shape()));
    in.value = splice_rows(x, batch, seq, add(prompt.direct, prompt.injected), false);
  }
  return in;
}

Var transformer_block(const LayerVars& w, Var x, std::size_t batch, std::size_t seq,
                      std::size_t heads, const LayerPrompt* prompt, EncodeTrace* trace) {
  const bool prompted = prompt != nullptr && prompt->direct.valid();
  AttentionInputs in{x, x, seq};
  if (prompted) in = inject_values(x, batch, seq, *prompt);
  const Var xs = in.query_key;
  const std::size_t s = in.seq;
  Var a = layer_norm(xs, w.ln1_gain, w.ln1_bias);
  Var q = add_row(matmul(a, w.wq), w.bq);
  Var k = add_row(matmul(a, w.wk), w.bk);
  Var av = in.value.index() == xs.index() ? a : layer_norm(in.value, w.ln1_gain, w.ln1_bias);
  Var v = add_row(matmul(av, w.wv), w.bv);
  Var o = attention(q, k, v, batch, s, heads, trace ? &trace->attention : nullptr);
  Var h = add(xs, add_row(matmul(o, w.wo), w.bo));
  Var hidden = gelu(add_row(matmul(layer_norm(h, w.ln2_gain, w.ln2_bias), w.fc1), w.fc1_bias));
  Var out = add(h, add_row(matmul(hidden, w.fc2), w.fc2_bias));
  if (!prompted) return out;

  std::vector<std::size_t> keep;
  keep.reserve(batch * seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < seq; ++i) keep.push_back(b * s + i);
  return gather_rows(out, keep);
}

namespace {

void check_prompt_depth(const EncoderConfig& c, std::size_t depth) {
  CP_REQUIRE(depth <= c.layers, "prompt depth " + std::to_string(depth) + " exceeds layer count " +
                                    std::to_string(c.layers));
}

}  // namespace

Var text_features(Tape& tape, const BackboneVars& w, std::span<const TokenSeq> texts,
                  std::span<const LayerPrompt> prompts, EncodeTrace* trace) {
  const EncoderConfig& c = w.config;
  check_prompt_depth(c, prompts.size());
  CP_REQUIRE(!texts.empty(), "text_features: no input sequences");
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto& t = texts[i];
    CP_REQUIRE(!t.empty() && t.size() <= c.max_text_tokens,
               "token sequence length " + std::to_string(t.size()) + " outside 1.." +
                   std::to_string(c.max_text_tokens));
    for (auto id : t)
      CP_REQUIRE(id < c.vocab_size, "token id " + std::to_string(id) + " >= vocab size");
    groups[t.size()].push_back(i);
  }

  std::vector<Var> parts;
  std::vector<std::size_t> order;
  for (const auto& [len, members] : groups) {
    const std::size_t batch = members.size();
    std::vector<std::size_t> ids;
    ids.reserve(batch * len);
    for (auto m : members) ids.insert(ids.end(), texts[m].begin(), texts[m].end());
    Var x = gather_rows(w.token_embedding, ids);
    std::vector<std::size_t> pos(len);
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    x = add_tiled(x, gather_rows(w.text_position, pos), batch);
    for (std::size_t l = 0; l < c.layers; ++l)
      x = transformer_block(w.text_layers[l], x, batch, len, c.heads,
                            l < prompts.size() ? &prompts[l] : nullptr, trace);
    std::vector<std::size_t> last(batch);
    for (std::size_t b = 0; b < batch; ++b) last[b] = b * len + len - 1;
    Var r = layer_norm(gather_rows(x, last), w.text_final_gain, w.text_final_bias);
    parts.push_back(matmul(r, w.text_proj));
    order.insert(order.end(), members.begin(), members.end());
  }
  if (parts.size() == 1) return parts[0];

  std::vector<std::size_t> inverse(order.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) inverse[order[pos]] = pos;
  return gather_rows(concat_rows(parts), inverse);
}

Tensor patchify(const EncoderConfig& c, const Tensor& image) {
  const Shape expect{c.image_size, c.image_size, c.channels};
  CP_REQUIRE(image.shape() == expect,
             "image shape " + shape_str(image.shape()) + " does not match " + shape_str(expect));
  const std::size_t g = c.patches_per_side(), p = c.patch_size, ch = c.channels;
  Tensor out({std::size_t{g} * g, c.patch_dim()});
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      double* row = out.ptr() + (pr * g + pc) * c.patch_dim();
      std::size_t k = 0;
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t cc = 0; cc < ch; ++cc)
            row[k++] = image[((pr * p + dy) * c.image_size + (pc * p + dx)) * ch + cc];
    }
  return out;
}

namespace {

Var embed_patch_tokens(Tape& tape, const BackboneVars& w, std::span<const Tensor> images) {
  const EncoderConfig& c = w.config;
  const std::size_t nb = c.num_patches(), pd = c.patch_dim();
  Tensor patches({images.size() * nb, pd});
  for (std::size_t b = 0; b < images.size(); ++b) {
    Tensor p = patchify(c, images[b]);
    std::memcpy(patches.ptr() + b * nb * pd, p.ptr(), p.size() * sizeof(double));
  }
  Var x = add_row(matmul(tape.constant(std::move(patches)), w.patch_weight), w.patch_bias);
  x = splice_rows(x, images.size(), nb, w.class_embedding, true);
  return add_tiled(x, w.vision_position, images.size());
}

}  // namespace

Var image_features(Tape& tape, const BackboneVars& w, std::span<const Tensor> images,
                   std::span<const LayerPrompt> prompts, EncodeTrace* trace) {
  const EncoderConfig& c = w.config;
  check_prompt_depth(c, prompts.size());
  CP_REQUIRE(!images.empty(), "image_features: no input images");
  const std::size_t batch = images.size(), seq = c.num_patches() + 1;
  Var x = embed_patch_tokens(tape, w, images);
  for (std::size_t l = 0; l < c.layers; ++l)
    x = transformer_block(w.vision_layers[l], x, batch, seq, c.heads,
                          l < prompts.size() ? &prompts[l] : nullptr, trace);
  std::vector<std::size_t> cls(batch);
  for (std::size_t b = 0; b < batch; ++b) cls[b] = b * seq;
  Var r = layer_norm(gather_rows(x, cls), w.vision_final_gain, w.vision_final_bias);
  return matmul(r, w.vision_proj);
}

Tensor embed_patches(const BackboneWeights& w, const Tensor& image) {
  Tape tape;
  BackboneVars v = bind_backbone(tape, w, false);
  return embed_patch_tokens(tape, v, std::span<const Tensor>(&image, 1)).value();
}

namespace {

std::vector<LayerPrompt> bind_prompts(Tape& tape, std::span<const Tensor> prompts,
                                      std::span<const Tensor> injected) {
  CP_REQUIRE(injected.empty() || injected.size() == prompts.size(),
             "injected prompts given for " + std::to_string(injected.size()) + " layers, direct for " +
                 std::to_string(prompts.size()));
  std::vector<LayerPrompt> out;
  for (std::size_t l = 0; l < prompts.size(); ++l) {
    LayerPrompt lp;
    lp.direct = tape.constant(prompts[l]);
    if (!injected.empty()) {
      CP_REQUIRE(injected[l].shape() == prompts[l].shape(),
                 "layer " + std::to_string(l) + ": injected prompt shape " +
                     shape_str(injected[l].shape()) + " != direct prompt shape " +
                     shape_str(prompts[l].shape()));
      lp.injected = tape.constant(injected[l]);
    }
    out.push_back(lp);
  }
  return out;
}

Tensor row_vector(const Tensor& m) { return m.reshaped({m.size()}); }

}  // namespace

Tensor text_encode_batch(const BackboneWeights& w, std::span<const TokenSeq> texts,
                         std::span<const Tensor> prompts, std::span<const Tensor> injected) {
  Tape tape;
  BackboneVars v = bind_backbone(tape, w, false);
  auto lp = bind_prompts(tape, prompts, injected);
  return text_features(tape, v, texts, lp).value();
}

Tensor image_encode_batch(const BackboneWeights& w, std::span<const Tensor> images,
                          std::span<const Tensor> prompts, std::span<const Tensor> injected) {
  Tape tape;
  BackboneVars v = bind_backbone(tape, w, false);
  auto lp = bind_prompts(tape, prompts, injected);
  return image_features(tape, v, images, lp).value();
}

Tensor text_encode(const BackboneWeights& w, const TokenSeq& tokens,
                   std::span<const Tensor> prompts, std::span<const Tensor> injected,
                   EncodeTrace* trace) {
  Tape tape;
  BackboneVars v = bind_backbone(tape, w, false);
  auto lp = bind_prompts(tape, prompts, injected);
  return row_vector(text_features(tape, v, std::span<const TokenSeq>(&tokens, 1), lp, trace).value());
}

Tensor image_encode(const BackboneWeights& w, const Tensor& image, std::span<const Tensor> prompts,
                    std::span<const Tensor> injected, EncodeTrace* trace) {
  Tape tape;
  BackboneVars v = bind_backbone(tape, w, false);
  auto lp = bind_prompts(tape, prompts, injected);
  return row_vector(image_features(tape, v, std::span<const Tensor>(&image, 1), lp, trace).value());
}

Tensor base_text_encode(const BackboneWeights& w, const TokenSeq& tokens) {
  return text_encode(w, tokens, {}, {});
}

Tensor base_image_encode(const BackboneWeights& w, const Tensor& image) {
  return image_encode(w, image, {}, {});
}

// ---- checkpoint -------------------------------------------------------------

namespace {

constexpr char kBackboneMagic[4] = {'C', 'P', 'B', 'B'};

void write_config(ByteWriter& out, const EncoderConfig& c) {
  for (auto v : {c.layers, c.text_width, c.vision_width, c.heads, c.max_text_tokens, c.image_size,
                 c.patch_size, c.channels, c.vocab_size, c.joint_width, c.mlp_hidden})
    out.u32(v);
}

EncoderConfig read_config(ByteReader& in) {
  EncoderConfig c;
  for (std::uint32_t* f : {&c.layers, &c.text_width, &c.vision_width, &c.heads, &c.max_text_tokens,
                           &c.image_size, &c.patch_size, &c.channels, &c.vocab_size, &c.joint_width,
                           &c.mlp_hidden})
    *f = in.u32();
  return c;
}

double backbone_numel(const EncoderConfig& c) {
  auto layer = [&](double d) {
    const double h = c.mlp_hidden;
    return 4 * d * d + 2 * d * h + 9 * d + h;
  };
  const double dt = c.text_width, dv = c.vision_width, dj = c.joint_width, L = c.layers;
  const double text = c.vocab_size * dt + c.max_text_tokens * dt + L * layer(dt) + 2 * dt + dt * dj;
  const double vision = c.patch_dim() * dv + 2 * dv + (c.num_patches() + 1.0) * dv + L * layer(dv) +
                        2 * dv + dv * dj;
  return text + vision;
}

}  // namespace

std::vector<std::uint8_t> serialize_backbone(const BackboneWeights& w) {
  ByteWriter out;
  out.raw(std::string_view(kBackboneMagic, 4));
  out.u32(kBackboneVersion);
  write_config(out, w.config);
  w.for_each([&](const std::string&, const Tensor& t) { out.f64s(t.data()); });
  return out.take();
}

BackboneWeights deserialize_backbone(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (in.str(4) != std::string_view(kBackboneMagic, 4)) throw FormatError("bad backbone magic", 0);
  const std::size_t vat = in.offset();
  if (const auto v = in.u32(); v != kBackboneVersion)
    throw FormatError("unsupported backbone version " + std::to_string(v), vat);
  const std::size_t cat = in.offset();
  EncoderConfig c = read_config(in);
  try {
    c.validate();
  } catch (const ContractViolation& e) {
    throw FormatError(e.what(), cat);
  }
  // Payload size is fully determined by the config; check before allocating.
  const double expected = backbone_numel(c) * 8.0;
  if (static_cast<double>(in.remaining()) != expected)
    throw FormatError("backbone payload is " + std::to_string(in.remaining()) + " bytes, expected " +
                          std::to_string(static_cast<std::uint64_t>(expected)),
                      in.offset());
  BackboneWeights w = allocate(c);
  w.for_each([&](const std::string&, Tensor& t) { in.f64s(t.data()); });
  return w;
}

void save_backbone(const BackboneWeights& w, const std::string& path) {
  write_file(path, serialize_backbone(w));
}

BackboneWeights load_backbone(const std::string& path) { return deserialize_backbone(read_file(path)); }

}  // namespace chordprompt
