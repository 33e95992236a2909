// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace chordprompt {

void TrainConfig::validate(const EncoderConfig& e) const {
  CP_REQUIRE(learning_rate > 0.0, "train config: learning_rate must be positive");
  CP_REQUIRE(weight_decay >= 0.0, "train config: weight_decay must be non-negative");
  CP_REQUIRE(batch_size > 0, "train config: batch_size must be positive");
  CP_REQUIRE(tau > 0.0, "train config: tau must be positive");
  CP_REQUIRE(depth <= e.layers, "train config: depth " + std::to_string(depth) +
                                    " exceeds encoder layers " + std::to_string(e.layers));
  CP_REQUIRE(depth == 0 || length > 0, "train config: length must be positive");
  CP_REQUIRE(gamma >= -1.0 && !std::isnan(gamma), "train config: gamma must be >= -1");
  CP_REQUIRE(!few_shot || shots > 0, "train config: shots must be positive");
}

// ---- scoring ----------------------------------------------------------------

Tensor score_matrix(const Tensor& xs, const Tensor& ys) {
  CP_REQUIRE(xs.rank() == 2 && ys.rank() == 2 && xs.cols() == ys.cols(),
             "score_matrix: shapes " + shape_str(xs.shape()) + " and " + shape_str(ys.shape()));
  Tensor out({xs.rows(), ys.rows()});
  std::vector<double> yn(ys.rows());
  for (std::size_t c = 0; c < ys.rows(); ++c) {
    double s = 0.0;
    for (double v : ys.row(c)) s += v * v;
    if (!(s > 0.0)) throw DegenerateInput("scores: zero class embedding " + std::to_string(c));
    yn[c] = std::sqrt(s);
  }
  for (std::size_t r = 0; r < xs.rows(); ++r) {
    const auto x = xs.row(r);
    double s = 0.0;
    for (double v : x) s += v * v;
    if (!(s > 0.0)) throw DegenerateInput("scores: zero feature vector " + std::to_string(r));
    const double xn = std::sqrt(s);
    for (std::size_t c = 0; c < ys.rows(); ++c) {
      const auto y = ys.row(c);
      double dot = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) dot += x[k] * y[k];
      out(r, c) = dot / (xn * yn[c]);
    }
  }
  return out;
}

Tensor scores(const Tensor& x, const Tensor& ys) {
  CP_REQUIRE(x.rank() == 1, "scores: x must be a vector, got " + shape_str(x.shape()));
  Tensor m = score_matrix(x.reshaped({1, x.size()}), ys);
  return m.reshaped({ys.rows()});
}

double ce_loss(const Tensor& s, std::span<const std::size_t> labels, double tau) {
  CP_REQUIRE(s.rank() == 2 && s.rows() == labels.size() && s.rows() > 0,
             "ce_loss: scores " + shape_str(s.shape()) + " for " + std::to_string(labels.size()) +
                 " labels");
  CP_REQUIRE(tau > 0.0, "ce_loss: tau must be positive");
  double total = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    CP_REQUIRE(labels[r] < s.cols(), "ce_loss: label " + std::to_string(labels[r]) +
                                         " out of range for " + std::to_string(s.cols()) + " classes");
    // log-softmax directly, so tiny probabilities do not underflow to log(0).
    const auto row = s.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp((v - mx) / tau);
    total += -((row[labels[r]] - mx) / tau - std::log(z));
  }
  return total / static_cast<double>(labels.size());
}

// ---- base pretraining -------------------------------------------------------

namespace {

ParamMap backbone_params(const BackboneWeights& w) {
  ParamMap m;
  w.for_each([&](const std::string& name, const Tensor& t) { m.emplace(name, t); });
  return m;
}

void load_params(BackboneWeights& w, const ParamMap& m) {
  w.for_each([&](const std::string& name, Tensor& t) { t = m.at(name); });
}

std::vector<Tensor> images_of(const std::vector<Sample>& samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

// Runs `fn` over consecutive slices of at most `chunk` images.
template <class Fn>
void for_chunks(std::span<const Tensor> images, std::size_t chunk, Fn fn) {
  for (std::size_t at = 0; at < images.size(); at += chunk)
    fn(at, images.subspan(at, std::min(chunk, images.size() - at)));
}

constexpr std::size_t kEvalChunk = 64;

}  // namespace

double base_accuracy(const BackboneWeights& w, const TaskDataset& d,
                     const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  const auto imgs = images_of(samples);
  const auto pred = predict_base(w, imgs, d.class_names);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) hit += pred[i] == samples[i].label;
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

PretrainResult pretrain_base(const EncoderConfig& config, const TaskDataset& base,
                             const PretrainConfig& pc) {
  base.validate(config);
  CP_REQUIRE(!base.train.empty(), "pretrain_base: empty training split");
  CP_REQUIRE(pc.tau > 0.0 && pc.learning_rate > 0.0, "pretrain_base: tau and lr must be positive");
  Rng rng = Rng(pc.seed).derive(0xBA5E);
  PretrainResult res;
  res.weights = BackboneWeights::init(config, rng);

  const std::size_t k = base.num_classes();
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < base.train.size(); ++i) by_class[base.train[i].label].push_back(i);
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < k; ++c)
    if (!by_class[c].empty()) present.push_back(c);
  const std::size_t cap = pc.batch_classes ? pc.batch_classes : 64;
  const std::size_t b = std::min(cap, present.size());
  CP_REQUIRE(b >= 2, "pretrain_base: need at least two classes with training samples");

  ParamMap params = backbone_params(res.weights);
  OptimState opt(AdamWConfig{pc.learning_rate, 0.9, 0.999, 1e-8, pc.weight_decay});
  std::vector<std::size_t> labels(b);
  std::iota(labels.begin(), labels.end(), std::size_t{0});

  auto evaluate = [&] {
    res.accuracy = base_accuracy(res.weights, base, base.test.empty() ? base.train : base.test);
    res.converged = res.accuracy >= pc.target_accuracy;
  };
  evaluate();
  for (std::uint32_t it = 0; it < pc.max_iterations && !res.converged; ++it) {
    const auto perm = rng.permutation(present.size());
    std::vector<Tensor> imgs;
    std::vector<TokenSeq> names;
    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t c = present[perm[j]];
      const auto& pool = by_class[c];
      imgs.push_back(base.train[pool[rng.below(pool.size())]].image);
      names.push_back(base.class_names[c]);
    }
    Tape tape;
    BackboneVars v = bind_backbone(tape, res.weights, true);
    Var x = l2_normalize_rows(image_features(tape, v, imgs, {}));
    Var y = l2_normalize_rows(text_features(tape, v, names, {}));
    Var s = scale(matmul_nt(x, y), 1.0 / pc.tau);
    Var st = scale(matmul_nt(y, x), 1.0 / pc.tau);
    Var loss = scale(add(cross_entropy(s, labels), cross_entropy(st, labels)), 0.5);
    const double lv = loss.value().item();
    CP_REQUIRE(std::isfinite(lv), "pretrain_base: non-finite loss at iteration " + std::to_string(it));
    res.loss_trace.push_back(lv);
    adamw_step(params, tape.backward(loss), opt);
    load_params(res.weights, params);
    res.iterations = it + 1;
    if (pc.eval_every && res.iterations % pc.eval_every == 0) evaluate();
  }
  if (!pc.eval_every || res.iterations % pc.eval_every != 0) evaluate();
  return res;
}

// ---- prompt training --------------------------------------------------------

Var task_loss(Tape& tape, const BackboneVars& backbone, const ParamVars& params, std::size_t depth,
              std::span<const Tensor> images, std::span<const std::size_t> labels,
              std::span<const TokenSeq> class_names, double tau) {
  CP_REQUIRE(tau > 0.0, "task_loss: tau must be positive");
  const CrossModalPrompts cm = cross_modal_prompts(params, depth);
  Var x = l2_normalize_rows(image_features(tape, backbone, images, cm.visual));
  Var y = l2_normalize_rows(text_features(tape, backbone, class_names, cm.text));
  return cross_entropy(scale(matmul_nt(x, y), 1.0 / tau), labels);
}

double max_cross_key_similarity(const BackboneWeights& w, std::span<const TaskDataset> tasks) {
  CP_REQUIRE(tasks.size() >= 2, "max_cross_key_similarity: need at least two tasks");
  std::vector<Prototype> keys;
  for (const auto& t : tasks) keys.push_back(extract_prototype(w, t.class_names));
  double worst = -1.0;
  for (std::size_t i = 0; i < keys.size(); ++i)
    for (std::size_t j = i + 1; j < keys.size(); ++j)
      worst = std::max(worst, cosine(keys[i].vector.data(), keys[j].vector.data()));
  return worst;
}

TaskResult train_task(const BackboneWeights& w, const TaskDataset& task, const TrainConfig& config,
                      std::size_t task_index) {
  config.validate(w.config);
  task.validate(w.config);
  CP_REQUIRE(!task.train.empty(), "train_task: task '" + task.task_id + "' has no training samples");
  Rng rng = Rng(config.seed).derive(task_index + 1);

  TaskResult res;
  res.key = extract_prototype(w, task.class_names);
  res.prompts = PromptSet::init(config.depth, config.length, w.config.text_width,
                                w.config.vision_width, rng);
  res.aligner = AlignerParams::zeros(config.depth, w.config.text_width, w.config.vision_width);

  Rng shot_rng = rng.derive(0xF5);
  const std::vector<Sample> train =
      config.few_shot ? few_shot_subset(task, config.shots, shot_rng).train : task.train;

  ParamMap params = to_param_map(res.prompts, res.aligner);
  OptimState opt(AdamWConfig{config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  const std::uint32_t iters = config.effective_iterations();
  std::vector<Tensor> imgs(config.batch_size);
  std::vector<std::size_t> labels(config.batch_size);
  for (std::uint32_t it = 0; it < iters; ++it) {
    for (std::size_t j = 0; j < config.batch_size; ++j) {
      const Sample& s = train[rng.below(train.size())];
      imgs[j] = s.image;
      labels[j] = s.label;
    }
    Tape tape;
    BackboneVars bv = bind_backbone(tape, w, false);
    ParamVars pv;
    for (const auto& [id, t] : params) pv.emplace(id, tape.parameter(id, t));
    Var loss = task_loss(tape, bv, pv, config.depth, imgs, labels, task.class_names, config.tau);
    const double lv = loss.value().item();
    CP_REQUIRE(std::isfinite(lv), "train_task: non-finite loss at iteration " + std::to_string(it));
    res.loss_trace.push_back(lv);
    if (!params.empty()) adamw_step(params, tape.backward(loss), opt);
  }
  from_param_map(params, res.prompts, res.aligner);
  return res;
}

PromptPool train_sequence(const BackboneWeights& w, std::span<const TaskDataset> tasks,
                          const TrainConfig& config, std::vector<std::vector<double>>* loss_traces) {
  std::set<std::string> ids;
  for (const auto& t : tasks)
    CP_REQUIRE(ids.insert(t.task_id).second, "train_sequence: duplicate task id '" + t.task_id + "'");
  PromptPool pool(pool_config_hash(w.config, config.depth, config.length));
  if (loss_traces) loss_traces->clear();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    TaskResult r = train_task(w, tasks[i], config, i);
    if (loss_traces) loss_traces->push_back(r.loss_trace);
    PoolEntry e;
    e.task_id = tasks[i].task_id;
    e.key = std::move(r.key);
    e.prompts = std::move(r.prompts);
    e.aligner = std::move(r.aligner);
    e.creation_step = static_cast<std::uint32_t>(i + 1);
    e.config_hash = pool.config_hash();
    pool_add(pool, std::move(e));
  }
  return pool;
}

// ---- inference --------------------------------------------------------------

Route route(const PromptPool& pool, const BackboneWeights& w, std::span<const TokenSeq> class_names,
            double gamma) {
  CP_REQUIRE(!class_names.empty(), "route: empty class list");
  CP_REQUIRE(gamma >= -1.0 && !std::isnan(gamma), "route: gamma must be >= -1");
  Route r;
  if (gamma > 1.0 || pool.empty()) return r;
  const auto m = pool_query(pool, extract_prototype(w, class_names), gamma);
  if (m) r = {false, m->index, m->similarity};
  return r;
}

std::vector<std::size_t> predict_base(const BackboneWeights& w, std::span<const Tensor> images,
                                      std::span<const TokenSeq> class_names) {
  CP_REQUIRE(!class_names.empty(), "predict_base: empty class list");
  const Tensor ys = text_encode_batch(w, class_names, {}, {});
  std::vector<std::size_t> out;
  for_chunks(images, kEvalChunk, [&](std::size_t, std::span<const Tensor> chunk) {
    const Tensor s = score_matrix(image_encode_batch(w, chunk, {}, {}), ys);
    for (std::size_t r = 0; r < s.rows(); ++r) out.push_back(argmax(s.row(r)));
  });
  return out;
}

std::vector<std::size_t> predict_with_entry(const BackboneWeights& w, const PoolEntry& entry,
                                            std::span<const Tensor> images,
                                            std::span<const TokenSeq> class_names, double tau) {
  CP_REQUIRE(!class_names.empty(), "predict_with_entry: empty class list");
  const InjectedPrompts inj = cross_project(entry.prompts, entry.aligner);
  const Tensor ys = text_encode_batch(w, class_names, entry.prompts.text, inj.text);
  std::vector<std::size_t> out;
  for_chunks(images, kEvalChunk, [&](std::size_t, std::span<const Tensor> chunk) {
    const Tensor p = softmax(
        score_matrix(image_encode_batch(w, chunk, entry.prompts.visual, inj.visual), ys), tau);
    for (std::size_t r = 0; r < p.rows(); ++r) out.push_back(argmax(p.row(r)));
  });
  return out;
}

std::vector<std::size_t> predict(const PromptPool& pool, const BackboneWeights& w,
                                 std::span<const Tensor> images,
                                 std::span<const TokenSeq> class_names, double gamma, double tau,
                                 Route* route_out) {
  const Route r = route(pool, w, class_names, gamma);
  if (route_out) *route_out = r;
  if (r.fallback) return predict_base(w, images, class_names);
  return predict_with_entry(w, pool[r.entry], images, class_names, tau);
}

std::size_t infer(const PromptPool& pool, const BackboneWeights& w, const Tensor& image,
                  std::span<const TokenSeq> class_names, double gamma, double tau) {
  return predict(pool, w, std::span<const Tensor>(&image, 1), class_names, gamma, tau)[0];
}

std::vector<PromptPool> step_snapshots(const PromptPool& pool) {
  std::vector<PromptPool> out;
  for (std::size_t s = 0; s <= pool.size(); ++s) out.push_back(pool.prefix(s));
  return out;
}

EvalResult evaluate_matrix(std::span<const PromptPool> snapshots, const BackboneWeights& w,
                           std::span<const TaskDataset> tasks, const EvalConfig& config) {
  CP_REQUIRE(!snapshots.empty(), "evaluate_matrix: need at least the zero-shot snapshot");
  CP_REQUIRE(snapshots.size() == tasks.size() + 1,
             "evaluate_matrix: " + std::to_string(snapshots.size()) + " snapshots for " +
                 std::to_string(tasks.size()) + " tasks");
  EvalResult res;
  std::vector<std::vector<Tensor>> imgs;
  for (const auto& t : tasks) imgs.push_back(images_of(t.test));

  for (std::size_t s = 0; s < snapshots.size(); ++s) {
    std::vector<double> row;
    auto& preds = res.predictions.emplace_back();
    auto& routes = res.routes.emplace_back();
    for (std::size_t c = 0; c < tasks.size(); ++c) {
      const auto& t = tasks[c];
      Route r;
      std::vector<std::size_t> p;
      if (config.untrained_fallback && !snapshots[s].find(t.task_id)) {
        p = predict_base(w, imgs[c], t.class_names);
      } else {
        p = predict(snapshots[s], w, imgs[c], t.class_names, config.gamma, config.tau, &r);
      }
      std::size_t hit = 0;
      auto& out = preds.emplace_back();
      for (std::size_t i = 0; i < p.size(); ++i) {
        out.push_back(static_cast<std::uint32_t>(p[i]));
        hit += p[i] == t.test[i].label;
      }
      routes.push_back(r);
      row.push_back(t.test.empty() ? 0.0
                                   : static_cast<double>(hit) / static_cast<double>(t.test.size()));
    }
    if (s == 0)
      res.matrix.zero_shot = std::move(row);
    else
      res.matrix.steps.push_back(std::move(row));
  }
  return res;
}

}  // namespace chordprompt
