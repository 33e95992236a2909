// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>

#include "chordprompt/binary_io.hpp"
#include "chordprompt/errors.hpp"
#include "chordprompt/hash.hpp"
#include "chordprompt/metrics.hpp"
#include "chordprompt/pool.hpp"

namespace chordprompt::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool right) {
  if (s.size() >= width) return right ? " " + s : s + " ";
  const std::string fill(width - s.size(), ' ');
  return right ? fill + s : s + fill;
}

std::string digest_hex(std::span<const std::uint8_t> bytes) { return to_hex(sha256(bytes)); }
std::string digest_hex(const std::string& s) { return to_hex(sha256(std::string_view(s))); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path.string(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file(path.string());
  return {bytes.begin(), bytes.end()};
}

json encoder_json(const EncoderConfig& c) {
  return {{"layers", c.layers},         {"text_width", c.text_width},
          {"vision_width", c.vision_width}, {"heads", c.heads},
          {"max_text_tokens", c.max_text_tokens}, {"image_size", c.image_size},
          {"patch_size", c.patch_size}, {"channels", c.channels},
          {"vocab_size", c.vocab_size}, {"joint_width", c.joint_width},
          {"mlp_hidden", c.mlp_hidden}};
}

json bench_json(const BenchmarkConfig& b) {
  return {{"seed", b.seed},
          {"domains", b.domains},
          {"classes", b.classes},
          {"samples_per_class", b.samples_per_class},
          {"base_samples_per_class", b.base_samples_per_class},
          {"test_fraction", b.test_fraction},
          {"style_strength", b.style_strength},
          {"image_size", b.image_size},
          {"channels", b.channels},
          {"vocab_size", b.vocab_size}};
}

json pretrain_json(const PretrainConfig& p) {
  return {{"max_iterations", p.max_iterations}, {"learning_rate", p.learning_rate},
          {"weight_decay", p.weight_decay},     {"tau", p.tau},
          {"batch_classes", p.batch_classes},   {"target_accuracy", p.target_accuracy},
          {"eval_every", p.eval_every},         {"seed", p.seed}};
}

json train_json(const TrainConfig& t) {
  return {{"iterations", t.iterations},
          {"few_shot_iterations", t.few_shot_iterations},
          {"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay},
          {"batch_size", t.batch_size},
          {"tau", t.tau},
          {"depth", t.depth},
          {"length", t.length},
          {"gamma", t.gamma},
          {"seed", t.seed},
          {"few_shot", t.few_shot},
          {"shots", t.shots}};
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// ---- data directory -----------------------------------------------------------

struct Data {
  std::string manifest_sha256;
  TaskDataset base;
  std::vector<TaskDataset> tasks;
  std::vector<std::string> styles;
};

Data load_data(const RunConfig& cfg, bool with_base) {
  const fs::path dir(cfg.data_dir);
  const std::string text = read_text(dir / "manifest.json");
  json m;
  try {
    m = json::parse(text);
  } catch (const json::exception& e) {
    throw FileError((dir / "manifest.json").string() + ": " + e.what());
  }
  Data d;
  d.manifest_sha256 = digest_hex(text);
  auto load_checked = [&](const json& item) {
    const auto path = dir / item.at("file").get<std::string>();
    const auto bytes = read_file(path.string());
    if (digest_hex(bytes) != item.at("sha256").get<std::string>())
      throw FileError(path.string() + ": checksum differs from manifest");
    return deserialize_dataset(bytes);
  };
  if (with_base) d.base = load_checked(m.at("base"));
  std::vector<TaskDataset> tasks;
  std::vector<std::string> styles;
  for (const auto& t : m.at("tasks")) {
    tasks.push_back(load_checked(t));
    styles.push_back(t.at("style").get<std::string>());
  }
  if (cfg.order.empty()) {
    d.tasks = std::move(tasks);
    d.styles = std::move(styles);
  } else {
    d.tasks = reorder(tasks, cfg.order);
    for (auto i : cfg.order) d.styles.push_back(styles[i]);
  }
  return d;
}

// ---- reports ------------------------------------------------------------------

json eval_json(const RunConfig& cfg) {
  return {{"gamma", cfg.train.gamma},
          {"tau", cfg.train.tau},
          {"untrained_fallback", cfg.untrained_fallback},
          {"transfer_zero_shot_row", cfg.transfer_zero_shot_row}};
}

json run_echo(const RunConfig& cfg, const Data& data, const BackboneWeights& w,
              const std::string& backbone_sha, const TrainConfig& tc) {
  json order = json::array();
  for (const auto& t : data.tasks) order.push_back(t.task_id);
  return {{"seed", cfg.seed},
          {"encoder", encoder_json(w.config)},
          {"data_manifest_sha256", data.manifest_sha256},
          {"backbone_sha256", backbone_sha},
          {"train", train_json(tc)},
          {"eval", eval_json(cfg)},
          {"task_order", order}};
}

EvalConfig eval_config(const RunConfig& cfg, const TrainConfig& tc) {
  EvalConfig ec;
  ec.gamma = tc.gamma;
  ec.tau = tc.tau;
  ec.untrained_fallback = cfg.untrained_fallback;
  return ec;
}

Metrics metrics_of(const RunConfig& cfg, const AccuracyMatrix& m) {
  MetricsOptions o;
  o.transfer_includes_zero_shot_row = cfg.transfer_zero_shot_row;
  return compute_metrics(m, o);
}

json metrics_json(const Metrics& r) {
  json per = json::array();
  for (std::size_t j = 0; j < r.last_per_dataset.size(); ++j)
    per.push_back({{"transfer", opt_json(r.transfer_per_dataset[j])},
                   {"avg", r.avg_per_dataset[j]},
                   {"avg_trained", r.avg_trained_per_dataset[j]},
                   {"last", r.last_per_dataset[j]}});
  return {{"transfer", opt_json(r.transfer)},
          {"transfer_dataset_mean", opt_json(r.transfer_dataset_mean)},
          {"zero_shot_transfer", opt_json(r.zero_shot_transfer)},
          {"avg", r.avg},
          {"avg_trained", r.avg_trained},
          {"last", r.last},
          {"per_dataset", per}};
}

json report_json(const json& echo, const std::vector<TaskDataset>& tasks,
                 const std::vector<std::string>& styles, const EvalResult& ev, const Metrics& r) {
  json ids = json::array(), rows = json::array(), values = json::array(), routes = json::array();
  for (std::size_t j = 0; j < tasks.size(); ++j)
    ids.push_back({{"id", tasks[j].task_id}, {"style", styles[j]}, {"test_samples", tasks[j].test.size()}});
  rows.push_back("zero-shot");
  values.push_back(*ev.matrix.zero_shot);
  for (std::size_t i = 0; i < ev.matrix.steps.size(); ++i) {
    rows.push_back("after-" + std::to_string(i + 1));
    values.push_back(ev.matrix.steps[i]);
  }
  for (const auto& row : ev.routes) {
    json out = json::array();
    for (const auto& rt : row)
      out.push_back(rt.fallback ? json{{"fallback", true}, {"similarity", rt.similarity}}
                                : json{{"fallback", false}, {"entry", rt.entry}, {"similarity", rt.similarity}});
    routes.push_back(out);
  }
  return {{"config_hash", digest_hex(echo.dump())},
          {"seed", echo.at("seed")},
          {"config", echo},
          {"tasks", ids},
          {"matrix", {{"rows", rows}, {"values", values}}},
          {"metrics", metrics_json(r)},
          {"routes", routes}};
}

std::string csv_cell(const std::optional<double>& v) { return v ? fmt("%.10g", *v) : ""; }

std::string report_csv(const json& report, const std::vector<TaskDataset>& tasks, const EvalResult& ev,
                       const Metrics& r) {
  std::string s = "# config_hash=" + report.at("config_hash").get<std::string>() +
                  " seed=" + std::to_string(report.at("seed").get<std::uint64_t>()) + "\n";
  s += "row";
  for (const auto& t : tasks) s += "," + t.task_id;
  s += ",mean\n";
  auto line = [&](const std::string& name, const std::vector<std::optional<double>>& v,
                  const std::optional<double>& mean) {
    s += name;
    for (const auto& x : v) s += "," + csv_cell(x);
    s += "," + csv_cell(mean) + "\n";
  };
  auto wrap = [](const std::vector<double>& v) {
    return std::vector<std::optional<double>>(v.begin(), v.end());
  };
  auto mean = [](const std::vector<double>& v) {
    double a = 0.0;
    for (double x : v) a += x;
    return std::optional<double>(a / static_cast<double>(v.size()));
  };
  line("zero-shot", wrap(*ev.matrix.zero_shot), mean(*ev.matrix.zero_shot));
  for (std::size_t i = 0; i < ev.matrix.steps.size(); ++i)
    line("after-" + std::to_string(i + 1), wrap(ev.matrix.steps[i]), mean(ev.matrix.steps[i]));
  line("transfer", r.transfer_per_dataset, r.transfer);
  line("avg", wrap(r.avg_per_dataset), r.avg);
  line("avg_trained", wrap(r.avg_trained_per_dataset), r.avg_trained);
  line("last", wrap(r.last_per_dataset), r.last);
  return s;
}

void print_table(std::ostream& out, const std::vector<TaskDataset>& tasks, const EvalResult& ev,
                 const Metrics& r) {
  out << pad("step", 12, false);
  for (const auto& t : tasks) out << pad(t.task_id, 10, true);
  out << "\n";
  auto row = [&](const std::string& name, const std::vector<double>& v) {
    out << pad(name, 12, false);
    for (double x : v) out << fmt("%10.3f", x);
    out << "\n";
  };
  row("zero-shot", *ev.matrix.zero_shot);
  for (std::size_t i = 0; i < ev.matrix.steps.size(); ++i) row("after-" + std::to_string(i + 1), ev.matrix.steps[i]);
  out << "transfer " << (r.transfer ? fmt("%.4f", *r.transfer) : std::string("-"))
      << "  avg " << fmt("%.4f", r.avg) << "  avg_trained " << fmt("%.4f", r.avg_trained)
      << "  last " << fmt("%.4f", r.last) << "\n";
}

// ---- subcommands --------------------------------------------------------------

BenchmarkConfig bench_config(const RunConfig& cfg) {
  BenchmarkConfig b = cfg.bench;
  b.seed = cfg.seed;
  b.image_size = cfg.encoder.image_size;
  b.channels = cfg.encoder.channels;
  b.vocab_size = cfg.encoder.vocab_size;
  return b;
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  return t;
}

int cmd_gen(const RunConfig& cfg, std::ostream& out) {
  const BenchmarkConfig bc = bench_config(cfg);
  const Benchmark b = gen_benchmark(bc);
  const fs::path dir(cfg.data_dir);
  fs::create_directories(dir);
  auto save = [&](const TaskDataset& d, const std::string& file) {
    const auto bytes = serialize_dataset(d);
    write_file((dir / file).string(), bytes);
    return json{{"id", d.task_id},          {"file", file},
                {"sha256", digest_hex(bytes)}, {"classes", d.class_names},
                {"train", d.train.size()}, {"test", d.test.size()}};
  };
  json manifest = {{"format", "chordprompt-benchmark"},
                   {"version", 1},
                   {"seed", bc.seed},
                   {"config_hash", digest_hex(bench_json(bc).dump())},
                   {"config", bench_json(bc)},
                   {"base", save(b.base, "base.cpds")}};
  json tasks = json::array();
  for (std::size_t i = 0; i < b.tasks.size(); ++i) {
    json t = save(b.tasks[i], "task" + std::to_string(i) + ".cpds");
    t["style"] = style_name(b.styles[i]);
    tasks.push_back(t);
  }
  manifest["tasks"] = tasks;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  out << "wrote " << b.tasks.size() << " tasks and a base set of " << b.base.train.size() << "+"
      << b.base.test.size() << " samples to " << dir.string() << "\n";
  for (std::size_t i = 0; i < b.tasks.size(); ++i)
    out << "  " << b.tasks[i].task_id << "  style " << style_name(b.styles[i]) << "  train "
        << b.tasks[i].train.size() << "  test " << b.tasks[i].test.size() << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  cfg.encoder.validate();
  const Data data = load_data(cfg, true);
  PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed;
  const PretrainResult r = pretrain_base(cfg.encoder, data.base, pc);
  save_backbone(r.weights, cfg.backbone_path);
  const auto bytes = serialize_backbone(r.weights);

  json zs = json::array();
  for (std::size_t i = 0; i < data.tasks.size(); ++i)
    zs.push_back({{"id", data.tasks[i].task_id},
                  {"style", data.styles[i]},
                  {"accuracy", base_accuracy(r.weights, data.tasks[i], data.tasks[i].test)}});
  const json echo = {{"seed", cfg.seed},
                     {"encoder", encoder_json(cfg.encoder)},
                     {"pretrain", pretrain_json(pc)},
                     {"data_manifest_sha256", data.manifest_sha256}};
  json report = {{"config_hash", digest_hex(echo.dump())},
                 {"seed", cfg.seed},
                 {"config", echo},
                 {"status", r.converged ? "converged" : "pretraining-failure"},
                 {"accuracy", r.accuracy},
                 {"iterations", r.iterations},
                 {"backbone_sha256", digest_hex(bytes)},
                 {"zero_shot", zs}};
  if (data.tasks.size() >= 2) {
    const double m = max_cross_key_similarity(r.weights, data.tasks);
    report["max_cross_key_similarity"] = m;
    report["key_margin"] = 1.0 - m;
  }
  write_text(fs::path(cfg.out_dir) / "pretrain.json", report.dump(2) + "\n");

  out << "pretrain: held-out base accuracy " << fmt("%.4f", r.accuracy) << " after " << r.iterations
      << " iterations\n";
  for (const auto& z : zs)
    out << "  zero-shot " << z["id"].get<std::string>() << " (" << z["style"].get<std::string>()
        << ") " << fmt("%.4f", z["accuracy"].get<double>()) << "\n";
  if (!r.converged) {
    err << "pretraining-failure: accuracy " << fmt("%.4f", r.accuracy) << " below target "
        << fmt("%.4f", pc.target_accuracy) << " within " << pc.max_iterations << " iterations\n";
    return kExitPretrainFailure;
  }
  return 0;
}

struct Evaluated {
  json report;
  std::string csv;
  EvalResult ev;
  Metrics metrics;
};

Evaluated evaluate_run(const RunConfig& cfg, const Data& data, const BackboneWeights& w,
                       const std::string& backbone_sha, const TrainConfig& tc, const PromptPool& pool) {
  Evaluated e;
  e.ev = evaluate_matrix(step_snapshots(pool), w, data.tasks, eval_config(cfg, tc));
  e.metrics = metrics_of(cfg, e.ev.matrix);
  e.report = report_json(run_echo(cfg, data, w, backbone_sha, tc), data.tasks, data.styles, e.ev, e.metrics);
  e.csv = report_csv(e.report, data.tasks, e.ev, e.metrics);
  return e;
}

void write_report(const RunConfig& cfg, const Evaluated& e) {
  write_text(fs::path(cfg.out_dir) / "metrics.json", e.report.dump(2) + "\n");
  write_text(fs::path(cfg.out_dir) / "metrics.csv", e.csv);
}

void warn_margin(const BackboneWeights& w, const Data& data, double gamma, std::ostream& err) {
  if (data.tasks.size() < 2) return;
  const double m = max_cross_key_similarity(w, data.tasks);
  if (m >= gamma)
    err << "warning: two task keys have cosine " << fmt("%.4f", m) << " >= gamma " << fmt("%.4f", gamma)
        << "; routing may pick the wrong entry\n";
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Data data = load_data(cfg, false);
  const auto wbytes = read_file(cfg.backbone_path);
  const BackboneWeights w = deserialize_backbone(wbytes);
  const TrainConfig tc = train_config(cfg);
  tc.validate(w.config);
  warn_margin(w, data, tc.gamma, err);

  std::vector<std::vector<double>> traces;
  const PromptPool pool = train_sequence(w, data.tasks, tc, &traces);
  pool_save(pool, cfg.pool_path);
  const Evaluated e = evaluate_run(cfg, data, w, digest_hex(wbytes), tc, pool);
  write_report(cfg, e);

  json log = {{"config_hash", e.report["config_hash"]}, {"seed", cfg.seed}, {"tasks", json::array()}};
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto smooth = ema(traces[i], 50);
    json t = {{"id", data.tasks[i].task_id}, {"iterations", traces[i].size()}};
    if (!traces[i].empty()) {
      t["loss_first"] = traces[i].front();
      t["loss_last"] = traces[i].back();
      t["ema50_last"] = smooth.back();
    }
    t["loss"] = traces[i];
    log["tasks"].push_back(t);
  }
  write_text(fs::path(cfg.out_dir) / "train_log.json", log.dump(2) + "\n");

  out << "trained " << pool.size() << " tasks; pool " << cfg.pool_path << "\n";
  print_table(out, data.tasks, e.ev, e.metrics);
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const Data data = load_data(cfg, false);
  const auto wbytes = read_file(cfg.backbone_path);
  const BackboneWeights w = deserialize_backbone(wbytes);
  const TrainConfig tc = train_config(cfg);
  tc.validate(w.config);
  const PromptPool pool = pool_load(cfg.pool_path);
  if (pool.config_hash() != pool_config_hash(w.config, tc.depth, tc.length))
    throw ContractViolation("eval: pool was not built for this backbone with depth " +
                            std::to_string(tc.depth) + " and length " + std::to_string(tc.length));
  if (pool.size() != data.tasks.size())
    throw ContractViolation("eval: pool holds " + std::to_string(pool.size()) + " entries for " +
                            std::to_string(data.tasks.size()) + " tasks");
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].task_id != data.tasks[i].task_id)
      throw ContractViolation("eval: pool entry " + std::to_string(i) + " is '" + pool[i].task_id +
                              "' but task order has '" + data.tasks[i].task_id + "'");
  const Evaluated e = evaluate_run(cfg, data, w, digest_hex(wbytes), tc, pool);
  write_report(cfg, e);
  print_table(out, data.tasks, e.ev, e.metrics);
  return 0;
}

struct Axis {
  std::string name;
  std::vector<std::string> values;
};

using Setter = std::function<void(TrainConfig&, const std::string&)>;

const std::map<std::string, Setter>& axis_setters() {
  static const std::map<std::string, Setter> m = {
      {"depth", [](TrainConfig& t, const std::string& v) { t.depth = static_cast<std::uint32_t>(std::stoul(v)); }},
      {"plen", [](TrainConfig& t, const std::string& v) { t.length = static_cast<std::uint32_t>(std::stoul(v)); }},
      {"gamma", [](TrainConfig& t, const std::string& v) { t.gamma = std::stod(v); }},
      {"tau", [](TrainConfig& t, const std::string& v) { t.tau = std::stod(v); }},
      {"lr", [](TrainConfig& t, const std::string& v) { t.learning_rate = std::stod(v); }},
      {"iterations", [](TrainConfig& t, const std::string& v) { t.iterations = static_cast<std::uint32_t>(std::stoul(v)); }},
      {"batch", [](TrainConfig& t, const std::string& v) { t.batch_size = static_cast<std::uint32_t>(std::stoul(v)); }},
      {"shots", [](TrainConfig& t, const std::string& v) { t.shots = static_cast<std::uint32_t>(std::stoul(v)); }},
  };
  return m;
}

std::vector<Axis> parse_axes(const std::vector<std::string>& specs) {
  std::vector<Axis> axes;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
      throw ContractViolation("--axis: expected name=v1,v2,... but got '" + s + "'");
    Axis a{s.substr(0, eq), {}};
    if (!axis_setters().count(a.name))
      throw ContractViolation("--axis: unknown axis '" + a.name +
                              "' (depth, plen, gamma, tau, lr, iterations, batch, shots)");
    std::size_t start = eq + 1;
    while (start <= s.size()) {
      const auto comma = s.find(',', start);
      const auto v = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (v.empty()) throw ContractViolation("--axis " + a.name + ": empty value");
      a.values.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    for (const auto& b : axes)
      if (b.name == a.name) throw ContractViolation("--axis " + a.name + " given twice");
    axes.push_back(std::move(a));
  }
  if (axes.empty()) throw ContractViolation("sweep: at least one --axis is required");
  return axes;
}

int cmd_sweep(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto axes = parse_axes(cfg.axes);
  const Data data = load_data(cfg, false);
  const auto wbytes = read_file(cfg.backbone_path);
  const BackboneWeights w = deserialize_backbone(wbytes);
  const std::string wsha = digest_hex(wbytes);

  std::vector<std::vector<std::string>> grid{{}};
  for (const auto& a : axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& g : grid)
      for (const auto& v : a.values) {
        next.push_back(g);
        next.back().push_back(v);
      }
    grid = std::move(next);
  }
  // validate every point before spending time on any of them
  std::vector<TrainConfig> configs;
  for (const auto& point : grid) {
    TrainConfig tc = train_config(cfg);
    for (std::size_t k = 0; k < axes.size(); ++k) {
      try {
        axis_setters().at(axes[k].name)(tc, point[k]);
      } catch (const std::logic_error&) {
        throw ContractViolation("--axis " + axes[k].name + ": bad value '" + point[k] + "'");
      }
    }
    tc.validate(w.config);
    configs.push_back(tc);
  }
  if (!configs.empty()) warn_margin(w, data, configs.front().gamma, err);

  json rows = json::array();
  std::string csv = "# seed=" + std::to_string(cfg.seed) + "\n";
  for (const auto& a : axes) csv += a.name + ",";
  csv += "transfer,avg,avg_trained,last,config_hash\n";
  for (const auto& a : axes) out << a.name << "\t";
  out << "transfer\tavg\tavg_trained\tlast\n";
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const PromptPool pool = train_sequence(w, data.tasks, configs[p]);
    const Evaluated e = evaluate_run(cfg, data, w, wsha, configs[p], pool);
    json point = json::object();
    for (std::size_t k = 0; k < axes.size(); ++k) point[axes[k].name] = grid[p][k];
    const auto& m = e.metrics;
    rows.push_back({{"point", point},
                    {"config_hash", e.report["config_hash"]},
                    {"transfer", opt_json(m.transfer)},
                    {"avg", m.avg},
                    {"avg_trained", m.avg_trained},
                    {"last", m.last},
                    {"matrix", e.report["matrix"]["values"]}});
    for (const auto& v : grid[p]) csv += v + ",";
    csv += csv_cell(m.transfer) + "," + fmt("%.10g", m.avg) + "," + fmt("%.10g", m.avg_trained) + "," +
           fmt("%.10g", m.last) + "," + e.report["config_hash"].get<std::string>() + "\n";
    for (const auto& v : grid[p]) out << v << "\t";
    out << (m.transfer ? fmt("%.4f", *m.transfer) : std::string("-")) << "\t" << fmt("%.4f", m.avg) << "\t"
        << fmt("%.4f", m.avg_trained) << "\t" << fmt("%.4f", m.last) << "\n";
  }
  json axes_json = json::object();
  for (const auto& a : axes) axes_json[a.name] = a.values;
  const json base_echo = run_echo(cfg, data, w, wsha, train_config(cfg));
  const json report = {{"config_hash", digest_hex(base_echo.dump())},
                       {"seed", cfg.seed},
                       {"config", base_echo},
                       {"axes", axes_json},
                       {"rows", rows}};
  write_text(fs::path(cfg.out_dir) / "sweep.json", report.dump(2) + "\n");
  write_text(fs::path(cfg.out_dir) / "sweep.csv", csv);
  return 0;
}

double frobenius(const std::vector<Tensor>& ts) {
  double s = 0.0;
  for (const auto& t : ts)
    for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

int cmd_inspect(const RunConfig& cfg, bool as_json, std::ostream& out) {
  const PromptPool pool = pool_load(cfg.pool_path);
  json entries = json::array();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& e = pool[i];
    entries.push_back({{"index", i},
                       {"task_id", e.task_id},
                       {"creation_step", e.creation_step},
                       {"depth", e.prompts.depth()},
                       {"length", e.prompts.length()},
                       {"key_dim", e.key.vector.size()},
                       {"prompt_text_norm", frobenius(e.prompts.text)},
                       {"prompt_visual_norm", frobenius(e.prompts.visual)},
                       {"aligner_v2t_norm", frobenius(e.aligner.v2t)},
                       {"aligner_t2v_norm", frobenius(e.aligner.t2v)}});
  }
  json cos = json::array();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < pool.size(); ++j)
      row.push_back(cosine(pool[i].key.vector.data(), pool[j].key.vector.data()));
    cos.push_back(row);
  }
  if (as_json) {
    out << json{{"config_hash", to_hex(pool.config_hash())}, {"entries", entries}, {"key_cosines", cos}}.dump(2)
        << "\n";
    return 0;
  }
  out << "pool " << cfg.pool_path << "\n  config hash " << to_hex(pool.config_hash()) << "\n  entries "
      << pool.size() << "\n";
  for (const auto& e : entries)
    out << "  [" << e["index"].get<std::size_t>() << "] " << e["task_id"].get<std::string>() << "  step "
        << e["creation_step"].get<std::uint32_t>() << "  depth " << e["depth"].get<std::size_t>() << "  length "
        << e["length"].get<std::size_t>() << "  |T| " << fmt("%.4f", e["prompt_text_norm"].get<double>())
        << "  |V| " << fmt("%.4f", e["prompt_visual_norm"].get<double>()) << "  |A_v2t| "
        << fmt("%.4f", e["aligner_v2t_norm"].get<double>()) << "  |A_t2v| "
        << fmt("%.4f", e["aligner_t2v_norm"].get<double>()) << "\n";
  if (pool.size() > 1) {
    out << "  key cosines\n";
    for (const auto& row : cos) {
      out << "   ";
      for (const auto& v : row) out << fmt(" %7.4f", v.get<double>());
      out << "\n";
    }
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  CLI::App app{"ChordPrompt continual prompt learning on a synthetic multi-domain benchmark",
               args.empty() ? "chordprompt" : args[0]};
  app.set_config("--config", "", "INI config file; command-line flags override it");
  app.require_subcommand(1);
  app.fallthrough();
  // a later flag overrides an earlier one
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  app.add_option("--seed", cfg.seed, "Seed for generation, pretraining and training")->capture_default_str();
  app.add_option("--data", cfg.data_dir, "Benchmark directory")->capture_default_str();
  app.add_option("--backbone", cfg.backbone_path, "Backbone checkpoint (CPBB)")->capture_default_str();
  app.add_option("--pool", cfg.pool_path, "Prompt pool file (CPP1)")->capture_default_str();
  app.add_option("--out", cfg.out_dir, "Report directory")->capture_default_str();

  auto& e = cfg.encoder;
  app.add_option("--layers", e.layers)->capture_default_str()->group("Encoder");
  app.add_option("--text-width", e.text_width)->capture_default_str()->group("Encoder");
  app.add_option("--vision-width", e.vision_width)->capture_default_str()->group("Encoder");
  app.add_option("--heads", e.heads)->capture_default_str()->group("Encoder");
  app.add_option("--max-text-tokens", e.max_text_tokens)->capture_default_str()->group("Encoder");
  app.add_option("--image-size", e.image_size)->capture_default_str()->group("Encoder");
  app.add_option("--patch-size", e.patch_size)->capture_default_str()->group("Encoder");
  app.add_option("--vocab-size", e.vocab_size)->capture_default_str()->group("Encoder");
  app.add_option("--joint-width", e.joint_width)->capture_default_str()->group("Encoder");
  app.add_option("--mlp-hidden", e.mlp_hidden)->capture_default_str()->group("Encoder");

  auto& b = cfg.bench;
  app.add_option("--domains", b.domains)->capture_default_str()->group("Benchmark");
  app.add_option("--classes", b.classes, "Classes per domain")->capture_default_str()->group("Benchmark");
  app.add_option("--samples-per-class", b.samples_per_class)->capture_default_str()->group("Benchmark");
  app.add_option("--base-samples-per-class", b.base_samples_per_class)->capture_default_str()->group("Benchmark");
  app.add_option("--test-fraction", b.test_fraction)->capture_default_str()->group("Benchmark");
  app.add_option("--style-strength", b.style_strength)->capture_default_str()->group("Benchmark");

  auto& p = cfg.pretrain;
  app.add_option("--pretrain-iterations", p.max_iterations)->capture_default_str()->group("Pretraining");
  app.add_option("--pretrain-lr", p.learning_rate)->capture_default_str()->group("Pretraining");
  app.add_option("--pretrain-tau", p.tau)->capture_default_str()->group("Pretraining");
  app.add_option("--pretrain-batch-classes", p.batch_classes)->capture_default_str()->group("Pretraining");
  app.add_option("--target-accuracy", p.target_accuracy)->capture_default_str()->group("Pretraining");
  app.add_option("--eval-every", p.eval_every)->capture_default_str()->group("Pretraining");

  auto& t = cfg.train;
  app.add_option("--iterations", t.iterations, "Iterations per task")->capture_default_str()->group("Training");
  app.add_option("--few-shot-iterations", t.few_shot_iterations)->capture_default_str()->group("Training");
  app.add_option("--lr", t.learning_rate)->capture_default_str()->group("Training");
  app.add_option("--wd", t.weight_decay)->capture_default_str()->group("Training");
  app.add_option("--batch", t.batch_size)->capture_default_str()->group("Training");
  app.add_option("--tau", t.tau)->capture_default_str()->group("Training");
  app.add_option("--depth", t.depth, "Prompted layers, front to back")->capture_default_str()->group("Training");
  app.add_option("--plen", t.length, "Prompt length")->capture_default_str()->group("Training");
  app.add_option("--gamma", t.gamma, "Routing threshold; above 1 always falls back")->capture_default_str()->group("Training");
  app.add_flag("--few-shot", t.few_shot, "Train on k shots per class")->group("Training");
  app.add_option("--shots", t.shots)->capture_default_str()->group("Training");
  app.add_option("--order", cfg.order, "Task order as a permutation, e.g. 2,0,1")->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->group("Training");
  app.add_flag("--untrained-fallback", cfg.untrained_fallback,
               "Route tasks not yet trained to the base model without the threshold")->group("Evaluation");
  app.add_flag("--transfer-zero-shot-row", cfg.transfer_zero_shot_row,
               "Count the zero-shot row in Transfer")->group("Evaluation");

  auto* gen = app.add_subcommand("gen", "Generate the synthetic benchmark into --data");
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the base dual encoder and save --backbone");
  auto* train = app.add_subcommand("train", "Train prompts task by task, save --pool, write metrics");
  auto* eval = app.add_subcommand("eval", "Evaluate a saved pool and write metrics");
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate over a grid of settings");
  sweep->add_option("--axis", cfg.axes, "name=v1,v2,... (depth, plen, gamma, tau, lr, iterations, batch, shots)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->required();
  bool as_json = false;
  auto* inspect = app.add_subcommand("inspect-pool", "Print the entries of --pool");
  inspect->add_flag("--json", as_json, "Print JSON");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("chordprompt");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& ex) {
    return app.exit(ex, out, err);
  }

  try {
    if (*gen) return cmd_gen(cfg, out);
    if (*pretrain) return cmd_pretrain(cfg, out, err);
    if (*train) return cmd_train(cfg, out, err);
    if (*eval) return cmd_eval(cfg, out);
    if (*sweep) return cmd_sweep(cfg, out, err);
    if (*inspect) return cmd_inspect(cfg, as_json, out);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitError;
  } catch (const nlohmann::json::exception& ex) {
    err << "error: malformed manifest: " << ex.what() << "\n";
    return kExitError;
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitError;
  }
  return kExitError;
}

}  // namespace chordprompt::cli
