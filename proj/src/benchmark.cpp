// SPDX-License-Identifier: Apache-2.0
#include "chordprompt/benchmark.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "chordprompt/binary_io.hpp"

namespace chordprompt {

void TaskDataset::validate(const EncoderConfig& c) const {
  CP_REQUIRE(!class_names.empty(), "dataset '" + task_id + "': no classes");
  const Shape img{c.image_size, c.image_size, c.channels};
  for (const auto* split : {&train, &test})
    for (const auto& s : *split) {
      CP_REQUIRE(s.label < class_names.size(),
                 "dataset '" + task_id + "': label " + std::to_string(s.label) + " out of range");
      CP_REQUIRE(s.image.shape() == img, "dataset '" + task_id + "': image shape " +
                                             shape_str(s.image.shape()) + ", expected " +
                                             shape_str(img));
    }
  for (const auto& n : class_names) {
    CP_REQUIRE(!n.empty() && n.size() <= c.max_text_tokens,
               "dataset '" + task_id + "': class name length outside 1.." +
                   std::to_string(c.max_text_tokens));
    for (auto t : n) CP_REQUIRE(t < c.vocab_size, "dataset '" + task_id + "': token out of vocab");
  }
}

const char* style_name(Style s) {
  switch (s) {
    case Style::Neutral: return "neutral";
    case Style::ChannelPermute: return "channel-permute";
    case Style::Inverted: return "inverted";
    case Style::Patterned: return "patterned";
  }
  return "?";
}

void BenchmarkConfig::validate() const {
  CP_REQUIRE(domains > 0, "benchmark: domains must be positive");
  CP_REQUIRE(classes > 0, "benchmark: classes must be positive");
  CP_REQUIRE(samples_per_class >= 2, "benchmark: samples_per_class must be at least 2");
  CP_REQUIRE(base_samples_per_class >= 2, "benchmark: base_samples_per_class must be at least 2");
  CP_REQUIRE(test_fraction > 0.0 && test_fraction < 1.0, "benchmark: test_fraction outside (0, 1)");
  CP_REQUIRE(style_strength >= 0.0 && style_strength <= 1.0,
             "benchmark: style_strength outside [0, 1]");
  CP_REQUIRE(channels == 3, "benchmark: images must have 3 channels");
  CP_REQUIRE(image_size >= 8, "benchmark: image_size must be at least 8");
  CP_REQUIRE(std::uint64_t{domains} * classes <= kShapes * kTextures,
             "benchmark: domains*classes exceeds the " + std::to_string(kShapes * kTextures) +
                 " distinct (shape, texture) classes");
  CP_REQUIRE(2 + std::uint64_t{domains} * (kShapes + kTextures) <= vocab_size,
             "benchmark: vocab_size too small for " + std::to_string(domains) + " domains");
}

namespace {

bool in_shape(std::uint32_t shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (shape) {
    case 0: return ax <= 0.8 * r && ay <= 0.8 * r;                        // square
    case 1: return dx * dx + dy * dy <= r * r;                            // disk
    case 2: return (ax <= r / 3 && ay <= r) || (ay <= r / 3 && ax <= r);  // plus
    case 3: return dy >= -r && dy <= r && ax <= (dy + r) / 2;             // triangle
    case 4: {                                                             // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    default: return ax + ay <= r;  // diamond
  }
}

bool texture_on(std::uint32_t texture, int x, int y, int px, int py) {
  switch (texture) {
    case 0: return true;
    case 1: return ((y + py) / 2) % 2 == 0;
    case 2: return ((x + px) / 2) % 2 == 0;
    case 3: return (((x + px) / 2) + ((y + py) / 2)) % 2 == 0;
    case 4: return ((x + y + px) / 2) % 2 == 0;
    default: return (x + px) % 3 == 0 && (y + py) % 3 == 0;
  }
}

}  // namespace

Tensor render_sample(std::uint32_t shape, std::uint32_t texture, Style style, double strength,
                     std::uint32_t domain_seed, const BenchmarkConfig& c, Rng& rng) {
  const int n = static_cast<int>(c.image_size);
  const double unit = c.image_size / 16.0;
  const double cx = (n - 1) / 2.0 + rng.uniform(-2.0, 2.0) * unit;
  const double cy = (n - 1) / 2.0 + rng.uniform(-2.0, 2.0) * unit;
  const double r = rng.uniform(4.0, 6.0) * unit;
  const int px = static_cast<int>(rng.below(4)), py = static_cast<int>(rng.below(4));
  static constexpr std::array<double, 3> kFg{1.0, 0.5, 0.25};
  static constexpr std::array<double, 3> kBg{0.1, 0.1, 0.1};

  // Domain-fixed parameters of the style transform.
  Rng drng = Rng(domain_seed).derive(0x5717);
  std::array<std::size_t, 3> perm{1, 2, 0};
  if (drng.below(2)) perm = {2, 0, 1};
  std::array<double, 3> tint{}, phase{};
  for (auto& t : tint) t = drng.uniform(-0.15, 0.15);
  for (auto& p : phase) p = drng.uniform(0.0, 6.283185307179586);
  const double fx = drng.uniform(0.6, 1.4), fy = drng.uniform(0.6, 1.4);

  Tensor img({c.image_size, c.image_size, c.channels});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const bool inside = in_shape(shape, x - cx, y - cy, r);
      const double a = inside ? (texture_on(texture, x, y, px, py) ? 1.0 : 0.3) : 0.0;
      std::array<double, 3> px3{};
      for (std::size_t ch = 0; ch < 3; ++ch) px3[ch] = kBg[ch] + a * (kFg[ch] - kBg[ch]);
      std::array<double, 3> styled = px3;
      switch (style) {
        case Style::Neutral: break;
        case Style::ChannelPermute:
          for (std::size_t ch = 0; ch < 3; ++ch) styled[ch] = px3[perm[ch]] + tint[ch];
          break;
        case Style::Inverted:
          for (std::size_t ch = 0; ch < 3; ++ch) styled[ch] = 1.0 - px3[ch];
          break;
        case Style::Patterned:
          for (std::size_t ch = 0; ch < 3; ++ch)
            styled[ch] = px3[ch] + 0.5 * std::sin(fx * x + fy * y + phase[ch]);
          break;
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = (1.0 - strength) * px3[ch] + strength * styled[ch];
        img[(static_cast<std::size_t>(y) * c.image_size + static_cast<std::size_t>(x)) * 3 + ch] =
            v + rng.normal(0.0, 0.03);
      }
    }
  return img;
}

namespace {

struct ClassSpec {
  std::uint32_t shape, texture;
};

TokenSeq class_name(std::uint32_t domain, const ClassSpec& k) {
  const std::uint32_t base = 2 + domain * (kShapes + kTextures);
  return {base + k.shape, base + kShapes + k.texture, kEndToken};
}

void fill_split(TaskDataset& d, const std::vector<ClassSpec>& classes, std::uint32_t per_class,
                double test_fraction, Style style, double strength, std::uint32_t domain_seed,
                const BenchmarkConfig& c, Rng& rng) {
  const auto n_test = std::max<std::uint32_t>(
      1, static_cast<std::uint32_t>(std::lround(per_class * test_fraction)));
  const std::uint32_t n_train = per_class - std::min(per_class - 1, n_test);
  for (std::uint32_t i = 0; i < per_class; ++i)
    for (std::uint32_t k = 0; k < classes.size(); ++k) {
      Sample s{render_sample(classes[k].shape, classes[k].texture, style, strength, domain_seed, c,
                             rng),
               k};
      (i < n_train ? d.train : d.test).push_back(std::move(s));
    }
}

}  // namespace

Benchmark gen_benchmark(const BenchmarkConfig& c) {
  c.validate();
  Rng root(c.seed);
  Rng pick = root.derive(1);
  const auto pairs = pick.permutation(kShapes * kTextures);

  Benchmark b;
  b.base.task_id = "base";
  std::vector<std::vector<ClassSpec>> domain_classes(c.domains);
  for (std::uint32_t d = 0; d < c.domains; ++d) {
    for (std::uint32_t k = 0; k < c.classes; ++k) {
      const auto p = static_cast<std::uint32_t>(pairs[d * c.classes + k]);
      domain_classes[d].push_back({p / kTextures, p % kTextures});
    }
  }

  static constexpr std::array<Style, 3> kCycle{Style::ChannelPermute, Style::Inverted,
                                               Style::Patterned};
  for (std::uint32_t d = 0; d < c.domains; ++d) {
    TaskDataset t;
    t.task_id = "domain" + std::to_string(d);
    for (const auto& k : domain_classes[d]) t.class_names.push_back(class_name(d, k));
    const Style style = kCycle[d % kCycle.size()];
    const auto dseed = static_cast<std::uint32_t>(splitmix64(c.seed ^ (0xD0A1ull + d)));
    Rng r = root.derive(100 + d);
    fill_split(t, domain_classes[d], c.samples_per_class, c.test_fraction, style, c.style_strength,
               dseed, c, r);
    b.tasks.push_back(std::move(t));
    b.styles.push_back(style);
  }

  // Base set: every domain class, neutral style, labelled in one joint class list.
  std::vector<ClassSpec> all;
  for (std::uint32_t d = 0; d < c.domains; ++d)
    for (const auto& k : domain_classes[d]) {
      b.base.class_names.push_back(class_name(d, k));
      all.push_back(k);
    }
  Rng r = root.derive(2);
  fill_split(b.base, all, c.base_samples_per_class, c.test_fraction, Style::Neutral, 0.0, 0, c, r);
  return b;
}

TaskDataset few_shot_subset(const TaskDataset& d, std::uint32_t k, Rng& rng) {
  CP_REQUIRE(k > 0, "few_shot_subset: k must be positive");
  TaskDataset out;
  out.task_id = d.task_id;
  out.class_names = d.class_names;
  out.test = d.test;
  const auto order = rng.permutation(d.train.size());
  std::vector<std::uint32_t> taken(d.class_names.size(), 0);
  std::vector<std::size_t> keep;
  for (auto i : order)
    if (taken[d.train[i].label] < k) {
      ++taken[d.train[i].label];
      keep.push_back(i);
    }
  std::sort(keep.begin(), keep.end());
  for (auto i : keep) out.train.push_back(d.train[i]);
  return out;
}

std::vector<TaskDataset> reorder(const std::vector<TaskDataset>& tasks,
                                 const std::vector<std::size_t>& order) {
  CP_REQUIRE(order.size() == tasks.size(), "task order has " + std::to_string(order.size()) +
                                               " entries for " + std::to_string(tasks.size()) +
                                               " tasks");
  std::vector<bool> seen(tasks.size(), false);
  std::vector<TaskDataset> out;
  for (auto i : order) {
    CP_REQUIRE(i < tasks.size() && !seen[i], "task order is not a permutation");
    seen[i] = true;
    out.push_back(tasks[i]);
  }
  return out;
}

// ---- persistence ------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[4] = {'C', 'P', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

void write_split(ByteWriter& out, const std::vector<Sample>& split) {
  out.u32(static_cast<std::uint32_t>(split.size()));
  for (const auto& s : split) {
    out.u32(s.label);
    out.tensor(s.image);
  }
}

std::vector<Sample> read_split(ByteReader& in) {
  const std::uint32_t n = in.u32();
  std::vector<Sample> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    Sample s;
    s.label = in.u32();
    s.image = in.tensor(3);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const TaskDataset& d) {
  ByteWriter out;
  out.raw(std::string_view(kDatasetMagic, 4));
  out.u32(kDatasetVersion);
  out.u16(static_cast<std::uint16_t>(d.task_id.size()));
  out.raw(d.task_id);
  out.u32(static_cast<std::uint32_t>(d.class_names.size()));
  for (const auto& n : d.class_names) {
    out.u32(static_cast<std::uint32_t>(n.size()));
    for (auto t : n) out.u32(t);
  }
  write_split(out, d.train);
  write_split(out, d.test);
  return out.take();
}

TaskDataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (in.str(4) != std::string_view(kDatasetMagic, 4)) throw FormatError("bad dataset magic", 0);
  const std::size_t vat = in.offset();
  if (const auto v = in.u32(); v != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(v), vat);
  TaskDataset d;
  d.task_id = in.str(in.u16());
  const std::uint32_t nc = in.u32();
  for (std::uint32_t k = 0; k < nc; ++k) {
    const std::size_t at = in.offset();
    const std::uint32_t len = in.u32();
    if (len > in.remaining() / 4) throw FormatError("class name longer than payload", at);
    TokenSeq n(len);
    for (auto& t : n) t = in.u32();
    d.class_names.push_back(std::move(n));
  }
  d.train = read_split(in);
  d.test = read_split(in);
  if (!in.at_end()) throw FormatError("trailing bytes after dataset", in.offset());
  for (const auto* split : {&d.train, &d.test})
    for (const auto& s : *split)
      if (s.label >= nc) throw FormatError("sample label out of range", 0);
  return d;
}

void save_dataset(const TaskDataset& d, const std::string& path) {
  write_file(path, serialize_dataset(d));
}

TaskDataset load_dataset(const std::string& path) { return deserialize_dataset(read_file(path)); }

}  // namespace chordprompt
