#include "mshield/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numbers>
#include <numeric>

#include "mshield/error.hpp"
#include "mshield/rng.hpp"
#include "mshield/rten.hpp"

namespace mshield {

namespace fs = std::filesystem;

Shape Dataset::example_shape() const {
  if (images.rank() < 2) throw DimensionError("dataset images must be [N, ...], got " + shape_string(images.shape()));
  return Shape(images.shape().begin() + 1, images.shape().end());
}

LabeledExample Dataset::example(std::size_t i) const {
  if (i >= size()) throw ContractError("example " + std::to_string(i) + " out of range");
  return LabeledExample{images.slice_leading(static_cast<std::int64_t>(i)).reshaped(example_shape()), labels[i]};
}

Tensor Dataset::gather(std::span<const std::uint32_t> ids) const {
  const Shape inner = example_shape();
  const std::size_t per = shape_numel(inner);
  Shape shape{static_cast<std::int64_t>(ids.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<float> values(ids.size() * per);
  auto src = images.values();
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= size()) throw ContractError("example id " + std::to_string(ids[k]) + " out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[k] * per), per,
                values.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return Tensor(std::move(shape), std::move(values));
}

std::vector<int> Dataset::gather_labels(std::span<const std::uint32_t> ids) const {
  std::vector<int> out(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) out[k] = labels.at(ids[k]);
  return out;
}

void Dataset::validate() const {
  if (images.rank() < 2) throw ContractError("dataset images must be [N, ...]");
  if (images.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw ContractError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                        std::to_string(labels.size()) + " labels");
  }
  if (num_classes < 1) throw ContractError("dataset num_classes must be >= 1");
  if (!(range.max > range.min)) throw ContractError("dataset pixel range must have pix_max > pix_min");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " of example " + std::to_string(i) +
                          " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  for (float v : images.values()) {
    if (!(v >= range.min && v <= range.max)) {
      throw ContractError("pixel value " + std::to_string(v) + " outside [" + std::to_string(range.min) + ", " +
                          std::to_string(range.max) + "]");
    }
  }
}

void TwoSpheresConfig::validate() const {
  if (dim < 2) throw ConfigError("two-spheres: dim must be >= 2, got " + std::to_string(dim));
  if (!(inner_radius > 0) || !(outer_radius > 0)) throw ConfigError("two-spheres: radii must be positive");
  if (inner_radius == outer_radius) throw ConfigError("two-spheres: radii must differ");
  if (n_per_class < 1 || n_test_per_class < 0) throw ConfigError("two-spheres: bad sample counts");
  if (noise < 0 || noise * 2 >= std::abs(outer_radius - inner_radius)) {
    throw ConfigError("two-spheres: noise must be >= 0 and keep the shells disjoint");
  }
}

namespace {

Dataset sample_spheres(const TwoSpheresConfig& cfg, int per_class, Rng& rng) {
  const auto n = static_cast<std::size_t>(per_class) * 2;
  const auto d = static_cast<std::size_t>(cfg.dim);
  const double bound = cfg.bound();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-cfg.noise, cfg.noise);
  std::vector<float> values(n * d);
  std::vector<int> labels(n);
  std::vector<double> u(d);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    double norm2 = 0;
    for (auto& x : u) {
      x = normal(rng);
      norm2 += x * x;
    }
    const double radius = (label == 0 ? cfg.inner_radius : cfg.outer_radius) + (cfg.noise > 0 ? jitter(rng) : 0.0);
    const double s = radius / std::sqrt(norm2);
    for (std::size_t j = 0; j < d; ++j) {
      const double scaled = (u[j] * s + bound) / (2 * bound);
      values[i * d + j] = static_cast<float>(std::clamp(scaled, 0.0, 1.0));
    }
    labels[i] = label;
  }
  Dataset out;
  out.images = Tensor(Shape{static_cast<std::int64_t>(n), cfg.dim}, std::move(values));
  out.labels = std::move(labels);
  out.num_classes = 2;
  return out;
}

Dataset sample_patterns(const PatternsConfig& cfg, int per_class, Rng& rng) {
  const int s = cfg.image_size;
  const auto n = static_cast<std::size_t>(per_class) * static_cast<std::size_t>(cfg.num_classes);
  const std::size_t per = 3 * static_cast<std::size_t>(s * s);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> values(n * per);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(cfg.num_classes));
    const double theta = (label % 2 == 0 ? 0.0 : std::numbers::pi / 2) + (unit(rng) - 0.5) * 0.16;
    const double freq = (2.0 + 1.5 * (label / 2)) * (0.92 + 0.16 * unit(rng));
    const double phase = 2 * std::numbers::pi * unit(rng);
    const double amp = 0.02 + 0.025 * unit(rng);
    // Class-independent clutter grating at any angle and frequency.
    const double clutter_theta = std::numbers::pi * unit(rng);
    const double clutter_freq = 1.5 + 8.0 * unit(rng);
    const double clutter_phase = 2 * std::numbers::pi * unit(rng);
    const double clutter_amp = 0.02 + 0.025 * unit(rng);
    const double offset = (unit(rng) - 0.5) * 0.2;
    double tint[3];
    for (auto& t : tint) t = 0.4 + 0.6 * unit(rng);
    const double c = std::cos(theta), sn = std::sin(theta);
    const double cc = std::cos(clutter_theta), cs = std::sin(clutter_theta);
    double clutter_tint[3];
    for (auto& t : clutter_tint) t = 0.4 + 0.6 * unit(rng);
    float* img = values.data() + i * per;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double wave = std::sin(2 * std::numbers::pi * freq * (x * c + y * sn) / s + phase);
        const double clutter = std::sin(2 * std::numbers::pi * clutter_freq * (x * cc + y * cs) / s + clutter_phase);
        for (int ch = 0; ch < 3; ++ch) {
          const double v = 0.5 + offset + amp * tint[ch] * wave + clutter_amp * clutter_tint[ch] * clutter +
                           cfg.noise * normal(rng);
          img[(ch * s + y) * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    labels[i] = label;
  }
  Dataset out;
  out.images = Tensor(Shape{static_cast<std::int64_t>(n), 3, s, s}, std::move(values));
  out.labels = std::move(labels);
  out.num_classes = cfg.num_classes;
  return out;
}

/// Reorders examples with a seeded permutation so that prefixes are class-mixed.
Dataset shuffled(Dataset d, Rng& rng) {
  std::vector<std::uint32_t> order(d.size());
  std::iota(order.begin(), order.end(), 0u);
  std::shuffle(order.begin(), order.end(), rng);
  Dataset out;
  out.images = d.gather(order);
  out.labels = d.gather_labels(order);
  out.num_classes = d.num_classes;
  out.range = d.range;
  return out;
}

}  // namespace

DatasetSplits generate_two_spheres(const TwoSpheresConfig& cfg) {
  cfg.validate();
  auto train_rng = make_rng(cfg.seed, "two-spheres/train");
  auto test_rng = make_rng(cfg.seed, "two-spheres/test");
  DatasetSplits out;
  out.train = shuffled(sample_spheres(cfg, cfg.n_per_class, train_rng), train_rng);
  if (cfg.n_test_per_class > 0) out.test = shuffled(sample_spheres(cfg, cfg.n_test_per_class, test_rng), test_rng);
  out.candidates = CandidateSet{out.train, CandidateProvenance::subset_of_train};
  return out;
}

void PatternsConfig::validate() const {
  if (num_classes < 2 || num_classes > 10) throw ConfigError("patterns: num_classes must be in [2, 10]");
  if (image_size < 8) throw ConfigError("patterns: image_size must be >= 8");
  if (n_per_class < 1 || n_test_per_class < 0) throw ConfigError("patterns: bad sample counts");
  if (noise < 0) throw ConfigError("patterns: noise must be >= 0");
}

DatasetSplits generate_patterns(const PatternsConfig& cfg) {
  cfg.validate();
  auto train_rng = make_rng(cfg.seed, "patterns/train");
  auto test_rng = make_rng(cfg.seed, "patterns/test");
  DatasetSplits out;
  out.train = shuffled(sample_patterns(cfg, cfg.n_per_class, train_rng), train_rng);
  if (cfg.n_test_per_class > 0) out.test = shuffled(sample_patterns(cfg, cfg.n_test_per_class, test_rng), test_rng);
  out.candidates = CandidateSet{out.train, CandidateProvenance::subset_of_train};
  return out;
}

LabeledExample augment(const LabeledExample& example, std::uint64_t seed, PixelRange range) {
  if (example.image.rank() != 3) return example;
  constexpr int pad = 4;
  const auto c = example.image.dim(0), h = example.image.dim(1), w = example.image.dim(2);
  Rng rng(seed);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> shift(0, 2 * pad);
  const bool flip = coin(rng) == 1;
  const int dy = shift(rng) - pad, dx = shift(rng) - pad;
  const float fill = std::clamp(0.0f, range.min, range.max);
  const auto src = example.image.values();
  Tensor out(example.image.shape(), fill);
  auto dst = out.values();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sy = y + dy;
        const std::int64_t sx0 = x + dx;
        if (sy < 0 || sy >= h || sx0 < 0 || sx0 >= w) continue;
        const std::int64_t sx = flip ? w - 1 - sx0 : sx0;
        dst[static_cast<std::size_t>((ch * h + y) * w + x)] = src[static_cast<std::size_t>((ch * h + sy) * w + sx)];
      }
  return LabeledExample{std::move(out), example.label};
}

Tensor augmented_batch(const Dataset& data, std::span<const std::uint32_t> ids, std::uint64_t seed) {
  Tensor batch = data.gather(ids);
  if (!data.is_image()) return batch;
  const std::size_t per = shape_numel(data.example_shape());
  auto dst = batch.values();
  for (std::size_t k = 0; k < ids.size(); ++k) {
    LabeledExample ex{Tensor(data.example_shape(), std::vector<float>(dst.begin() + static_cast<std::ptrdiff_t>(k * per),
                                                                      dst.begin() + static_cast<std::ptrdiff_t>((k + 1) * per))),
                      0};
    auto aug = augment(ex, derive_seed(seed, "augment", ids[k]), data.range);
    std::copy(aug.image.values().begin(), aug.image.values().end(), dst.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return batch;
}

Dataset load_dataset(const fs::path& manifest_in) {
  const fs::path manifest = fs::is_directory(manifest_in) ? manifest_in / "manifest.json" : manifest_in;
  const std::string text = read_file(manifest);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(manifest.string() + ": manifest is not JSON", e.byte);
  }
  for (const char* key : {"images", "labels", "num_classes"}) {
    if (!j.contains(key)) throw FormatError(manifest.string() + ": manifest lacks \"" + key + "\"", 0);
  }
  const fs::path base = manifest.parent_path();
  Dataset d;
  d.images = read_rten(base / j["images"].get<std::string>()).tensor;
  const Tensor labels = read_rten(base / j["labels"].get<std::string>()).tensor;
  d.num_classes = j["num_classes"].get<int>();
  d.range.min = j.value("pix_min", 0.0f);
  d.range.max = j.value("pix_max", 1.0f);
  if (labels.rank() != 1) throw FormatError("labels tensor must be [N], got " + shape_string(labels.shape()), 8);
  if (d.images.rank() < 2 || d.images.dim(0) != labels.dim(0)) {
    throw FormatError("images " + shape_string(d.images.shape()) + " do not match labels " +
                          shape_string(labels.shape()),
                      8);
  }
  d.labels.resize(labels.numel());
  for (std::size_t i = 0; i < labels.numel(); ++i) {
    const float v = labels[i];
    if (v != std::floor(v) || v < 0 || v >= static_cast<float>(d.num_classes)) {
      throw ContractError("label " + std::to_string(v) + " of example " + std::to_string(i) + " outside [0, " +
                          std::to_string(d.num_classes) + ")");
    }
    d.labels[i] = static_cast<int>(v);
  }
  d.validate();
  return d;
}

fs::path save_dataset(const Dataset& data, const fs::path& dir) {
  data.validate();
  fs::create_directories(dir);
  std::vector<float> lv(data.labels.begin(), data.labels.end());
  write_rten(dir / "imgs.rten", data.images, "images");
  const Shape label_shape{static_cast<std::int64_t>(lv.size())};
  write_rten(dir / "labels.rten", Tensor(label_shape, std::move(lv)), "labels");
  nlohmann::json j;
  j["images"] = "imgs.rten";
  j["labels"] = "labels.rten";
  j["num_classes"] = data.num_classes;
  j["pix_min"] = data.range.min;
  j["pix_max"] = data.range.max;
  const auto path = dir / "manifest.json";
  write_file_atomic(path, j.dump(2) + "\n");
  return path;
}

}  // namespace mshield
