#include "mshield/retrieval.hpp"

#include <algorithm>
#include <functional>
#include <json.hpp>
#include <numeric>

#include "mshield/error.hpp"
#include "mshield/rng.hpp"
#include "mshield/rten.hpp"

namespace mshield {

namespace fs = std::filesystem;

double distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw DimensionError("distance: key lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

Tensor IdentityExtractor::extract(const Tensor& batch) const {
  const Shape inner(batch.shape().begin() + 1, batch.shape().end());
  if (batch.rank() < 2 || inner != input_shape_) {
    throw DimensionError("identity extractor expects [N]+" + shape_string(input_shape_) + ", got " +
                         shape_string(batch.shape()));
  }
  return batch.reshaped(Shape{batch.dim(0), key_dim()});
}

Tensor extract_key(const Tensor& x, const KeyExtractor& extractor) {
  if (x.shape() != extractor.input_shape()) {
    throw DimensionError("extract_key: input " + shape_string(x.shape()) + " vs extractor input " +
                         shape_string(extractor.input_shape()));
  }
  Shape batched{1};
  batched.insert(batched.end(), x.shape().begin(), x.shape().end());
  Tensor keys = extractor.extract(x.reshaped(batched));
  return keys.reshaped(Shape{extractor.key_dim()});
}

std::string to_string(IndexMode mode) { return mode == IndexMode::lsh ? "lsh" : "exhaustive"; }

IndexMode index_mode_from_string(const std::string& s) {
  if (s == "lsh") return IndexMode::lsh;
  if (s == "exhaustive") return IndexMode::exhaustive;
  throw ConfigError("unknown index mode \"" + s + "\" (expected lsh or exhaustive)");
}

void LshConfig::validate() const {
  if (tables < 1) throw ConfigError("lsh: tables must be >= 1");
  if (bits < 1 || bits > 24) throw ConfigError("lsh: bits must be in [1, 24]");
  if (min_probe_radius < 0) throw ConfigError("lsh: min_probe_radius must be >= 0");
}

RetrievalIndex::RetrievalIndex(Tensor keys, std::vector<int> labels, LshConfig cfg)
    : cfg_(cfg), keys_(std::move(keys)), labels_(std::move(labels)) {
  cfg_.validate();
  if (keys_.rank() != 2) throw DimensionError("index keys must be [M, dk], got " + shape_string(keys_.shape()));
  if (keys_.dim(0) != static_cast<std::int64_t>(labels_.size())) {
    throw DimensionError("index has " + std::to_string(keys_.dim(0)) + " keys but " + std::to_string(labels_.size()) +
                         " labels");
  }
  if (labels_.empty()) throw ContractError("cannot index an empty candidate set");
  if (!keys_.all_finite()) throw NumericError("retrieval keys must be finite");
  build_tables();
}

void RetrievalIndex::build_tables() {
  const auto m = size();
  const auto dk = static_cast<std::size_t>(key_dim());
  const auto rows = static_cast<std::int64_t>(cfg_.tables) * cfg_.bits;
  auto rng = make_rng(cfg_.seed, "lsh/projection");
  std::normal_distribution<float> normal(0.0f, 1.0f);
  projection_ = Tensor(Shape{rows, static_cast<std::int64_t>(dk)});
  for (auto& v : projection_.values()) v = normal(rng);

  center_.assign(dk, 0.0f);
  std::vector<double> acc(dk, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    auto k = key(static_cast<std::uint32_t>(i));
    for (std::size_t j = 0; j < dk; ++j) acc[j] += k[j];
  }
  for (std::size_t j = 0; j < dk; ++j) center_[j] = static_cast<float>(acc[j] / static_cast<double>(m));

  const std::size_t buckets = std::size_t{1} << cfg_.bits;
  signatures_.assign(m * static_cast<std::size_t>(cfg_.tables), 0);
  offsets_.assign(static_cast<std::size_t>(cfg_.tables), std::vector<std::uint32_t>(buckets + 1, 0));
  bucket_ids_.assign(static_cast<std::size_t>(cfg_.tables), std::vector<std::uint32_t>(m));
  for (int t = 0; t < cfg_.tables; ++t) {
    auto& off = offsets_[static_cast<std::size_t>(t)];
    for (std::size_t i = 0; i < m; ++i) {
      const auto sig = signature_of(key(static_cast<std::uint32_t>(i)), t);
      signatures_[i * static_cast<std::size_t>(cfg_.tables) + static_cast<std::size_t>(t)] = sig;
      ++off[sig + 1];
    }
    std::partial_sum(off.begin(), off.end(), off.begin());
    std::vector<std::uint32_t> cursor(off.begin(), off.end() - 1);
    auto& ids = bucket_ids_[static_cast<std::size_t>(t)];
    for (std::size_t i = 0; i < m; ++i) {
      const auto sig = signatures_[i * static_cast<std::size_t>(cfg_.tables) + static_cast<std::size_t>(t)];
      ids[cursor[sig]++] = static_cast<std::uint32_t>(i);
    }
  }
}

std::span<const float> RetrievalIndex::key(std::uint32_t id) const {
  const auto dk = static_cast<std::size_t>(key_dim());
  return keys_.values().subspan(static_cast<std::size_t>(id) * dk, dk);
}

std::uint32_t RetrievalIndex::signature(std::uint32_t id, int table) const {
  return signatures_.at(static_cast<std::size_t>(id) * static_cast<std::size_t>(cfg_.tables) +
                        static_cast<std::size_t>(table));
}

std::uint32_t RetrievalIndex::signature_of(std::span<const float> k, int table) const {
  const auto dk = static_cast<std::size_t>(key_dim());
  if (k.size() != dk) {
    throw DimensionError("query key has " + std::to_string(k.size()) + " entries, index keys have " +
                         std::to_string(dk));
  }
  std::uint32_t sig = 0;
  auto proj = projection_.values();
  for (int b = 0; b < cfg_.bits; ++b) {
    const auto row = static_cast<std::size_t>(table * cfg_.bits + b) * dk;
    double dot = 0;
    for (std::size_t j = 0; j < dk; ++j) dot += static_cast<double>(proj[row + j]) * (k[j] - center_[j]);
    if (dot >= 0) sig |= (1u << b);
  }
  return sig;
}

std::span<const std::uint32_t> RetrievalIndex::bucket(int table, std::uint32_t sig) const {
  const auto& off = offsets_.at(static_cast<std::size_t>(table));
  const auto& ids = bucket_ids_[static_cast<std::size_t>(table)];
  return std::span<const std::uint32_t>(ids).subspan(off.at(sig), off.at(sig + 1) - off[sig]);
}

namespace {

/// Calls fn(s ^ mask) for every mask with exactly `radius` of the low `bits` set.
void for_each_at_hamming(std::uint32_t s, int bits, int radius, const std::function<void(std::uint32_t)>& fn) {
  std::function<void(int, int, std::uint32_t)> rec = [&](int start, int left, std::uint32_t mask) {
    if (left == 0) {
      fn(s ^ mask);
      return;
    }
    for (int b = start; b <= bits - left; ++b) rec(b + 1, left - 1, mask | (1u << b));
  };
  rec(0, radius, 0);
}

}  // namespace

std::vector<std::uint32_t> RetrievalIndex::probe(std::span<const float> k, int radius) const {
  std::vector<char> seen(size(), 0);
  std::vector<std::uint32_t> out;
  for (int r = 0; r <= std::min(radius, cfg_.bits); ++r) {
    for (int t = 0; t < cfg_.tables; ++t) {
      for_each_at_hamming(signature_of(k, t), cfg_.bits, r, [&](std::uint32_t sig) {
        for (auto id : bucket(t, sig)) {
          if (!seen[id]) {
            seen[id] = 1;
            out.push_back(id);
          }
        }
      });
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

RetrievedSet RetrievalIndex::rank(std::vector<std::uint32_t> ids, std::span<const float> k, std::size_t count) const {
  std::vector<std::pair<double, std::uint32_t>> scored;
  scored.reserve(ids.size());
  for (auto id : ids) scored.emplace_back(distance(k, key(id)), id);
  const auto take = std::min(count, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end());
  RetrievedSet out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const auto id = scored[i].second;
    out.push_back(Neighbor{id, labels_[id], scored[i].first, key(id)});
  }
  return out;
}

RetrievedSet RetrievalIndex::query(std::span<const float> k, std::size_t count) const {
  return query(k, count, cfg_.mode);
}

RetrievedSet RetrievalIndex::query(std::span<const float> k, std::size_t count, IndexMode mode) const {
  if (count == 0 || count > size()) {
    throw ConfigError("query: K = " + std::to_string(count) + " must be in [1, " + std::to_string(size()) + "]");
  }
  if (k.size() != static_cast<std::size_t>(key_dim())) {
    throw DimensionError("query key has " + std::to_string(k.size()) + " entries, index keys have " +
                         std::to_string(key_dim()));
  }
  if (mode == IndexMode::exhaustive) {
    std::vector<std::uint32_t> all(size());
    std::iota(all.begin(), all.end(), 0u);
    return rank(std::move(all), k, count);
  }
  std::vector<char> seen(size(), 0);
  std::vector<std::uint32_t> gathered;
  std::vector<std::uint32_t> sigs(static_cast<std::size_t>(cfg_.tables));
  for (int t = 0; t < cfg_.tables; ++t) sigs[static_cast<std::size_t>(t)] = signature_of(k, t);
  for (int r = 0; r <= cfg_.bits; ++r) {
    for (int t = 0; t < cfg_.tables; ++t) {
      for_each_at_hamming(sigs[static_cast<std::size_t>(t)], cfg_.bits, r, [&](std::uint32_t sig) {
        for (auto id : bucket(t, sig)) {
          if (!seen[id]) {
            seen[id] = 1;
            gathered.push_back(id);
          }
        }
      });
    }
    if (r >= cfg_.min_probe_radius && gathered.size() >= count) break;
  }
  return rank(std::move(gathered), k, count);
}

void RetrievalIndex::save(const fs::path& dir, const std::string& extra_json) const {
  fs::create_directories(dir);
  write_rten(dir / "keys.rten", keys_, "keys");
  std::vector<float> lv(labels_.begin(), labels_.end());
  const Shape label_shape{static_cast<std::int64_t>(lv.size())};
  write_rten(dir / "labels.rten", Tensor(label_shape, std::move(lv)), "labels");
  nlohmann::json j = nlohmann::json::parse(extra_json);
  j["tables"] = cfg_.tables;
  j["bits"] = cfg_.bits;
  j["seed"] = cfg_.seed;
  j["mode"] = to_string(cfg_.mode);
  j["min_probe_radius"] = cfg_.min_probe_radius;
  j["dk"] = key_dim();
  j["count"] = size();
  write_file_atomic(dir / "index.json", j.dump(2) + "\n");
}

std::string RetrievalIndex::metadata(const fs::path& dir) { return read_file(dir / "index.json"); }

RetrievalIndex RetrievalIndex::load(const fs::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "index.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError((dir / "index.json").string() + ": not JSON", e.byte);
  }
  LshConfig cfg;
  cfg.tables = j.at("tables").get<int>();
  cfg.bits = j.at("bits").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.mode = index_mode_from_string(j.at("mode").get<std::string>());
  cfg.min_probe_radius = j.value("min_probe_radius", cfg.min_probe_radius);
  Tensor keys = read_rten(dir / "keys.rten").tensor;
  const Tensor labels = read_rten(dir / "labels.rten").tensor;
  if (keys.rank() != 2 || keys.dim(1) != j.at("dk").get<std::int64_t>() ||
      keys.dim(0) != j.at("count").get<std::int64_t>()) {
    throw FormatError((dir / "keys.rten").string() + ": shape " + shape_string(keys.shape()) +
                          " disagrees with index.json",
                      8);
  }
  std::vector<int> lv(labels.values().begin(), labels.values().end());
  return RetrievalIndex(std::move(keys), std::move(lv), cfg);
}

RetrievalIndex build_index(const CandidateSet& candidates, const KeyExtractor& extractor, const LshConfig& cfg) {
  const Dataset& data = candidates.data;
  if (data.augmented) throw ContractError("build_index: candidate keys must come from un-augmented data");
  if (data.size() == 0) throw ContractError("build_index: empty candidate set");
  if (data.example_shape() != extractor.input_shape()) {
    throw DimensionError("build_index: candidates are " + shape_string(data.example_shape()) +
                         " but the extractor expects " + shape_string(extractor.input_shape()));
  }
  constexpr std::size_t chunk = 256;
  const auto dk = extractor.key_dim();
  std::vector<float> keys(data.size() * static_cast<std::size_t>(dk));
  std::vector<std::uint32_t> ids;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const auto end = std::min(data.size(), start + chunk);
    ids.resize(end - start);
    std::iota(ids.begin(), ids.end(), static_cast<std::uint32_t>(start));
    const Tensor k = extractor.extract(data.gather(ids));
    std::copy(k.values().begin(), k.values().end(), keys.begin() + static_cast<std::ptrdiff_t>(start * dk));
  }
  return RetrievalIndex(Tensor(Shape{static_cast<std::int64_t>(data.size()), dk}, std::move(keys)), data.labels, cfg);
}

}  // namespace mshield
