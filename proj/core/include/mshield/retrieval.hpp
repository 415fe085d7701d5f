#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mshield/datasets.hpp"
#include "mshield/tensor.hpp"

namespace mshield {

/// Squared Euclidean distance between two retrieval keys.
double distance(std::span<const float> a, std::span<const float> b);

/// Maps a batch of inputs [N, ...] to retrieval keys [N, dk].
class KeyExtractor {
 public:
  virtual ~KeyExtractor() = default;
  virtual Tensor extract(const Tensor& batch) const = 0;
  virtual Shape input_shape() const = 0;
  virtual std::int64_t key_dim() const = 0;
};

/// phi'(x) = flatten(x).
class IdentityExtractor final : public KeyExtractor {
 public:
  explicit IdentityExtractor(Shape input_shape) : input_shape_(std::move(input_shape)) {}
  Tensor extract(const Tensor& batch) const override;
  Shape input_shape() const override { return input_shape_; }
  std::int64_t key_dim() const override { return static_cast<std::int64_t>(shape_numel(input_shape_)); }

 private:
  Shape input_shape_;
};

/// Key of a single example (no batch axis).
Tensor extract_key(const Tensor& x, const KeyExtractor& extractor);

enum class IndexMode { lsh, exhaustive };

std::string to_string(IndexMode mode);
IndexMode index_mode_from_string(const std::string& s);

struct LshConfig {
  int tables = 8;
  int bits = 12;
  std::uint64_t seed = 0;
  IndexMode mode = IndexMode::exhaustive;
  /// Hamming radius always probed before the ">= K gathered" stop rule applies.
  int min_probe_radius = 4;

  void validate() const;
};

struct Neighbor {
  std::uint32_t id = 0;
  int label = 0;
  double distance = 0;
  std::span<const float> key;
};

/// Exactly K neighbours, ascending by (distance, id).
using RetrievedSet = std::vector<Neighbor>;

/// Keys of every candidate plus T sign-random-projection hash tables.
///
/// Table t hashes a key to the signs of rows [t*b, (t+1)*b) of a standard
/// normal projection R (seeded) applied to (key - mean key). Everything but
/// the keys themselves is recomputed from (seed, keys) on load.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  RetrievalIndex(Tensor keys, std::vector<int> labels, LshConfig cfg);

  /// Top-K under the index's configured mode.
  RetrievedSet query(std::span<const float> key, std::size_t k) const;
  RetrievedSet query(std::span<const float> key, std::size_t k, IndexMode mode) const;

  /// Candidate ids found in buckets within Hamming radius <= `radius` of the
  /// query signature, over all tables, ascending by id.
  std::vector<std::uint32_t> probe(std::span<const float> key, int radius) const;

  const LshConfig& config() const noexcept { return cfg_; }
  std::size_t size() const noexcept { return labels_.size(); }
  std::int64_t key_dim() const noexcept { return keys_.rank() == 2 ? keys_.dim(1) : 0; }
  const Tensor& keys() const noexcept { return keys_; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  std::span<const float> key(std::uint32_t id) const;
  const Tensor& projection() const noexcept { return projection_; }
  std::uint32_t signature(std::uint32_t id, int table) const;
  std::uint32_t signature_of(std::span<const float> key, int table) const;
  /// Candidate ids stored in one bucket.
  std::span<const std::uint32_t> bucket(int table, std::uint32_t signature) const;

  /// Writes index.json, keys.rten and labels.rten. `extra` is merged into
  /// index.json (provenance fields such as source paths and hashes).
  void save(const std::filesystem::path& dir, const std::string& extra_json = "{}") const;
  static RetrievalIndex load(const std::filesystem::path& dir);
  /// Raw index.json contents of a saved index.
  static std::string metadata(const std::filesystem::path& dir);

 private:
  void build_tables();
  RetrievedSet rank(std::vector<std::uint32_t> ids, std::span<const float> key, std::size_t k) const;

  LshConfig cfg_;
  Tensor keys_;
  std::vector<int> labels_;
  Tensor projection_;
  std::vector<float> center_;
  std::vector<std::uint32_t> signatures_;  // [count, tables]
  std::vector<std::vector<std::uint32_t>> offsets_;
  std::vector<std::vector<std::uint32_t>> bucket_ids_;
};

/// Extracts clean keys for every candidate and indexes them.
/// Refuses augmented candidate data.
RetrievalIndex build_index(const CandidateSet& candidates, const KeyExtractor& extractor, const LshConfig& cfg);

}  // namespace mshield
