#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mshield/tensor.hpp"

namespace mshield {

struct PixelRange {
  float min = 0.0f;
  float max = 1.0f;
  float width() const noexcept { return max - min; }
};

struct LabeledExample {
  Tensor image;  // [C,H,W] for images, [d] for vectors
  int label = 0;
};

/// Labelled examples stored as one [N, ...] tensor plus integer labels.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  PixelRange range;
  /// Set on any dataset whose images went through `augment`. Retrieval
  /// indexes refuse to key such data.
  bool augmented = false;

  std::size_t size() const noexcept { return labels.size(); }
  Shape example_shape() const;
  LabeledExample example(std::size_t i) const;
  /// Stack the examples `ids` into a [len(ids), ...] batch.
  Tensor gather(std::span<const std::uint32_t> ids) const;
  std::vector<int> gather_labels(std::span<const std::uint32_t> ids) const;
  /// Throws ContractError when shapes, labels or pixel values are inconsistent.
  void validate() const;
  bool is_image() const { return images.rank() == 4; }
};

enum class CandidateProvenance { subset_of_train, separate_set };

/// The pool indexed by the retrieval engine. Candidate ids are positions in
/// `data`; that order is stable across save/load.
struct CandidateSet {
  Dataset data;
  CandidateProvenance provenance = CandidateProvenance::subset_of_train;
};

struct DatasetSplits {
  Dataset train;
  CandidateSet candidates;
  Dataset test;
};

/// Two concentric spheres in R^d, one class each, affinely rescaled into
/// [0,1]^d by x -> (x + R) / 2R with R = outer_radius + noise.
struct TwoSpheresConfig {
  int dim = 64;
  double inner_radius = 1.0;
  double outer_radius = 1.3;
  int n_per_class = 1000;
  int n_test_per_class = 500;
  /// Radial jitter: each norm is radius + U(-noise, noise).
  double noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  double bound() const noexcept { return outer_radius + noise; }
};

DatasetSplits generate_two_spheres(const TwoSpheresConfig& cfg);

/// Synthetic 3x32x32 image classes in CIFAR-10 layout: each class is a
/// (horizontal or vertical, spatial frequency) pair of a noisy colour
/// grating with random phase, contrast and tint, overlaid on a clutter grating
/// of random angle and frequency. Flips and crops keep the class.
struct PatternsConfig {
  int n_per_class = 500;
  int n_test_per_class = 100;
  int num_classes = 10;
  int image_size = 32;
  double noise = 0.025;
  std::uint64_t seed = 0;

  void validate() const;
};

DatasetSplits generate_patterns(const PatternsConfig& cfg);

/// Random horizontal flip (p = 0.5) then a random crop after 4-pixel
/// padding with the in-range value closest to zero. Identity on vectors.
LabeledExample augment(const LabeledExample& example, std::uint64_t seed, PixelRange range = {});
/// Gathers `ids` and augments each example with seed derive_seed(seed, "augment", id).
Tensor augmented_batch(const Dataset& data, std::span<const std::uint32_t> ids, std::uint64_t seed);

/// Reads a dataset manifest (a JSON file, or a directory holding manifest.json).
Dataset load_dataset(const std::filesystem::path& manifest);
/// Writes `dir`/manifest.json, `dir`/imgs.rten and `dir`/labels.rten.
/// Returns the manifest path.
std::filesystem::path save_dataset(const Dataset& data, const std::filesystem::path& dir);

}  // namespace mshield
