#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mshield/attacks.hpp"
#include "mshield/datasets.hpp"
#include "mshield/retrieval.hpp"
#include "mshield/training.hpp"

namespace mshield {

struct DataSection {
  /// two-spheres | patterns | manifest
  std::string kind = "two-spheres";
  TwoSpheresConfig spheres;
  PatternsConfig patterns;
  std::filesystem::path train_manifest, test_manifest, candidate_manifest;
};

struct VariantConfig {
  std::string name;
  int k = 10;
  int n_ce = 1;
  int n_mu = 0;
};

struct AttackSection {
  std::vector<Scenario> scenarios{Scenario::direct, Scenario::retrieval};
  std::vector<AttackSpec> grid;
  /// Test examples attacked, per grid entry (0 = all).
  std::vector<std::size_t> limits;
  int ifgsm_steps = 10;
  bool targeted = false;
  DeepFoolConfig deepfool;
  LbfgsAttackConfig lbfgs;
  BoundaryConfig boundary;
};

/// One experiment: every section mirrors a module's configuration.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out;
  DataSection data;
  std::string preset = "mlp-spheres";
  PretrainConfig pretrain;
  LshConfig retrieval;
  TrainConfig train;
  std::vector<VariantConfig> variants;
  AttackSection attacks;
  std::size_t eval_limit = 0;

  /// Canonical JSON of each section, used for stage hashes.
  std::map<std::string, std::string> sections;
  /// Hash of the whole canonical document.
  std::string config_hash;
};

/// Parses and validates an experiment document. Unknown keys are rejected.
/// Relative paths resolve against `base_dir`.
ExperimentConfig parse_experiment_config(const std::string& json_text, const std::filesystem::path& base_dir = ".");
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

const std::vector<std::string>& pipeline_stages();

struct StageRecord {
  std::string hash;
  std::filesystem::path path;
  bool skipped = false;
};

struct PipelineResult {
  int exit_code = 0;
  std::string failed_stage;
  std::string error;
  std::map<std::string, StageRecord> stages;
};

using LogFn = std::function<void(const std::string&)>;

/// Runs the selected stages (all when `only` is empty) in dependency order.
/// A stage whose directory carries a stage.json with the expected hash is
/// skipped. Stages outside the selection must already exist with the
/// expected hash. Work happens in `<stage>.partial` and is renamed on
/// success; run.json maps each stage to its hash and directory.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::vector<std::string>& only = {},
                            const LogFn& log = {});

/// Dataset splits as configured (generated or loaded from manifests).
DatasetSplits materialize_data(const DataSection& data, std::uint64_t seed);

}  // namespace mshield
