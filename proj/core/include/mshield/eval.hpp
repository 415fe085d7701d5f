#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mshield/attacks.hpp"

namespace mshield {

/// ||x - x~||^2 / (dim * (pix_max - pix_min)^2).
double normalized_l2(std::span<const float> x, std::span<const float> x_tilde, PixelRange range);
double normalized_l2(const Tensor& x, const Tensor& x_tilde, PixelRange range);

/// Fraction of rows at `strength` whose attack did not flip the decision;
/// nullopt when no row has that strength.
std::optional<double> accuracy_at_strength(std::span<const OutcomeRow> rows, double strength);

/// Identifies the artifacts a set of numbers was computed from.
struct Fingerprint {
  std::string model;
  std::string checkpoint_hash;
  std::string index_hash;
  std::uint64_t seed = 0;

  bool operator==(const Fingerprint&) const = default;
};

std::string fingerprint_json(const Fingerprint& f);
Fingerprint parse_fingerprint(const std::string& json);

struct CleanResult {
  Fingerprint fingerprint;
  double accuracy = 0;
  std::size_t n = 0;
};

/// Clean evaluation CSV: model,accuracy,n,checkpoint_hash,index_hash,seed.
void write_clean_csv(const std::filesystem::path& path, const std::vector<CleanResult>& rows);
std::vector<CleanResult> read_clean_csv(const std::filesystem::path& path);

struct CurvePoint {
  double strength = 0;
  double accuracy = 0;
  /// Mean normalized L2 of the successful perturbations (0 when none).
  double mean_l2bar = 0;
  std::size_t n = 0;
};

struct RobustnessCurve {
  std::string model;
  std::string attack;
  Scenario scenario = Scenario::direct;
  Fingerprint fingerprint;
  std::vector<CurvePoint> points;
};

/// Points in increasing strength; every point must cover the same examples.
RobustnessCurve make_curve(const Fingerprint& fp, const std::string& attack, Scenario scenario,
                           std::span<const OutcomeRow> rows);

struct EvalReport {
  std::vector<CleanResult> clean;
  std::vector<RobustnessCurve> curves;
};

/// An outcome file plus the fingerprint from its sidecar.
struct OutcomeFile {
  Fingerprint fingerprint;
  std::vector<OutcomeRow> rows;
};

/// Sidecar path `<file>.meta.json`.
std::filesystem::path meta_path(const std::filesystem::path& outcomes);
void write_outcome_meta(const std::filesystem::path& outcomes, const Fingerprint& fp);
OutcomeFile read_outcome_file(const std::filesystem::path& outcomes);

/// Merges clean results and outcome files. Throws DependencyError when two
/// inputs describe the same model under different fingerprints, or disagree
/// on the index or seed.
EvalReport build_report(const std::vector<CleanResult>& clean, const std::vector<OutcomeFile>& outcomes);

/// clean.csv, table_<scenario>.csv (model,clean,attack,strength,accuracy,l2bar,n)
/// and one <attack>_<scenario>.svg per attack.
void render_report(const EvalReport& report, const std::filesystem::path& dir);
std::string render_table_csv(const EvalReport& report, Scenario scenario);
std::string render_svg(const EvalReport& report, const std::string& attack, Scenario scenario);
/// Reads a rendered table back into curves (clean values are attached to the report's clean list).
EvalReport parse_table_csv(const std::string& csv, Scenario scenario);

}  // namespace mshield
