#pragma once

#include <filesystem>
#include <string>

#include "mshield/model.hpp"

namespace mshield {

/// A checkpoint is a directory holding manifest.json plus one RTEN file per
/// named tensor. `extra_json` (an object) is merged into the manifest.
void save_racnn(const std::filesystem::path& dir, const RacnnParams& params, const std::string& extra_json = "{}");
RacnnParams load_racnn(const std::filesystem::path& dir);

void save_baseline(const std::filesystem::path& dir, const BaselineParams& params,
                   const std::string& extra_json = "{}");
BaselineParams load_baseline(const std::filesystem::path& dir);

/// Raw manifest.json of a checkpoint.
std::string checkpoint_manifest(const std::filesystem::path& dir);

}  // namespace mshield
