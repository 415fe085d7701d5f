#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace mshield {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
/// Hash of every regular file under `dir` (names and contents, sorted by path).
std::string hash_directory(const std::filesystem::path& dir);
std::string hash_file(const std::filesystem::path& path);

}  // namespace mshield
