#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "mshield/tensor.hpp"

namespace mshield {

/// "RTEN" tensor container: 4-byte magic, u32 little-endian header length,
/// UTF-8 JSON header {"dtype":"f32","shape":[...],"name":"..."}, then the
/// raw little-endian f32 payload.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::string encode_rten(const Tensor& tensor, std::string_view name);
/// Throws FormatError carrying the byte offset of the first inconsistency.
NamedTensor decode_rten(std::string_view bytes);

void write_rten(const std::filesystem::path& path, const Tensor& tensor, std::string_view name);
NamedTensor read_rten(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes via a sibling temporary and rename, so readers never see half a file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace mshield
