#include "mshield/rten.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "mshield/error.hpp"

namespace mshield {

static_assert(std::endian::native == std::endian::little, "RTEN I/O assumes a little-endian host");

namespace {
constexpr std::string_view kMagic = "RTEN";
}

std::string encode_rten(const Tensor& tensor, std::string_view name) {
  nlohmann::json header;
  header["dtype"] = "f32";
  header["shape"] = tensor.shape();
  header["name"] = std::string(name);
  const std::string h = header.dump();
  const auto hlen = static_cast<std::uint32_t>(h.size());
  std::string out;
  out.reserve(8 + h.size() + tensor.numel() * 4);
  out.append(kMagic);
  char len[4];
  std::memcpy(len, &hlen, 4);
  out.append(len, 4);
  out.append(h);
  out.append(reinterpret_cast<const char*>(tensor.values().data()), tensor.numel() * sizeof(float));
  return out;
}

NamedTensor decode_rten(std::string_view bytes) {
  if (bytes.size() < 8) throw FormatError("RTEN: file shorter than the 8-byte preamble", bytes.size());
  if (bytes.substr(0, 4) != kMagic) throw FormatError("RTEN: bad magic", 0);
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 4, 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(hlen)) {
    throw FormatError("RTEN: header length " + std::to_string(hlen) + " runs past end of file", bytes.size());
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("RTEN: header is not JSON: ") + e.what(), 8 + e.byte);
  }
  if (!header.is_object() || header.value("dtype", "") != "f32") {
    throw FormatError("RTEN: header must declare dtype f32", 8);
  }
  if (!header.contains("shape") || !header["shape"].is_array()) throw FormatError("RTEN: header lacks shape", 8);
  Shape shape;
  for (const auto& e : header["shape"]) {
    if (!e.is_number_integer() || e.get<std::int64_t>() <= 0) {
      throw FormatError("RTEN: shape entries must be positive integers", 8);
    }
    shape.push_back(e.get<std::int64_t>());
  }
  if (shape.empty()) throw FormatError("RTEN: empty shape", 8);
  const std::size_t payload_at = 8 + hlen;
  const std::size_t n = shape_numel(shape);
  const std::size_t want = n * sizeof(float);
  if (bytes.size() - payload_at != want) {
    throw FormatError("RTEN: payload holds " + std::to_string(bytes.size() - payload_at) + " bytes, shape " +
                          shape_string(shape) + " needs " + std::to_string(want),
                      std::min(bytes.size(), payload_at + want));
  }
  std::vector<float> values(n);
  std::memcpy(values.data(), bytes.data() + payload_at, want);
  return NamedTensor{header.value("name", ""), Tensor(std::move(shape), std::move(values))};
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_rten(const std::filesystem::path& path, const Tensor& tensor, std::string_view name) {
  write_file_atomic(path, encode_rten(tensor, name));
}

NamedTensor read_rten(const std::filesystem::path& path) {
  try {
    return decode_rten(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace mshield
