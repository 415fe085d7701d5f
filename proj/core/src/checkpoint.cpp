#include "mshield/checkpoint.hpp"

#include <json.hpp>

#include "mshield/error.hpp"
#include "mshield/rten.hpp"

namespace mshield {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Visitor = std::function<void(const std::function<void(const std::string&, Tensor&)>&)>;

void write_tensors(const fs::path& dir, json& manifest, const Visitor& visit) {
  fs::create_directories(dir);
  json files = json::object();
  visit([&](const std::string& name, Tensor& t) {
    const auto file = name + ".rten";
    write_rten(dir / file, t, name);
    files[name] = file;
  });
  manifest["tensors"] = files;
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

void read_tensors(const fs::path& dir, const json& manifest, const Visitor& visit) {
  const auto& files = manifest.at("tensors");
  visit([&](const std::string& name, Tensor& t) {
    if (!files.contains(name)) throw FormatError((dir / "manifest.json").string() + ": missing tensor " + name, 0);
    const bool grad = t.requires_grad();
    Tensor loaded = read_rten(dir / files.at(name).get<std::string>()).tensor;
    if (loaded.shape() != t.shape()) {
      throw FormatError(name + ": stored shape " + shape_string(loaded.shape()) + ", model expects " +
                            shape_string(t.shape()),
                        8);
    }
    t = std::move(loaded);
    t.set_requires_grad(grad);
  });
}

json read_manifest(const fs::path& dir, const std::string& kind) {
  json j;
  try {
    j = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw FormatError((dir / "manifest.json").string() + ": not JSON", e.byte);
  }
  if (j.value("kind", "") != kind) {
    throw FormatError((dir / "manifest.json").string() + ": expected a " + kind + " checkpoint", 0);
  }
  return j;
}

json base_manifest(const std::string& extra_json, const std::string& kind, const std::string& preset,
                   const Shape& input, int classes) {
  json j = json::parse(extra_json);
  j["kind"] = kind;
  j["preset"] = preset;
  j["input_shape"] = input;
  j["num_classes"] = classes;
  return j;
}

}  // namespace

void save_racnn(const fs::path& dir, const RacnnParams& params, const std::string& extra_json) {
  auto& p = const_cast<RacnnParams&>(params);
  json j = base_manifest(extra_json, "racnn", p.preset, p.phi.input_shape(), p.num_classes);
  j["df"] = p.feature_dim();
  j["freeze_phi"] = p.freeze_phi;
  write_tensors(dir, j, [&](const auto& fn) { p.visit_state(fn); });
}

RacnnParams load_racnn(const fs::path& dir) {
  const json j = read_manifest(dir, "racnn");
  const auto preset =
      make_preset(j.at("preset").get<std::string>(), j.at("input_shape").get<Shape>(), j.at("num_classes").get<int>());
  RacnnParams p = init_racnn(preset, 0);
  if (j.value("freeze_phi", false)) {
    auto specs = preset.phi_prime;
    specs.push_back(preset.phi.back());
    p.phi = Sequential<float>(preset.input_shape, specs, 0, "init/phi");
    for (std::size_t i = 0; i < preset.phi_prime.size(); ++i) p.phi.layer(i).frozen = true;
    p.freeze_phi = true;
  }
  if (p.feature_dim() != j.at("df").get<std::int64_t>()) {
    throw FormatError((dir / "manifest.json").string() + ": df disagrees with preset " + preset.name, 0);
  }
  read_tensors(dir, j, [&](const auto& fn) { p.visit_state(fn); });
  return p;
}

void save_baseline(const fs::path& dir, const BaselineParams& params, const std::string& extra_json) {
  auto& p = const_cast<BaselineParams&>(params);
  json j = base_manifest(extra_json, "baseline", p.preset, p.phi_prime.input_shape(), p.num_classes);
  j["dk"] = p.phi_prime.output_dim();
  write_tensors(dir, j, [&](const auto& fn) { p.visit_state(fn); });
}

BaselineParams load_baseline(const fs::path& dir) {
  const json j = read_manifest(dir, "baseline");
  const auto preset =
      make_preset(j.at("preset").get<std::string>(), j.at("input_shape").get<Shape>(), j.at("num_classes").get<int>());
  BaselineParams p = init_baseline(preset, 0);
  read_tensors(dir, j, [&](const auto& fn) { p.visit_state(fn); });
  return p;
}

std::string checkpoint_manifest(const fs::path& dir) { return read_file(dir / "manifest.json"); }

}  // namespace mshield
