#include "mshield/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <json.hpp>
#include <set>

#include "mshield/checkpoint.hpp"
#include "mshield/error.hpp"
#include "mshield/eval.hpp"
#include "mshield/hashing.hpp"
#include "mshield/rten.hpp"

namespace mshield {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key \"" + k + "\"");
  }
}

template <class T>
T get(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

json section(const json& root, const char* name) {
  return root.contains(name) ? root.at(name) : json::object();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("experiment config is not valid JSON (byte " + std::to_string(e.byte) + ")");
  }
  check_keys(root, {"seed", "out", "data", "model", "pretrain", "retrieval", "train", "attacks", "eval"}, "config");
  ExperimentConfig cfg;
  cfg.seed = get<std::uint64_t>(root, "seed", 0, "config");
  cfg.out = resolve(base_dir, get<std::string>(root, "out", "run", "config"));

  const json data = section(root, "data");
  check_keys(data,
             {"kind", "dim", "inner_radius", "outer_radius", "n_per_class", "n_test_per_class", "noise", "num_classes",
              "image_size", "train", "test", "candidates"},
             "data");
  auto& d = cfg.data;
  d.kind = get<std::string>(data, "kind", "two-spheres", "data");
  if (d.kind == "two-spheres") {
    d.spheres.dim = get(data, "dim", d.spheres.dim, "data");
    d.spheres.inner_radius = get(data, "inner_radius", d.spheres.inner_radius, "data");
    d.spheres.outer_radius = get(data, "outer_radius", d.spheres.outer_radius, "data");
    d.spheres.n_per_class = get(data, "n_per_class", d.spheres.n_per_class, "data");
    d.spheres.n_test_per_class = get(data, "n_test_per_class", d.spheres.n_test_per_class, "data");
    d.spheres.noise = get(data, "noise", d.spheres.noise, "data");
    d.spheres.seed = derive_seed(cfg.seed, "data");
    d.spheres.validate();
  } else if (d.kind == "patterns") {
    d.patterns.n_per_class = get(data, "n_per_class", d.patterns.n_per_class, "data");
    d.patterns.n_test_per_class = get(data, "n_test_per_class", d.patterns.n_test_per_class, "data");
    d.patterns.num_classes = get(data, "num_classes", d.patterns.num_classes, "data");
    d.patterns.image_size = get(data, "image_size", d.patterns.image_size, "data");
    d.patterns.noise = get(data, "noise", d.patterns.noise, "data");
    d.patterns.seed = derive_seed(cfg.seed, "data");
    d.patterns.validate();
  } else if (d.kind == "manifest") {
    if (!data.contains("train") || !data.contains("test")) throw ConfigError("data: manifest kind needs train and test");
    d.train_manifest = resolve(base_dir, get<std::string>(data, "train", "", "data"));
    d.test_manifest = resolve(base_dir, get<std::string>(data, "test", "", "data"));
    if (data.contains("candidates")) d.candidate_manifest = resolve(base_dir, get<std::string>(data, "candidates", "", "data"));
  } else {
    throw ConfigError("data.kind must be two-spheres, patterns or manifest");
  }

  const json model = section(root, "model");
  check_keys(model, {"preset"}, "model");
  cfg.preset = get<std::string>(model, "preset", cfg.preset, "model");
  const auto names = preset_names();
  if (std::find(names.begin(), names.end(), cfg.preset) == names.end()) {
    throw ConfigError("model.preset \"" + cfg.preset + "\" is not a known preset");
  }

  const json pre = section(root, "pretrain");
  check_keys(pre, {"epochs", "batch_size", "lr", "augment", "eval_limit"}, "pretrain");
  cfg.pretrain.epochs = get(pre, "epochs", cfg.pretrain.epochs, "pretrain");
  cfg.pretrain.batch_size = get(pre, "batch_size", cfg.pretrain.batch_size, "pretrain");
  cfg.pretrain.adam.lr = get(pre, "lr", cfg.pretrain.adam.lr, "pretrain");
  cfg.pretrain.augment = get(pre, "augment", cfg.pretrain.augment, "pretrain");
  cfg.pretrain.eval_limit = get<std::size_t>(pre, "eval_limit", 0, "pretrain");
  cfg.pretrain.seed = derive_seed(cfg.seed, "pretrain");

  const json ret = section(root, "retrieval");
  check_keys(ret, {"tables", "bits", "mode", "min_probe_radius"}, "retrieval");
  cfg.retrieval.tables = get(ret, "tables", cfg.retrieval.tables, "retrieval");
  cfg.retrieval.bits = get(ret, "bits", cfg.retrieval.bits, "retrieval");
  cfg.retrieval.mode = index_mode_from_string(get<std::string>(ret, "mode", "exhaustive", "retrieval"));
  cfg.retrieval.min_probe_radius = get(ret, "min_probe_radius", cfg.retrieval.min_probe_radius, "retrieval");
  cfg.retrieval.seed = derive_seed(cfg.seed, "lsh");
  cfg.retrieval.validate();

  const json tr = section(root, "train");
  check_keys(tr, {"epochs", "batch_size", "lr", "augment", "freeze_phi", "eval_limit", "variants"}, "train");
  cfg.train.epochs = get(tr, "epochs", cfg.train.epochs, "train");
  cfg.train.batch_size = get(tr, "batch_size", cfg.train.batch_size, "train");
  cfg.train.adam.lr = get(tr, "lr", cfg.train.adam.lr, "train");
  cfg.train.augment = get(tr, "augment", cfg.train.augment, "train");
  cfg.train.freeze_phi = get(tr, "freeze_phi", cfg.train.freeze_phi, "train");
  cfg.train.eval_limit = get<std::size_t>(tr, "eval_limit", 0, "train");
  cfg.train.seed = derive_seed(cfg.seed, "train");
  if (tr.contains("variants")) {
    if (!tr.at("variants").is_array()) throw ConfigError("train.variants must be an array");
    for (const auto& v : tr.at("variants")) {
      check_keys(v, {"name", "k", "n_ce", "n_mu"}, "train.variants[]");
      VariantConfig var;
      var.name = get<std::string>(v, "name", "", "train.variants[]");
      var.k = get(v, "k", var.k, "train.variants[]");
      var.n_ce = get(v, "n_ce", var.n_ce, "train.variants[]");
      var.n_mu = get(v, "n_mu", var.n_mu, "train.variants[]");
      cfg.variants.push_back(var);
    }
  } else {
    cfg.variants.push_back({"racnn-k10-mixup", 10, 1, 5});
  }
  std::set<std::string> variant_names{"baseline"};
  for (const auto& v : cfg.variants) {
    if (v.name.empty() || v.name.find_first_of(",/\\ ") != std::string::npos) {
      throw ConfigError("train.variants[].name must be a non-empty identifier");
    }
    if (!variant_names.insert(v.name).second) throw ConfigError("duplicate variant name \"" + v.name + "\"");
    TrainConfig t = cfg.train;
    t.k = v.k;
    t.n_ce = v.n_ce;
    t.n_mu = v.n_mu;
    t.validate(static_cast<std::size_t>(std::max(v.k, 1)));
  }

  const json at = section(root, "attacks");
  check_keys(at, {"scenarios", "grid", "limit", "ifgsm_steps", "targeted", "deepfool", "lbfgs", "boundary"}, "attacks");
  auto& a = cfg.attacks;
  if (at.contains("scenarios")) {
    a.scenarios.clear();
    for (const auto& s : at.at("scenarios")) a.scenarios.push_back(scenario_from_string(s.get<std::string>()));
  }
  const auto default_limit = get<std::size_t>(at, "limit", 0, "attacks");
  if (at.contains("grid")) {
    for (const auto& g : at.at("grid")) {
      check_keys(g, {"attack", "strengths", "limit"}, "attacks.grid[]");
      AttackSpec spec;
      spec.kind = attack_kind_from_string(get<std::string>(g, "attack", "", "attacks.grid[]"));
      spec.strengths = get<std::vector<double>>(g, "strengths", {}, "attacks.grid[]");
      for (std::size_t i = 0; i < spec.strengths.size(); ++i) {
        if (!(spec.strengths[i] >= 0)) throw ConfigError("attacks.grid[].strengths must be >= 0");
        if (i > 0 && !(spec.strengths[i] > spec.strengths[i - 1])) {
          throw ConfigError("attacks.grid[].strengths must be strictly increasing");
        }
      }
      a.grid.push_back(spec);
      a.limits.push_back(get<std::size_t>(g, "limit", default_limit, "attacks.grid[]"));
    }
  }
  a.ifgsm_steps = get(at, "ifgsm_steps", a.ifgsm_steps, "attacks");
  if (a.ifgsm_steps < 1) throw ConfigError("attacks.ifgsm_steps must be >= 1");
  a.targeted = get(at, "targeted", a.targeted, "attacks");
  if (at.contains("deepfool")) {
    const auto& j = at.at("deepfool");
    check_keys(j, {"max_iter", "overshoot"}, "attacks.deepfool");
    a.deepfool.max_iter = get(j, "max_iter", a.deepfool.max_iter, "attacks.deepfool");
    a.deepfool.overshoot = get(j, "overshoot", a.deepfool.overshoot, "attacks.deepfool");
  }
  if (at.contains("lbfgs")) {
    const auto& j = at.at("lbfgs");
    check_keys(j, {"c_init", "c_expand_steps", "bisection_steps", "max_iter", "history"}, "attacks.lbfgs");
    a.lbfgs.c_init = get(j, "c_init", a.lbfgs.c_init, "attacks.lbfgs");
    a.lbfgs.c_expand_steps = get(j, "c_expand_steps", a.lbfgs.c_expand_steps, "attacks.lbfgs");
    a.lbfgs.bisection_steps = get(j, "bisection_steps", a.lbfgs.bisection_steps, "attacks.lbfgs");
    a.lbfgs.max_iter = get(j, "max_iter", a.lbfgs.max_iter, "attacks.lbfgs");
    a.lbfgs.history = get(j, "history", a.lbfgs.history, "attacks.lbfgs");
  }
  if (at.contains("boundary")) {
    const auto& j = at.at("boundary");
    check_keys(j, {"max_queries", "spherical_step", "source_step"}, "attacks.boundary");
    a.boundary.max_queries = get(j, "max_queries", a.boundary.max_queries, "attacks.boundary");
    a.boundary.spherical_step = get(j, "spherical_step", a.boundary.spherical_step, "attacks.boundary");
    a.boundary.source_step = get(j, "source_step", a.boundary.source_step, "attacks.boundary");
  }

  const json ev = section(root, "eval");
  check_keys(ev, {"limit"}, "eval");
  cfg.eval_limit = get<std::size_t>(ev, "limit", 0, "eval");

  for (const char* name : {"data", "model", "pretrain", "retrieval", "train", "attacks", "eval"}) {
    cfg.sections[name] = section(root, name).dump();
  }
  cfg.sections["seed"] = std::to_string(cfg.seed);
  cfg.config_hash = hex64(fnv1a64(root.dump()));
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return parse_experiment_config(read_file(path), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages = {"data", "pretrain", "index", "train", "eval", "attack", "report"};
  return stages;
}

// ---------------------------------------------------------------- stages

DatasetSplits materialize_data(const DataSection& data, std::uint64_t seed) {
  if (data.kind == "two-spheres") {
    auto c = data.spheres;
    c.seed = seed;
    return generate_two_spheres(c);
  }
  if (data.kind == "patterns") {
    auto c = data.patterns;
    c.seed = seed;
    return generate_patterns(c);
  }
  DatasetSplits s;
  s.train = load_dataset(data.train_manifest);
  s.test = load_dataset(data.test_manifest);
  if (data.candidate_manifest.empty()) {
    s.candidates = {s.train, CandidateProvenance::subset_of_train};
  } else {
    s.candidates = {load_dataset(data.candidate_manifest), CandidateProvenance::separate_set};
  }
  return s;
}

namespace {

const std::map<std::string, std::vector<std::string>>& stage_deps() {
  static const std::map<std::string, std::vector<std::string>> deps = {
      {"data", {}},
      {"pretrain", {"data"}},
      {"index", {"data", "pretrain"}},
      {"train", {"data", "pretrain", "index"}},
      {"eval", {"data", "pretrain", "index", "train"}},
      {"attack", {"data", "pretrain", "index", "train"}},
      {"report", {"eval", "attack"}},
  };
  return deps;
}

const std::map<std::string, std::vector<std::string>>& stage_sections() {
  static const std::map<std::string, std::vector<std::string>> sections = {
      {"data", {"seed", "data"}},
      {"pretrain", {"seed", "model", "pretrain"}},
      {"index", {"seed", "retrieval"}},
      {"train", {"seed", "model", "train"}},
      {"eval", {"eval"}},
      {"attack", {"seed", "attacks"}},
      {"report", {}},
  };
  return sections;
}

std::map<std::string, std::string> stage_hashes(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& stage : pipeline_stages()) {
    std::string text = "stage:" + stage + "\n";
    for (const auto& s : stage_sections().at(stage)) text += s + "=" + cfg.sections.at(s) + "\n";
    for (const auto& d : stage_deps().at(stage)) text += "dep:" + d + "=" + out.at(d) + "\n";
    out[stage] = hex64(fnv1a64(text));
  }
  return out;
}

std::optional<std::string> recorded_hash(const fs::path& dir) {
  const auto p = dir / "stage.json";
  if (!fs::exists(p)) return std::nullopt;
  try {
    return json::parse(read_file(p)).at("hash").get<std::string>();
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

struct Context {
  const ExperimentConfig& cfg;
  std::map<std::string, std::string> hashes;
  const LogFn& log;

  fs::path dir(const std::string& stage) const { return cfg.out / stage; }
  void say(const std::string& msg) const {
    if (log) log(msg);
  }
  std::string extra(const std::string& stage) const {
    json j;
    j["config_hash"] = hashes.at(stage);
    return j.dump();
  }
};

DatasetSplits load_splits(const Context& c) {
  const auto d = c.dir("data");
  DatasetSplits s;
  s.train = load_dataset(d / "train");
  s.test = load_dataset(d / "test");
  if (fs::exists(d / "candidates")) {
    s.candidates = {load_dataset(d / "candidates"), CandidateProvenance::separate_set};
  } else {
    s.candidates = {s.train, CandidateProvenance::subset_of_train};
  }
  return s;
}

ModelPreset preset_for(const Context& c, const Dataset& train) {
  return make_preset(c.cfg.preset, train.example_shape(), train.num_classes);
}

void stage_data(const Context& c, const fs::path& out) {
  const auto splits = materialize_data(c.cfg.data, derive_seed(c.cfg.seed, "data"));
  save_dataset(splits.train, out / "train");
  save_dataset(splits.test, out / "test");
  if (splits.candidates.provenance == CandidateProvenance::separate_set) save_dataset(splits.candidates.data, out / "candidates");
  c.say("data: " + std::to_string(splits.train.size()) + " train, " + std::to_string(splits.test.size()) + " test");
}

void stage_pretrain(const Context& c, const fs::path& out) {
  const auto splits = load_splits(c);
  const auto preset = preset_for(c, splits.train);
  auto result = pretrain_baseline(c.cfg.pretrain, init_baseline(preset, derive_seed(c.cfg.seed, "init/baseline")),
                                  splits.train, splits.test, [&](const MetricRow& r) {
                                    c.say("pretrain epoch " + std::to_string(r.epoch) + " " + r.split + " loss " +
                                          std::to_string(r.loss) + " acc " + std::to_string(r.accuracy));
                                  });
  save_baseline(out / "ckpt", result.best, c.extra("pretrain"));
  write_metrics_csv(out / "metrics.csv", result.metrics);
}

void stage_index(const Context& c, const fs::path& out) {
  const auto splits = load_splits(c);
  const auto baseline = load_baseline(c.dir("pretrain") / "ckpt");
  const NetworkKeyExtractor extractor(baseline);
  const auto index = build_index(splits.candidates, extractor, c.cfg.retrieval);
  json extra = json::parse(c.extra("index"));
  extra["phi_prime"] = "pretrain/ckpt";
  extra["phi_prime_hash"] = hash_directory(c.dir("pretrain") / "ckpt");
  extra["candidates"] = fs::exists(c.dir("data") / "candidates") ? "data/candidates" : "data/train";
  index.save(out, extra.dump());
  c.say("index: " + std::to_string(index.size()) + " keys of length " + std::to_string(index.key_dim()));
}

struct Loaded {
  DatasetSplits splits;
  BaselineParams baseline;
  RetrievalIndex index;
};

Loaded load_trained_inputs(const Context& c) {
  Loaded l{load_splits(c), load_baseline(c.dir("pretrain") / "ckpt"), RetrievalIndex::load(c.dir("index"))};
  return l;
}

void stage_train(const Context& c, const fs::path& out) {
  const auto in = load_trained_inputs(c);
  const auto preset = preset_for(c, in.splits.train);
  const NetworkKeyExtractor extractor(in.baseline);
  for (const auto& v : c.cfg.variants) {
    TrainConfig t = c.cfg.train;
    t.k = v.k;
    t.n_ce = v.n_ce;
    t.n_mu = v.n_mu;
    RetrievalContext ctx{&in.index, &extractor, &in.splits.candidates.data, v.k, nullptr};
    auto init = init_racnn(preset, derive_seed(c.cfg.seed, "init/racnn"), t.freeze_phi, &in.baseline);
    auto result = train_racnn(t, std::move(init), in.splits.train, ctx, in.splits.test, [&](const MetricRow& r) {
      c.say(v.name + " epoch " + std::to_string(r.epoch) + " " + r.split + " loss " + std::to_string(r.loss) + " acc " +
            std::to_string(r.accuracy));
    });
    json extra = json::parse(c.extra("train"));
    extra["variant"] = v.name;
    extra["k"] = v.k;
    extra["n_ce"] = v.n_ce;
    extra["n_mu"] = v.n_mu;
    save_racnn(out / v.name / "ckpt", result.best, extra.dump());
    write_metrics_csv(out / v.name / "metrics.csv", result.metrics);
  }
}

Fingerprint fingerprint_of(const Context& c, const std::string& model, const fs::path& ckpt, bool uses_index) {
  return {model, hash_directory(ckpt), uses_index ? hash_directory(c.dir("index")) : "", c.cfg.seed};
}

void stage_eval(const Context& c, const fs::path& out) {
  const auto in = load_trained_inputs(c);
  const NetworkKeyExtractor extractor(in.baseline);
  std::vector<CleanResult> rows;
  const auto base = evaluate_baseline(in.baseline, in.splits.test, c.cfg.eval_limit);
  const auto n = c.cfg.eval_limit == 0 ? in.splits.test.size() : std::min(c.cfg.eval_limit, in.splits.test.size());
  rows.push_back({fingerprint_of(c, "baseline", c.dir("pretrain") / "ckpt", false), base.accuracy, n});
  c.say("eval baseline clean " + std::to_string(base.accuracy));
  for (const auto& v : c.cfg.variants) {
    const auto ckpt = c.dir("train") / v.name / "ckpt";
    const auto params = load_racnn(ckpt);
    RetrievalContext ctx{&in.index, &extractor, &in.splits.candidates.data, v.k, nullptr};
    const auto r = evaluate_racnn(params, ctx, in.splits.test, c.cfg.eval_limit);
    rows.push_back({fingerprint_of(c, v.name, ckpt, true), r.accuracy, n});
    c.say("eval " + v.name + " clean " + std::to_string(r.accuracy));
  }
  write_clean_csv(out / "clean.csv", rows);
}

void attack_model(const Context& c, const AttackSurface& surface, const Dataset& test, const Fingerprint& fp,
                  const fs::path& file) {
  const auto& a = c.cfg.attacks;
  OutcomeWriter writer(file);
  for (std::size_t g = 0; g < a.grid.size(); ++g) {
    AttackSuiteConfig suite;
    suite.grid = {a.grid[g]};
    suite.seed = derive_seed(c.cfg.seed, "attack");
    suite.ifgsm_steps = a.ifgsm_steps;
    suite.gradient.targeted = a.targeted;
    suite.deepfool = a.deepfool;
    suite.lbfgs = a.lbfgs;
    suite.boundary = a.boundary;
    const auto n = a.limits[g] == 0 ? test.size() : std::min(a.limits[g], test.size());
    std::vector<std::uint32_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::uint32_t>(i);
    const auto t0 = std::chrono::steady_clock::now();
    run_attack_suite(surface, test, ids, suite, [&](const std::vector<OutcomeRow>& rows) { writer.write(rows); });
    const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.say("attack " + fp.model + " " + to_string(surface.scenario()) + " " + to_string(a.grid[g].kind) + " on " +
          std::to_string(n) + " examples (" + std::to_string(static_cast<int>(secs)) + " s)");
  }
  write_outcome_meta(file, fp);
}

void stage_attack(const Context& c, const fs::path& out) {
  const auto in = load_trained_inputs(c);
  const NetworkKeyExtractor extractor(in.baseline);
  const auto range = in.splits.test.range;
  fs::create_directories(out);
  {
    const BaselineSurface s(in.baseline, range);
    attack_model(c, s, in.splits.test, fingerprint_of(c, "baseline", c.dir("pretrain") / "ckpt", false),
                 out / "baseline_direct.csv");
  }
  for (const auto& v : c.cfg.variants) {
    const auto ckpt = c.dir("train") / v.name / "ckpt";
    const auto params = load_racnn(ckpt);
    const Tensor cache = precompute_candidate_features(params, in.splits.candidates.data);
    RetrievalContext ctx{&in.index, &extractor, &in.splits.candidates.data, v.k, &cache};
    const auto fp = fingerprint_of(c, v.name, ckpt, true);
    for (auto scenario : c.cfg.attacks.scenarios) {
      const auto file = out / (v.name + "_" + to_string(scenario) + ".csv");
      if (scenario == Scenario::direct) {
        attack_model(c, RacnnSurface(params, ctx, range), in.splits.test, fp, file);
      } else {
        attack_model(c, RetrievalAttackSurface(in.baseline, params, ctx, range), in.splits.test, fp, file);
      }
    }
  }
}

void stage_report(const Context& c, const fs::path& out) {
  const auto clean = read_clean_csv(c.dir("eval") / "clean.csv");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(c.dir("attack"))) {
    if (e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<OutcomeFile> outcomes;
  for (const auto& f : files) outcomes.push_back(read_outcome_file(f));
  render_report(build_report(clean, outcomes), out);
}

void run_stage(const std::string& stage, const Context& c, const fs::path& out) {
  if (stage == "data") stage_data(c, out);
  else if (stage == "pretrain") stage_pretrain(c, out);
  else if (stage == "index") stage_index(c, out);
  else if (stage == "train") stage_train(c, out);
  else if (stage == "eval") stage_eval(c, out);
  else if (stage == "attack") stage_attack(c, out);
  else if (stage == "report") stage_report(c, out);
}

void write_run_json(const ExperimentConfig& cfg, const std::map<std::string, std::string>& hashes) {
  json stages = json::object();
  for (const auto& stage : pipeline_stages()) {
    const auto h = recorded_hash(cfg.out / stage);
    if (h && *h == hashes.at(stage)) stages[stage] = {{"hash", *h}, {"path", stage}};
  }
  json run;
  run["config_hash"] = cfg.config_hash;
  run["stages"] = stages;
  write_file_atomic(cfg.out / "run.json", run.dump(2) + "\n");
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::vector<std::string>& only, const LogFn& log) {
  for (const auto& s : only) {
    const auto& all = pipeline_stages();
    if (std::find(all.begin(), all.end(), s) == all.end()) throw ConfigError("unknown stage \"" + s + "\"");
  }
  const auto selected = [&](const std::string& s) {
    return only.empty() || std::find(only.begin(), only.end(), s) != only.end();
  };
  Context c{cfg, stage_hashes(cfg), log};
  PipelineResult result;
  fs::create_directories(cfg.out);
  for (const auto& stage : pipeline_stages()) {
    if (!selected(stage)) continue;
    const auto dir = c.dir(stage);
    const auto& hash = c.hashes.at(stage);
    try {
      for (const auto& dep : stage_deps().at(stage)) {
        const auto h = recorded_hash(c.dir(dep));
        if (!h) throw DependencyError("stage " + stage + " needs " + (c.dir(dep) / "stage.json").string() + ", which is missing");
        if (*h != c.hashes.at(dep)) {
          throw DependencyError("stage " + stage + " needs " + c.dir(dep).string() +
                                " built from the current configuration (found hash " + *h + ", expected " +
                                c.hashes.at(dep) + ")");
        }
      }
      if (recorded_hash(dir) == hash) {
        c.say(stage + ": up to date, skipped");
        result.stages[stage] = {hash, dir, true};
        continue;
      }
      c.say(stage + ": running");
      const auto t0 = std::chrono::steady_clock::now();
      fs::path partial = dir;
      partial += ".partial";
      fs::remove_all(partial);
      fs::create_directories(partial);
      run_stage(stage, c, partial);
      json rec;
      rec["stage"] = stage;
      rec["hash"] = hash;
      write_file_atomic(partial / "stage.json", rec.dump(2) + "\n");
      fs::remove_all(dir);
      fs::rename(partial, dir);
      const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      c.say(stage + ": done in " + std::to_string(static_cast<int>(secs)) + " s");
      result.stages[stage] = {hash, dir, false};
    } catch (const std::exception& e) {
      result.exit_code = 1;
      result.failed_stage = stage;
      result.error = e.what();
      c.say(stage + ": failed: " + e.what());
      break;
    }
  }
  write_run_json(cfg, c.hashes);
  return result;
}

}  // namespace mshield
