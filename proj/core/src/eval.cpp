#include "mshield/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "mshield/error.hpp"
#include "mshield/rten.hpp"

namespace mshield {

namespace fs = std::filesystem;
using nlohmann::json;

double normalized_l2(std::span<const float> x, std::span<const float> x_tilde, PixelRange range) {
  if (x.size() != x_tilde.size()) {
    throw DimensionError("normalized_l2: " + std::to_string(x.size()) + " vs " + std::to_string(x_tilde.size()) +
                         " elements");
  }
  if (!(range.max > range.min)) throw ContractError("normalized_l2: pix_max must exceed pix_min");
  if (x.empty()) throw DimensionError("normalized_l2: empty input");
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(x_tilde[i]);
    acc += d * d;
  }
  const double w = static_cast<double>(range.max) - static_cast<double>(range.min);
  return acc / (static_cast<double>(x.size()) * w * w);
}

double normalized_l2(const Tensor& x, const Tensor& x_tilde, PixelRange range) {
  if (x.shape() != x_tilde.shape()) {
    throw DimensionError("normalized_l2: " + shape_string(x.shape()) + " vs " + shape_string(x_tilde.shape()));
  }
  return normalized_l2(x.values(), x_tilde.values(), range);
}

namespace {

bool same_strength(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(std::abs(a), std::abs(b)); }

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

const std::vector<std::string>& attack_order() {
  static const std::vector<std::string> order = {"fgsm", "ifgsm", "deepfool", "lbfgs", "boundary"};
  return order;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::size_t start = 0;
  while (true) {
    const auto c = line.find(',', start);
    f.push_back(line.substr(start, c == std::string::npos ? std::string::npos : c - start));
    if (c == std::string::npos) break;
    start = c + 1;
  }
  return f;
}

}  // namespace

std::optional<double> accuracy_at_strength(std::span<const OutcomeRow> rows, double strength) {
  std::size_t n = 0, held = 0;
  for (const auto& r : rows) {
    if (!same_strength(r.strength, strength)) continue;
    ++n;
    held += !r.success;
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(held) / static_cast<double>(n);
}

std::string fingerprint_json(const Fingerprint& f) {
  json j;
  j["model"] = f.model;
  j["checkpoint_hash"] = f.checkpoint_hash;
  j["index_hash"] = f.index_hash;
  j["seed"] = f.seed;
  return j.dump(2) + "\n";
}

Fingerprint parse_fingerprint(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("fingerprint is not JSON", e.byte);
  }
  Fingerprint f;
  f.model = j.at("model").get<std::string>();
  f.checkpoint_hash = j.value("checkpoint_hash", "");
  f.index_hash = j.value("index_hash", "");
  f.seed = j.value("seed", std::uint64_t{0});
  return f;
}

void write_clean_csv(const fs::path& path, const std::vector<CleanResult>& rows) {
  std::string out = "model,accuracy,n,checkpoint_hash,index_hash,seed\n";
  for (const auto& r : rows) {
    out += r.fingerprint.model + "," + num(r.accuracy) + "," + std::to_string(r.n) + "," + r.fingerprint.checkpoint_hash +
           "," + r.fingerprint.index_hash + "," + std::to_string(r.fingerprint.seed) + "\n";
  }
  write_file_atomic(path, out);
}

std::vector<CleanResult> read_clean_csv(const fs::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  std::vector<CleanResult> rows;
  bool header = true;
  while (std::getline(in, line)) {
    const auto here = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != "model,accuracy,n,checkpoint_hash,index_hash,seed") {
        throw FormatError(path.string() + ": unexpected clean-eval header", here);
      }
      header = false;
      continue;
    }
    const auto f = split_csv_line(line);
    if (f.size() != 6) throw FormatError(path.string() + ": expected 6 fields", here);
    try {
      CleanResult r;
      r.fingerprint = {f[0], f[3], f[4], std::stoull(f[5])};
      r.accuracy = std::stod(f[1]);
      r.n = std::stoul(f[2]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ": bad clean-eval row", here);
    }
  }
  if (header) throw FormatError(path.string() + ": missing header", 0);
  return rows;
}

RobustnessCurve make_curve(const Fingerprint& fp, const std::string& attack, Scenario scenario,
                           std::span<const OutcomeRow> rows) {
  RobustnessCurve c{fp.model, attack, scenario, fp, {}};
  std::vector<double> strengths;
  for (const auto& r : rows) {
    if (r.attack != attack || r.scenario != scenario) continue;
    if (std::none_of(strengths.begin(), strengths.end(), [&](double s) { return same_strength(s, r.strength); })) {
      strengths.push_back(r.strength);
    }
  }
  std::sort(strengths.begin(), strengths.end());
  std::optional<std::multiset<std::uint32_t>> examples;
  for (double s : strengths) {
    CurvePoint p{s, 0, 0, 0};
    std::multiset<std::uint32_t> ids;
    std::size_t held = 0, succeeded = 0;
    double l2 = 0;
    for (const auto& r : rows) {
      if (r.attack != attack || r.scenario != scenario || !same_strength(r.strength, s)) continue;
      ids.insert(r.example_id);
      ++p.n;
      if (r.success) {
        ++succeeded;
        l2 += r.l2bar;
      } else {
        ++held;
      }
    }
    if (examples && *examples != ids) {
      throw ContractError(fp.model + "/" + attack + ": strengths were evaluated on different examples");
    }
    examples = std::move(ids);
    p.accuracy = static_cast<double>(held) / static_cast<double>(p.n);
    p.mean_l2bar = succeeded == 0 ? 0.0 : l2 / static_cast<double>(succeeded);
    c.points.push_back(p);
  }
  return c;
}

fs::path meta_path(const fs::path& outcomes) { return fs::path(outcomes.string() + ".meta.json"); }

void write_outcome_meta(const fs::path& outcomes, const Fingerprint& fp) {
  write_file_atomic(meta_path(outcomes), fingerprint_json(fp));
}

OutcomeFile read_outcome_file(const fs::path& outcomes) {
  const auto meta = meta_path(outcomes);
  if (!fs::exists(meta)) throw DependencyError(outcomes.string() + ": missing fingerprint sidecar " + meta.string());
  return {parse_fingerprint(read_file(meta)), read_outcomes(outcomes)};
}

EvalReport build_report(const std::vector<CleanResult>& clean, const std::vector<OutcomeFile>& outcomes) {
  std::map<std::string, Fingerprint> seen;
  std::optional<std::uint64_t> seed;
  std::string index_hash;
  const auto admit = [&](const Fingerprint& fp) {
    auto [it, fresh] = seen.emplace(fp.model, fp);
    if (!fresh && !(it->second == fp)) {
      throw DependencyError("conflicting fingerprints for model " + fp.model + " (checkpoint " +
                            it->second.checkpoint_hash + " vs " + fp.checkpoint_hash + ")");
    }
    if (seed && *seed != fp.seed) throw DependencyError("inputs were produced under different seeds");
    seed = fp.seed;
    if (!fp.index_hash.empty()) {
      if (!index_hash.empty() && index_hash != fp.index_hash) {
        throw DependencyError("inputs were produced against different retrieval indexes");
      }
      index_hash = fp.index_hash;
    }
  };
  EvalReport report;
  for (const auto& c : clean) {
    admit(c.fingerprint);
    report.clean.push_back(c);
  }
  std::set<std::tuple<std::string, std::string, Scenario>> keys;
  for (const auto& file : outcomes) {
    admit(file.fingerprint);
    std::vector<std::pair<std::string, Scenario>> groups;
    for (const auto& r : file.rows) {
      const std::pair<std::string, Scenario> g{r.attack, r.scenario};
      if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    }
    for (const auto& [attack, scenario] : groups) {
      if (!keys.emplace(file.fingerprint.model, attack, scenario).second) {
        throw DependencyError("duplicate outcomes for " + file.fingerprint.model + "/" + attack + "/" +
                              to_string(scenario));
      }
      report.curves.push_back(make_curve(file.fingerprint, attack, scenario, file.rows));
    }
  }
  return report;
}

namespace {

std::vector<std::string> model_order(const EvalReport& report) {
  std::vector<std::string> order;
  for (const auto& c : report.clean) {
    if (std::find(order.begin(), order.end(), c.fingerprint.model) == order.end()) order.push_back(c.fingerprint.model);
  }
  std::vector<std::string> extra;
  for (const auto& c : report.curves) {
    if (std::find(order.begin(), order.end(), c.model) == order.end() &&
        std::find(extra.begin(), extra.end(), c.model) == extra.end()) {
      extra.push_back(c.model);
    }
  }
  std::sort(extra.begin(), extra.end());
  order.insert(order.end(), extra.begin(), extra.end());
  return order;
}

std::optional<double> clean_of(const EvalReport& report, const std::string& model) {
  for (const auto& c : report.clean) {
    if (c.fingerprint.model == model) return c.accuracy;
  }
  return std::nullopt;
}

/// The curve shown for (model, attack) in a scenario's table. A model with no
/// curve at all in the retrieval scenario (the baseline) shows its direct one.
const RobustnessCurve* curve_for(const EvalReport& report, const std::string& model, const std::string& attack,
                                 Scenario scenario) {
  for (const auto& c : report.curves) {
    if (c.model == model && c.attack == attack && c.scenario == scenario) return &c;
  }
  if (scenario == Scenario::retrieval) {
    const bool has_any = std::any_of(report.curves.begin(), report.curves.end(),
                                     [&](const auto& c) { return c.model == model && c.scenario == scenario; });
    if (!has_any) return curve_for(report, model, attack, Scenario::direct);
  }
  return nullptr;
}

std::vector<std::string> attacks_in(const EvalReport& report) {
  std::vector<std::string> out;
  for (const auto& a : attack_order()) {
    if (std::any_of(report.curves.begin(), report.curves.end(), [&](const auto& c) { return c.attack == a; })) {
      out.push_back(a);
    }
  }
  return out;
}

}  // namespace

std::string render_table_csv(const EvalReport& report, Scenario scenario) {
  std::string out = "model,clean,attack,strength,accuracy,l2bar,n\n";
  for (const auto& model : model_order(report)) {
    const auto clean = clean_of(report, model);
    const std::string clean_s = clean ? num(*clean) : "";
    bool any = false;
    for (const auto& attack : attack_order()) {
      const auto* c = curve_for(report, model, attack, scenario);
      if (c == nullptr) continue;
      for (const auto& p : c->points) {
        any = true;
        out += model + "," + clean_s + "," + attack + "," + num(p.strength) + "," + num(p.accuracy) + "," +
               num(p.mean_l2bar) + "," + std::to_string(p.n) + "\n";
      }
    }
    if (!any && clean) out += model + "," + clean_s + ",,,,,\n";
  }
  return out;
}

EvalReport parse_table_csv(const std::string& csv, Scenario scenario) {
  EvalReport report;
  std::istringstream in(csv);
  std::string line;
  std::size_t offset = 0;
  bool header = true;
  while (std::getline(in, line)) {
    const auto here = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != "model,clean,attack,strength,accuracy,l2bar,n") throw FormatError("unexpected table header", here);
      header = false;
      continue;
    }
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw FormatError("table row needs 7 fields", here);
    try {
      if (!f[1].empty() && !clean_of(report, f[0])) {
        CleanResult c;
        c.fingerprint.model = f[0];
        c.accuracy = std::stod(f[1]);
        report.clean.push_back(c);
      }
      if (f[2].empty()) continue;
      auto it = std::find_if(report.curves.begin(), report.curves.end(),
                             [&](const auto& c) { return c.model == f[0] && c.attack == f[2]; });
      if (it == report.curves.end()) {
        RobustnessCurve c;
        c.model = f[0];
        c.attack = f[2];
        c.scenario = scenario;
        c.fingerprint.model = f[0];
        report.curves.push_back(c);
        it = report.curves.end() - 1;
      }
      it->points.push_back({std::stod(f[3]), std::stod(f[4]), std::stod(f[5]), std::stoul(f[6])});
    } catch (const std::logic_error&) {
      throw FormatError("bad table row", here);
    }
  }
  if (header) throw FormatError("missing table header", 0);
  return report;
}

std::string render_svg(const EvalReport& report, const std::string& attack, Scenario scenario) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  constexpr double W = 560, H = 360, L = 60, R = 170, T = 30, B = 50;
  std::vector<const RobustnessCurve*> curves;
  std::vector<std::string> names;
  double xmax = 0;
  for (const auto& model : model_order(report)) {
    if (const auto* c = curve_for(report, model, attack, scenario)) {
      curves.push_back(c);
      names.push_back(model);
      for (const auto& p : c->points) xmax = std::max(xmax, p.strength);
    }
  }
  if (xmax <= 0) xmax = 1;
  const auto px = [&](double s) { return L + (W - L - R) * s / xmax; };
  const auto py = [&](double a) { return T + (H - T - B) * (1.0 - a); };
  char buf[512];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" font-family=\"sans-serif\" "
                "font-size=\"12\">\n<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n",
                W, H);
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"18\" font-size=\"14\">%s (%s)</text>\n", L, attack.c_str(),
                to_string(scenario).c_str());
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n"
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n",
                L, H - B, W - R, H - B, L, T, L, H - B);
  out += buf;
  for (int i = 0; i <= 4; ++i) {
    const double a = i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.2f</text>\n", L - 6, py(a) + 4, a);
    out += buf;
    const double s = xmax * i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">%.3g</text>\n", px(s), H - B + 18, s);
    out += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">strength (normalized L2)</text>\n"
                "<text x=\"14\" y=\"%g\" transform=\"rotate(-90 14 %g)\" text-anchor=\"middle\">accuracy</text>\n",
                (L + W - R) / 2, H - 12, (T + H - B) / 2, (T + H - B) / 2);
  out += buf;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* color = colors[i % std::size(colors)];
    std::string pts;
    for (const auto& p : curves[i]->points) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", pts.empty() ? "" : " ", px(p.strength), py(p.accuracy));
      pts += buf;
    }
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (const auto& p : curves[i]->points) {
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", px(p.strength),
                    py(p.accuracy), color);
      out += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" stroke-width=\"2\"/>"
                  "<text x=\"%g\" y=\"%g\">%s</text>\n",
                  W - R + 12, T + 10 + 18.0 * static_cast<double>(i), W - R + 32, T + 10 + 18.0 * static_cast<double>(i),
                  color, W - R + 38, T + 14 + 18.0 * static_cast<double>(i), names[i].c_str());
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

void render_report(const EvalReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  std::string clean = "model,clean,n\n";
  for (const auto& c : report.clean) clean += c.fingerprint.model + "," + num(c.accuracy) + "," + std::to_string(c.n) + "\n";
  write_file_atomic(dir / "clean.csv", clean);
  for (auto scenario : {Scenario::direct, Scenario::retrieval}) {
    const bool present = std::any_of(report.curves.begin(), report.curves.end(),
                                     [&](const auto& c) { return c.scenario == scenario; });
    if (!present && scenario == Scenario::retrieval) continue;
    write_file_atomic(dir / ("table_" + to_string(scenario) + ".csv"), render_table_csv(report, scenario));
    if (!present) continue;
    for (const auto& attack : attacks_in(report)) {
      write_file_atomic(dir / (attack + "_" + to_string(scenario) + ".svg"), render_svg(report, attack, scenario));
    }
  }
}

}  // namespace mshield
