#include "mshield/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>

#include "mshield/error.hpp"
#include "mshield/eval.hpp"
#include "mshield/lbfgs.hpp"
#include "mshield/parallel.hpp"
#include "mshield/rten.hpp"
#include "mshield/training.hpp"

namespace mshield {

std::string to_string(Scenario s) { return s == Scenario::direct ? "direct" : "retrieval"; }

Scenario scenario_from_string(const std::string& s) {
  if (s == "direct") return Scenario::direct;
  if (s == "retrieval") return Scenario::retrieval;
  throw ConfigError("unknown scenario \"" + s + "\" (expected direct or retrieval)");
}

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::ifgsm: return "ifgsm";
    case AttackKind::deepfool: return "deepfool";
    case AttackKind::lbfgs: return "lbfgs";
    case AttackKind::boundary: return "boundary";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  for (auto k : {AttackKind::fgsm, AttackKind::ifgsm, AttackKind::deepfool, AttackKind::lbfgs, AttackKind::boundary}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown attack \"" + s + "\" (expected fgsm, ifgsm, deepfool, lbfgs or boundary)");
}

double epsilon_for_strength(double strength, PixelRange range) {
  if (!(strength >= 0)) throw ConfigError("attack strength must be >= 0");
  return std::sqrt(strength) * range.width();
}

// ---------------------------------------------------------------- surfaces

namespace {

Shape batched(const Shape& s) {
  Shape b{1};
  b.insert(b.end(), s.begin(), s.end());
  return b;
}

void check_input(const AttackSurface& s, const Tensor& x) {
  if (x.shape() != s.input_shape()) {
    throw DimensionError("attack input " + shape_string(x.shape()) + " vs surface input " + shape_string(s.input_shape()));
  }
}

int argmax(std::span<const float> v) { return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin()); }

template <class Forward>
Tensor tape_logits(const Tensor& x, const Forward& forward) {
  Tape tape;
  auto logits = forward(tape, tape.constant(x.reshaped(batched(x.shape()))));
  const auto v = tape.value(logits);
  return Tensor(Shape{static_cast<std::int64_t>(v.size())}, std::vector<float>(v.begin(), v.end()));
}

template <class Forward>
Tensor tape_loss_gradient(const Tensor& x, const Tensor& target, double* loss, const Forward& forward) {
  Tape tape;
  auto in = tape.input(x.reshaped(batched(x.shape())));
  auto logits = forward(tape, in);
  auto l = ops::cross_entropy_soft(logits, target.reshaped(Shape{1, target.dim(0)}));
  tape.backward(l);
  if (loss != nullptr) *loss = tape.value(l)[0];
  const auto g = tape.grad(in);
  if (g.empty()) return Tensor(x.shape(), 0.0f);
  return Tensor(x.shape(), std::vector<float>(g.begin(), g.end()));
}

template <class Forward>
Tensor tape_jacobian(const Tensor& x, Tensor* logits_out, int classes, const Forward& forward) {
  Tape tape;
  auto in = tape.input(x.reshaped(batched(x.shape())));
  auto logits = forward(tape, in);
  const auto n = static_cast<std::int64_t>(x.numel());
  Tensor jac(Shape{classes, n}, 0.0f);
  for (int c = 0; c < classes; ++c) {
    if (c > 0) tape.reset_grads();
    Tensor pick(Shape{1, classes}, 0.0f);
    pick[static_cast<std::size_t>(c)] = 1.0f;
    tape.backward(ops::sum(ops::mul(logits, tape.constant(pick))));
    const auto g = tape.grad(in);
    if (!g.empty()) std::copy(g.begin(), g.end(), jac.values().begin() + c * n);
  }
  if (logits_out != nullptr) {
    const auto v = tape.value(logits);
    *logits_out = Tensor(Shape{classes}, std::vector<float>(v.begin(), v.end()));
  }
  return jac;
}

}  // namespace

int BaselineSurface::decision(const Tensor& x) const { return argmax(logits(x).values()); }

Tensor BaselineSurface::logits(const Tensor& x) const {
  check_input(*this, x);
  auto& p = const_cast<BaselineParams&>(*params_);
  return tape_logits(x, [&](Tape& t, Var v) { return baseline_forward(t, p, v, Mode::eval, ParamBinding::frozen); });
}

Tensor BaselineSurface::loss_gradient(const Tensor& x, const Tensor& target, double* loss) const {
  check_input(*this, x);
  auto& p = const_cast<BaselineParams&>(*params_);
  return tape_loss_gradient(x, target, loss,
                            [&](Tape& t, Var v) { return baseline_forward(t, p, v, Mode::eval, ParamBinding::frozen); });
}

Tensor BaselineSurface::logit_jacobian(const Tensor& x, Tensor* logits) const {
  check_input(*this, x);
  auto& p = const_cast<BaselineParams&>(*params_);
  return tape_jacobian(x, logits, num_classes(),
                       [&](Tape& t, Var v) { return baseline_forward(t, p, v, Mode::eval, ParamBinding::frozen); });
}

int RacnnSurface::decision(const Tensor& x) const { return argmax(logits(x).values()); }

Tensor RacnnSurface::logits(const Tensor& x) const {
  check_input(*this, x);
  auto& p = const_cast<RacnnParams&>(*params_);
  return tape_logits(
      x, [&](Tape& t, Var v) { return racnn_forward(t, p, ctx_, v, Mode::eval, ParamBinding::frozen).logits; });
}

Tensor RacnnSurface::loss_gradient(const Tensor& x, const Tensor& target, double* loss) const {
  check_input(*this, x);
  auto& p = const_cast<RacnnParams&>(*params_);
  return tape_loss_gradient(x, target, loss, [&](Tape& t, Var v) {
    return racnn_forward(t, p, ctx_, v, Mode::eval, ParamBinding::frozen).logits;
  });
}

Tensor RacnnSurface::logit_jacobian(const Tensor& x, Tensor* logits) const {
  check_input(*this, x);
  auto& p = const_cast<RacnnParams&>(*params_);
  return tape_jacobian(x, logits, num_classes(), [&](Tape& t, Var v) {
    return racnn_forward(t, p, ctx_, v, Mode::eval, ParamBinding::frozen).logits;
  });
}

AffineSurface::AffineSurface(Tensor weight, Tensor bias, PixelRange bounds)
    : weight_(std::move(weight)), bias_(std::move(bias)), bounds_(bounds) {
  if (weight_.rank() != 2 || bias_.rank() != 1 || bias_.dim(0) != weight_.dim(0)) {
    throw DimensionError("affine surface: weight " + shape_string(weight_.shape()) + " and bias " +
                         shape_string(bias_.shape()) + " disagree on axis 0");
  }
}

Tensor AffineSurface::logits(const Tensor& x) const {
  check_input(*this, x);
  const auto c = weight_.dim(0), d = weight_.dim(1);
  Tensor out(Shape{c});
  for (std::int64_t i = 0; i < c; ++i) {
    double acc = bias_[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < d; ++j) acc += static_cast<double>(weight_[static_cast<std::size_t>(i * d + j)]) * x[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = static_cast<float>(acc);
  }
  return out;
}

int AffineSurface::decision(const Tensor& x) const { return argmax(logits(x).values()); }

Tensor AffineSurface::loss_gradient(const Tensor& x, const Tensor& target, double* loss) const {
  const Tensor z = logits(x);
  const auto c = weight_.dim(0), d = weight_.dim(1);
  check_simplex_rows(target.values(), static_cast<std::size_t>(c), 1e-6);
  const double mx = *std::max_element(z.values().begin(), z.values().end());
  double sum = 0;
  for (float v : z.values()) sum += std::exp(v - mx);
  std::vector<double> p(static_cast<std::size_t>(c));
  double l = 0;
  for (std::int64_t i = 0; i < c; ++i) {
    const double logp = z[static_cast<std::size_t>(i)] - mx - std::log(sum);
    p[static_cast<std::size_t>(i)] = std::exp(logp);
    l -= target[static_cast<std::size_t>(i)] * logp;
  }
  if (loss != nullptr) *loss = l;
  Tensor g(Shape{d}, 0.0f);
  for (std::int64_t j = 0; j < d; ++j) {
    double acc = 0;
    for (std::int64_t i = 0; i < c; ++i) {
      acc += (p[static_cast<std::size_t>(i)] - target[static_cast<std::size_t>(i)]) * weight_[static_cast<std::size_t>(i * d + j)];
    }
    g[static_cast<std::size_t>(j)] = static_cast<float>(acc);
  }
  return g;
}

Tensor AffineSurface::logit_jacobian(const Tensor& x, Tensor* logits_out) const {
  if (logits_out != nullptr) *logits_out = logits(x);
  else check_input(*this, x);
  return weight_;
}

Tensor DecisionOnlySurface::logits(const Tensor&) const {
  throw CapabilityError("decision-only surface exposes no logits");
}
Tensor DecisionOnlySurface::loss_gradient(const Tensor&, const Tensor&, double*) const {
  throw CapabilityError("decision-only surface exposes no gradients");
}
Tensor DecisionOnlySurface::logit_jacobian(const Tensor&, Tensor*) const {
  throw CapabilityError("decision-only surface exposes no gradients");
}

// ---------------------------------------------------------------- attacks

namespace {

void require_gradients(const AttackSurface& s, const char* attack) {
  if (!s.has_gradients()) throw CapabilityError(std::string(attack) + " needs input gradients");
}

void require_label(const AttackSurface& s, int y, const char* what) {
  if (y < 0 || y >= s.num_classes()) {
    throw ContractError(std::string(what) + " " + std::to_string(y) + " outside [0, " + std::to_string(s.num_classes()) + ")");
  }
}

Tensor clip(Tensor t, PixelRange r) {
  for (auto& v : t.values()) v = std::clamp(v, r.min, r.max);
  return t;
}

void finish(const AttackSurface& s, const Tensor& x, int y, AttackOutcome& out) {
  out.success = s.decision(out.adversarial) != y;
  ++out.queries;
  out.l2bar = normalized_l2(x, out.adversarial, s.bounds());
}

Tensor target_of(int label, int classes) {
  const int l[] = {label};
  return one_hot(l, classes).reshaped(Shape{classes});
}

AttackOutcome sign_steps(const AttackSurface& s, const Tensor& x, int y, double epsilon, int steps,
                         const GradientAttackOptions& opt, const char* name) {
  require_gradients(s, name);
  check_input(s, x);
  require_label(s, y, "true label");
  if (!(epsilon >= 0)) throw ContractError(std::string(name) + ": epsilon must be >= 0");
  if (steps < 1) throw ContractError(std::string(name) + ": S must be >= 1");
  if (opt.targeted) require_label(s, opt.target, "target class");
  const Tensor target = target_of(opt.targeted ? opt.target : y, s.num_classes());
  const float direction = opt.targeted ? -1.0f : 1.0f;
  const auto step = static_cast<float>(epsilon / steps);
  const auto r = s.bounds();
  AttackOutcome out;
  out.adversarial = x;
  for (int i = 0; i < steps; ++i) {
    const Tensor g = s.loss_gradient(out.adversarial, target, nullptr);
    ++out.queries;
    for (std::size_t j = 0; j < g.numel(); ++j) {
      const float sg = g[j] > 0 ? 1.0f : (g[j] < 0 ? -1.0f : 0.0f);
      out.adversarial[j] = std::clamp(out.adversarial[j] + step * (direction * sg), r.min, r.max);
    }
    ++out.iterations;
  }
  finish(s, x, y, out);
  return out;
}

}  // namespace

AttackOutcome fgsm(const AttackSurface& s, const Tensor& x, int y_true, double epsilon, const GradientAttackOptions& opt) {
  return sign_steps(s, x, y_true, epsilon, 1, opt, "fgsm");
}

AttackOutcome ifgsm(const AttackSurface& s, const Tensor& x, int y_true, double epsilon, int steps,
                    const GradientAttackOptions& opt) {
  return sign_steps(s, x, y_true, epsilon, steps, opt, "ifgsm");
}

AttackOutcome deepfool(const AttackSurface& s, const Tensor& x, int y_true, const DeepFoolConfig& cfg) {
  require_gradients(s, "deepfool");
  check_input(s, x);
  require_label(s, y_true, "true label");
  if (cfg.max_iter < 0 || !(cfg.overshoot >= 0)) throw ConfigError("deepfool: bad max_iter or overshoot");
  const auto n = x.numel();
  const int classes = s.num_classes();
  std::vector<double> r_tot(n, 0.0), w(n), w_best(n);
  AttackOutcome out;
  out.adversarial = x;
  for (int it = 0;; ++it) {
    Tensor logits;
    const Tensor jac = s.logit_jacobian(out.adversarial, &logits);
    ++out.queries;
    if (argmax(logits.values()) != y_true || it == cfg.max_iter) break;
    double best_ratio = std::numeric_limits<double>::infinity(), best_fd = 0, best_norm2 = 0;
    for (int l = 0; l < classes; ++l) {
      if (l == y_true) continue;
      double norm2 = 0;
      for (std::size_t j = 0; j < n; ++j) {
        w[j] = static_cast<double>(jac[l * n + j]) - jac[static_cast<std::size_t>(y_true) * n + j];
        norm2 += w[j] * w[j];
      }
      if (norm2 == 0) continue;
      const double fd = static_cast<double>(logits[static_cast<std::size_t>(l)]) - logits[static_cast<std::size_t>(y_true)];
      const double ratio = std::abs(fd) / std::sqrt(norm2);
      if (ratio < best_ratio) {
        best_ratio = ratio;
        best_fd = fd;
        best_norm2 = norm2;
        w_best = w;
      }
    }
    if (!std::isfinite(best_ratio)) {
      out.note = "singular step: zero gradient difference";
      break;
    }
    const double scale = std::abs(best_fd) / best_norm2;
    const auto r = s.bounds();
    for (std::size_t j = 0; j < n; ++j) {
      r_tot[j] += scale * w_best[j];
      out.adversarial[j] = std::clamp(static_cast<float>(x[j] + (1.0 + cfg.overshoot) * r_tot[j]), r.min, r.max);
    }
    ++out.iterations;
  }
  out.residual = Tensor(x.shape());
  for (std::size_t j = 0; j < n; ++j) out.residual[j] = static_cast<float>(r_tot[j]);
  finish(s, x, y_true, out);
  return out;
}

AttackOutcome lbfgs_attack(const AttackSurface& s, const Tensor& x, int y_true, const LbfgsAttackConfig& cfg) {
  require_gradients(s, "lbfgs");
  check_input(s, x);
  require_label(s, y_true, "true label");
  if (!(cfg.c_init > 0) || cfg.c_expand_steps < 0 || cfg.bisection_steps < 0) throw ConfigError("lbfgs: bad c schedule");
  AttackOutcome out;
  out.adversarial = x;
  if (s.crafting_decision(x) != y_true) {
    ++out.queries;
    finish(s, x, y_true, out);
    return out;
  }
  ++out.queries;
  int target = cfg.target;
  if (target < 0) {
    const Tensor z = s.logits(x);
    ++out.queries;
    double lowest = std::numeric_limits<double>::infinity();
    for (int c = 0; c < s.num_classes(); ++c) {
      if (c != y_true && z[static_cast<std::size_t>(c)] < lowest) {
        lowest = z[static_cast<std::size_t>(c)];
        target = c;
      }
    }
  }
  require_label(s, target, "target class");
  const Tensor tgt = target_of(target, s.num_classes());
  const auto n = x.numel();
  const auto r = s.bounds();
  const std::vector<double> x0(x.values().begin(), x.values().end());
  const std::vector<double> lower(n, r.min), upper(n, r.max);

  std::optional<Tensor> best;
  double best_dist = std::numeric_limits<double>::infinity();
  const auto solve = [&](double c) {
    Tensor probe(x.shape());
    Objective f = [&](std::span<const double> z, std::span<double> grad) {
      for (std::size_t j = 0; j < n; ++j) probe[j] = static_cast<float>(z[j]);
      double loss = 0;
      const Tensor g = s.loss_gradient(probe, tgt, &loss);
      ++out.queries;
      double dist = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = z[j] - x0[j];
        dist += d * d;
        grad[j] = 2.0 * c * d + g[j];
      }
      return c * dist + loss;
    };
    LbfgsOptions opt;
    opt.max_iter = cfg.max_iter;
    opt.history = cfg.history;
    const auto res = minimize_box(f, x0, lower, upper, opt);
    out.iterations += res.iterations;
    Tensor cand(x.shape());
    for (std::size_t j = 0; j < n; ++j) cand[j] = static_cast<float>(res.z[j]);
    cand = clip(std::move(cand), r);
    const bool adv = s.crafting_decision(cand) != y_true;
    ++out.queries;
    if (adv) {
      const double d = normalized_l2(x, cand, r);
      if (d < best_dist) {
        best_dist = d;
        best = cand;
      }
    }
    return adv;
  };

  double c = cfg.c_init;
  std::optional<double> c_lo, c_hi;  // largest adversarial c, smallest failing c
  if (solve(c)) {
    c_lo = c;
    for (int i = 0; i < cfg.c_expand_steps; ++i) {
      c *= 10;
      if (solve(c)) {
        c_lo = c;
      } else {
        c_hi = c;
        break;
      }
    }
  } else {
    c_hi = c;
    for (int i = 0; i < cfg.c_expand_steps; ++i) {
      c /= 10;
      if (solve(c)) {
        c_lo = c;
        break;
      }
      c_hi = c;
    }
  }
  if (c_lo && c_hi) {
    for (int i = 0; i < cfg.bisection_steps; ++i) {
      const double mid = std::sqrt(*c_lo * *c_hi);
      if (solve(mid)) c_lo = mid;
      else c_hi = mid;
    }
  }
  if (best) out.adversarial = *best;
  else out.note = "no adversarial minimiser found";
  finish(s, x, y_true, out);
  return out;
}

AttackOutcome boundary_attack(const AttackSurface& s, const Tensor& x, int y_true, Rng& rng, const BoundaryConfig& cfg) {
  check_input(s, x);
  require_label(s, y_true, "true label");
  if (cfg.max_queries < 1 || !(cfg.spherical_step > 0) || !(cfg.source_step > 0) || cfg.adapt_every < 1) {
    throw ConfigError("boundary: bad configuration");
  }
  const auto r = s.bounds();
  const auto n = x.numel();
  AttackOutcome out;
  out.adversarial = x;
  const auto adversarial = [&](const Tensor& z) {
    ++out.queries;
    return s.crafting_decision(z) != y_true;
  };
  const auto dist = [&](const Tensor& z) {
    double d = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = static_cast<double>(z[j]) - x[j];
      d += v * v;
    }
    return std::sqrt(d);
  };
  if (adversarial(x)) {
    finish(s, x, y_true, out);
    return out;
  }
  std::uniform_real_distribution<float> uni(r.min, r.max);
  std::optional<Tensor> start;
  for (int a = 0; a < cfg.init_attempts && out.queries < cfg.max_queries; ++a) {
    Tensor z(x.shape());
    for (auto& v : z.values()) v = uni(rng);
    if (adversarial(z)) {
      start = std::move(z);
      break;
    }
  }
  if (!start) {
    out.note = "no adversarial starting point";
    finish(s, x, y_true, out);
    return out;
  }
  // Blend the start toward x while it stays adversarial.
  double lo = 0, hi = 1;
  Tensor blend(x.shape());
  const auto blend_at = [&](double t) {
    for (std::size_t j = 0; j < n; ++j) blend[j] = static_cast<float>(x[j] + t * (static_cast<double>((*start)[j]) - x[j]));
  };
  for (int i = 0; i < cfg.blend_steps && out.queries < cfg.max_queries; ++i) {
    const double mid = 0.5 * (lo + hi);
    blend_at(mid);
    if (adversarial(blend)) hi = mid;
    else lo = mid;
  }
  blend_at(hi);
  Tensor current = blend;
  double current_dist = dist(current);
  if (cfg.on_accept) cfg.on_accept(current, current_dist);

  std::normal_distribution<double> normal(0.0, 1.0);
  double sigma = cfg.spherical_step, delta = cfg.source_step;
  std::int64_t sph_trials = 0, sph_ok = 0, src_trials = 0, src_ok = 0;
  std::vector<double> dir(n), eta(n);
  Tensor spherical(x.shape()), candidate(x.shape());
  while (out.queries < cfg.max_queries && current_dist > 0) {
    ++out.iterations;
    // Unit vector from the current point toward x.
    for (std::size_t j = 0; j < n; ++j) dir[j] = (static_cast<double>(x[j]) - current[j]) / current_dist;
    double proj = 0, norm = 0;
    for (std::size_t j = 0; j < n; ++j) {
      eta[j] = normal(rng);
      proj += eta[j] * dir[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      eta[j] -= proj * dir[j];
      norm += eta[j] * eta[j];
    }
    norm = std::sqrt(norm);
    if (norm == 0) continue;
    // Orthogonal step of length sigma * d, pulled back onto the sphere of radius d around x.
    const double shrink = 1.0 / std::sqrt(1.0 + sigma * sigma);
    for (std::size_t j = 0; j < n; ++j) {
      const double moved = static_cast<double>(current[j]) + eta[j] / norm * sigma * current_dist;
      spherical[j] = std::clamp(static_cast<float>(x[j] + shrink * (moved - x[j])), r.min, r.max);
    }
    ++sph_trials;
    if (adversarial(spherical)) {
      ++sph_ok;
      const double sd = dist(spherical);
      if (sd > 0 && out.queries < cfg.max_queries) {
        // Contract toward x so the distance becomes (1 - delta) * d.
        const double target = (1.0 - delta) * current_dist;
        const double t = std::clamp(1.0 - target / sd, 0.0, 1.0);
        for (std::size_t j = 0; j < n; ++j) {
          candidate[j] = std::clamp(static_cast<float>(spherical[j] + t * (static_cast<double>(x[j]) - spherical[j])), r.min, r.max);
        }
        ++src_trials;
        if (adversarial(candidate)) {
          ++src_ok;
          const double cd = dist(candidate);
          if (cd <= current_dist) {
            current = candidate;
            current_dist = cd;
            if (cfg.on_accept) cfg.on_accept(current, current_dist);
          }
        }
      }
    }
    if (out.iterations % cfg.adapt_every == 0) {
      if (sph_trials > 0) sigma *= static_cast<double>(sph_ok) / static_cast<double>(sph_trials) > 0.5 ? 1.1 : 0.9;
      if (src_trials > 0) delta *= static_cast<double>(src_ok) / static_cast<double>(src_trials) > 0.25 ? 1.1 : 0.9;
      delta = std::min(delta, 0.5);
      sph_trials = sph_ok = src_trials = src_ok = 0;
    }
  }
  out.adversarial = current;
  finish(s, x, y_true, out);
  return out;
}

// ---------------------------------------------------------------- suite

std::vector<OutcomeRow> run_attack_suite(const AttackSurface& s, const Dataset& data, std::span<const std::uint32_t> ids,
                                         const AttackSuiteConfig& cfg,
                                         const std::function<void(const std::vector<OutcomeRow>&)>& sink) {
  for (const auto& spec : cfg.grid) {
    for (double st : spec.strengths) {
      if (!(st >= 0)) throw ConfigError("attack strengths must be >= 0");
    }
  }
  if (cfg.ifgsm_steps < 1) throw ConfigError("ifgsm steps must be >= 1");
  const std::size_t threads = cfg.threads == 0 ? worker_threads() : cfg.threads;
  std::vector<std::vector<OutcomeRow>> results(ids.size());
  std::vector<char> done(ids.size(), 0);
  std::size_t next = 0;
  std::mutex mu;
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    const auto id = ids[i];
    if (id >= data.size()) throw ContractError("attack suite: example id " + std::to_string(id) + " out of range");
    const auto ex = data.example(id);
    std::vector<OutcomeRow> rows;
    std::optional<bool> clean_wrong;
    const auto fallback = [&] {
      if (!clean_wrong) clean_wrong = s.decision(ex.image) != ex.label;
      return *clean_wrong;
    };
    for (const auto& spec : cfg.grid) {
      const auto name = to_string(spec.kind);
      const auto row = [&](double strength, bool success, double l2bar, std::int64_t queries) {
        rows.push_back({id, name, s.scenario(), strength, success, l2bar, queries});
      };
      if (spec.kind == AttackKind::fgsm || spec.kind == AttackKind::ifgsm) {
        for (double st : spec.strengths) {
          try {
            const double eps = epsilon_for_strength(st, s.bounds());
            const auto o = spec.kind == AttackKind::fgsm ? fgsm(s, ex.image, ex.label, eps, cfg.gradient)
                                                         : ifgsm(s, ex.image, ex.label, eps, cfg.ifgsm_steps, cfg.gradient);
            row(st, o.success, o.l2bar, o.queries);
          } catch (const Error&) {
            row(st, fallback(), 0.0, 0);
          }
        }
        continue;
      }
      std::optional<AttackOutcome> o;
      try {
        if (spec.kind == AttackKind::deepfool) {
          o = deepfool(s, ex.image, ex.label, cfg.deepfool);
        } else if (spec.kind == AttackKind::lbfgs) {
          o = lbfgs_attack(s, ex.image, ex.label, cfg.lbfgs);
        } else {
          auto rng = make_rng(cfg.seed, "attack/boundary", id);
          o = boundary_attack(s, ex.image, ex.label, rng, cfg.boundary);
        }
      } catch (const Error&) {
        o.reset();
      }
      for (double st : spec.strengths) {
        if (o) row(st, o->success && o->l2bar <= st, o->l2bar, o->queries);
        else row(st, fallback(), 0.0, 0);
      }
    }
    std::lock_guard lock(mu);
    results[i] = std::move(rows);
    done[i] = 1;
    while (next < ids.size() && done[next]) {
      if (sink) sink(results[next]);
      ++next;
    }
  });
  std::vector<OutcomeRow> all;
  for (auto& r : results) all.insert(all.end(), r.begin(), r.end());
  return all;
}

// ---------------------------------------------------------------- CSV

namespace {

constexpr const char* kOutcomeHeader = "example_id,attack,scenario,strength,success,l2bar,queries";

}  // namespace

std::string format_outcomes(const std::vector<OutcomeRow>& rows) {
  std::string out;
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%u,%s,%s,%.9g,%d,%.9g,%lld\n", r.example_id, r.attack.c_str(),
                  to_string(r.scenario).c_str(), r.strength, r.success ? 1 : 0, r.l2bar,
                  static_cast<long long>(r.queries));
    out += buf;
  }
  return out;
}

std::vector<OutcomeRow> parse_outcomes(const std::string& csv, const std::string& source) {
  std::vector<OutcomeRow> rows;
  std::size_t pos = 0;
  bool header = true;
  while (pos < csv.size()) {
    auto end = csv.find('\n', pos);
    if (end == std::string::npos) end = csv.size();
    const std::string line = csv.substr(pos, end - pos);
    const auto offset = pos;
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != kOutcomeHeader) throw FormatError(source + ": unexpected outcome header", offset);
      header = false;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw FormatError(source + ": expected 7 fields", offset);
    try {
      OutcomeRow r;
      r.example_id = static_cast<std::uint32_t>(std::stoul(f[0]));
      r.attack = f[1];
      attack_kind_from_string(r.attack);
      r.scenario = scenario_from_string(f[2]);
      r.strength = std::stod(f[3]);
      if (f[4] != "0" && f[4] != "1") throw ConfigError("success must be 0 or 1");
      r.success = f[4] == "1";
      r.l2bar = std::stod(f[5]);
      r.queries = std::stoll(f[6]);
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw FormatError(source + ": bad outcome row (" + e.what() + ")", offset);
    }
  }
  if (header) throw FormatError(source + ": missing outcome header", 0);
  return rows;
}

std::vector<OutcomeRow> read_outcomes(const std::filesystem::path& path) {
  return parse_outcomes(read_file(path), path.string());
}

OutcomeWriter::OutcomeWriter(const std::filesystem::path& path) : path_(path) {
  std::ofstream f(path_, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path_.string());
  f << kOutcomeHeader << '\n';
}

void OutcomeWriter::write(const std::vector<OutcomeRow>& rows) {
  std::ofstream f(path_, std::ios::binary | std::ios::app);
  f << format_outcomes(rows);
  f.flush();
  if (!f) throw IoError("failed writing " + path_.string());
}

}  // namespace mshield
