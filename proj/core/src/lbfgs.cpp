#include "mshield/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "mshield/error.hpp"

namespace mshield {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

LbfgsResult minimize_box(const Objective& f, std::vector<double> z0, std::span<const double> lower,
                         std::span<const double> upper, const LbfgsOptions& opt) {
  const std::size_t n = z0.size();
  if (lower.size() != n || upper.size() != n) throw DimensionError("minimize_box: bounds differ in length from x0");
  if (opt.history < 1 || opt.max_iter < 0) throw ConfigError("minimize_box: bad options");
  const auto project = [&](std::vector<double>& z) {
    for (std::size_t i = 0; i < n; ++i) z[i] = std::clamp(z[i], lower[i], upper[i]);
  };
  LbfgsResult r;
  r.z = std::move(z0);
  project(r.z);
  std::vector<double> g(n), g_new(n), d(n), z_new(n), alpha_buf;
  r.f = f(r.z, g);
  ++r.evaluations;
  std::deque<std::pair<std::vector<double>, std::vector<double>>> mem;  // (s, y)
  std::deque<double> rho;

  const auto pg_norm = [&](const std::vector<double>& z, const std::vector<double>& grad) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(std::clamp(z[i] - grad[i], lower[i], upper[i]) - z[i]));
    return m;
  };

  for (r.iterations = 0; r.iterations < opt.max_iter; ++r.iterations) {
    if (pg_norm(r.z, g) < opt.pg_tol) {
      r.converged = true;
      break;
    }
    // Two-loop recursion.
    d = g;
    alpha_buf.assign(mem.size(), 0.0);
    for (std::size_t j = mem.size(); j-- > 0;) {
      alpha_buf[j] = rho[j] * dot(mem[j].first, d);
      for (std::size_t i = 0; i < n; ++i) d[i] -= alpha_buf[j] * mem[j].second[i];
    }
    if (!mem.empty()) {
      const auto& [s, y] = mem.back();
      const double gamma = dot(s, y) / dot(y, y);
      for (auto& v : d) v *= gamma;
    }
    for (std::size_t j = 0; j < mem.size(); ++j) {
      const double beta = rho[j] * dot(mem[j].second, d);
      for (std::size_t i = 0; i < n; ++i) d[i] += (alpha_buf[j] - beta) * mem[j].first[i];
    }
    for (auto& v : d) v = -v;
    if (dot(g, d) >= 0) {
      mem.clear();
      rho.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
    }
    double step = 1.0;
    if (mem.empty()) {
      // First step: scale so the largest coordinate move is at most 1.
      double dmax = 0;
      for (double v : d) dmax = std::max(dmax, std::abs(v));
      if (dmax > 1.0) step = 1.0 / dmax;
    }
    bool accepted = false;
    double f_new = 0;
    for (int bt = 0; bt < opt.max_backtracks; ++bt, step *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) z_new[i] = r.z[i] + step * d[i];
      project(z_new);
      double decrease = 0;
      for (std::size_t i = 0; i < n; ++i) decrease += g[i] * (z_new[i] - r.z[i]);
      f_new = f(z_new, g_new);
      ++r.evaluations;
      if (std::isfinite(f_new) && f_new <= r.f + 1e-4 * decrease) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      r.converged = pg_norm(r.z, g) < opt.pg_tol;
      break;
    }
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = z_new[i] - r.z[i];
      y[i] = g_new[i] - g[i];
    }
    const double sy = dot(s, y);
    if (sy > 1e-12 * std::max(1.0, dot(y, y))) {
      mem.emplace_back(std::move(s), std::move(y));
      rho.push_back(1.0 / sy);
      if (static_cast<int>(mem.size()) > opt.history) {
        mem.pop_front();
        rho.pop_front();
      }
    }
    std::swap(r.z, z_new);
    std::swap(g, g_new);
    r.f = f_new;
    if (opt.stop && opt.stop(r.z)) {
      ++r.iterations;
      break;
    }
  }
  return r;
}

}  // namespace mshield
