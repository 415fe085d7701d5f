#pragma once

#include <functional>
#include <span>
#include <vector>

namespace mshield {

/// f(z, grad) returns the objective and writes its gradient.
using Objective = std::function<double(std::span<const double> z, std::span<double> grad)>;

struct LbfgsOptions {
  int max_iter = 100;
  int history = 10;
  /// Stop when the projected gradient's max-norm falls below this.
  double pg_tol = 1e-6;
  int max_backtracks = 30;
  /// Optional early exit, checked after every accepted iterate.
  std::function<bool(std::span<const double> z)> stop;
};

struct LbfgsResult {
  std::vector<double> z;
  double f = 0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

/// Projected limited-memory BFGS on the box [lower, upper]: two-loop
/// recursion for the direction, iterates projected onto the box, Armijo
/// backtracking along the projected path.
LbfgsResult minimize_box(const Objective& f, std::vector<double> z0, std::span<const double> lower,
                         std::span<const double> upper, const LbfgsOptions& opt = {});

}  // namespace mshield
