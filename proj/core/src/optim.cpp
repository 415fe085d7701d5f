#include "mshield/optim.hpp"

#include <algorithm>
#include <cmath>

namespace mshield {

void Adam::add(std::string name, Tensor& param) {
  Slot s;
  s.name = std::move(name);
  s.param = &param;
  s.m.assign(param.numel(), 0.0f);
  s.v.assign(param.numel(), 0.0f);
  slots_.push_back(std::move(s));
}

std::size_t Adam::step() {
  std::size_t updated = 0;
  for (auto& s : slots_) {
    if (!s.param->has_grad()) continue;
    const auto g = s.param->grad();
    if (std::all_of(g.begin(), g.end(), [](float x) { return x == 0.0f; })) {
      s.param->clear_grad();
      continue;
    }
    ++s.t;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    auto p = s.param->values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = static_cast<float>(cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i]);
      s.v[i] = static_cast<float>(cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
      const double mhat = s.m[i] / c1;
      const double vhat = s.v[i] / c2;
      p[i] = static_cast<float>(p[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
    s.param->clear_grad();
    ++updated;
  }
  return updated;
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param->clear_grad();
}

}  // namespace mshield
