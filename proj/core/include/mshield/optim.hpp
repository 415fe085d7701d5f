#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mshield/tensor.hpp"

namespace mshield {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed set of parameter tensors. Each parameter keeps its own
/// step count, so one that receives no gradient is neither moved nor aged.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void add(std::string name, Tensor& param);
  /// Updates every registered parameter whose gradient buffer exists and is
  /// not all zero, then clears all gradients. Returns the number updated.
  std::size_t step();
  void zero_grad();
  std::size_t size() const noexcept { return slots_.size(); }

 private:
  struct Slot {
    std::string name;
    Tensor* param = nullptr;
    std::vector<float> m, v;
    std::int64_t t = 0;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
};

}  // namespace mshield
