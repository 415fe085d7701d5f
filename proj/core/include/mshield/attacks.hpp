#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mshield/datasets.hpp"
#include "mshield/model.hpp"
#include "mshield/rng.hpp"

namespace mshield {

enum class Scenario { direct, retrieval };
std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

/// A classifier as the attacker sees it.
///
/// Attacks optimise against the crafting model (its logits, gradients and
/// decisions); success is judged by `decision`. Both are the same model
/// except in the retrieval scenario. All methods take one example without a
/// batch axis and are safe to call from several threads at once.
class AttackSurface {
 public:
  virtual ~AttackSurface() = default;
  virtual Shape input_shape() const = 0;
  virtual int num_classes() const = 0;
  virtual PixelRange bounds() const = 0;
  virtual Scenario scenario() const { return Scenario::direct; }
  virtual bool has_gradients() const { return true; }

  /// Judged decision.
  virtual int decision(const Tensor& x) const = 0;
  virtual int crafting_decision(const Tensor& x) const { return decision(x); }
  /// Crafting logits [C].
  virtual Tensor logits(const Tensor& x) const = 0;
  /// d/dx of the cross-entropy between the crafting logits and `target` ([C], simplex).
  virtual Tensor loss_gradient(const Tensor& x, const Tensor& target, double* loss = nullptr) const = 0;
  /// Jacobian [C, numel(x)] of the crafting logits.
  virtual Tensor logit_jacobian(const Tensor& x, Tensor* logits = nullptr) const = 0;
};

/// Baseline g'(phi'(x)), attacked and judged on itself.
class BaselineSurface final : public AttackSurface {
 public:
  BaselineSurface(const BaselineParams& params, PixelRange bounds) : params_(&params), bounds_(bounds) {}
  Shape input_shape() const override { return params_->phi_prime.input_shape(); }
  int num_classes() const override { return params_->num_classes; }
  PixelRange bounds() const override { return bounds_; }
  int decision(const Tensor& x) const override;
  Tensor logits(const Tensor& x) const override;
  Tensor loss_gradient(const Tensor& x, const Tensor& target, double* loss) const override;
  Tensor logit_jacobian(const Tensor& x, Tensor* logits) const override;

 private:
  const BaselineParams* params_;
  PixelRange bounds_;
};

/// RaCNN in the gray-box setting: retrieval re-runs on every call and is
/// excluded from the gradient.
class RacnnSurface final : public AttackSurface {
 public:
  RacnnSurface(const RacnnParams& params, RetrievalContext ctx, PixelRange bounds)
      : params_(&params), ctx_(ctx), bounds_(bounds) {}
  Shape input_shape() const override { return params_->phi.input_shape(); }
  int num_classes() const override { return params_->num_classes; }
  PixelRange bounds() const override { return bounds_; }
  int decision(const Tensor& x) const override;
  Tensor logits(const Tensor& x) const override;
  Tensor loss_gradient(const Tensor& x, const Tensor& target, double* loss) const override;
  Tensor logit_jacobian(const Tensor& x, Tensor* logits) const override;

 private:
  const RacnnParams* params_;
  RetrievalContext ctx_;
  PixelRange bounds_;
};

/// Crafts on g'(phi'(x)) and judges with the RaCNN decision.
class RetrievalAttackSurface final : public AttackSurface {
 public:
  RetrievalAttackSurface(const BaselineParams& crafting, const RacnnParams& judged, RetrievalContext ctx,
                         PixelRange bounds)
      : crafting_(crafting, bounds), judged_(judged, ctx, bounds) {}
  Shape input_shape() const override { return crafting_.input_shape(); }
  int num_classes() const override { return crafting_.num_classes(); }
  PixelRange bounds() const override { return crafting_.bounds(); }
  Scenario scenario() const override { return Scenario::retrieval; }
  int decision(const Tensor& x) const override { return judged_.decision(x); }
  int crafting_decision(const Tensor& x) const override { return crafting_.decision(x); }
  Tensor logits(const Tensor& x) const override { return crafting_.logits(x); }
  Tensor loss_gradient(const Tensor& x, const Tensor& target, double* loss) const override {
    return crafting_.loss_gradient(x, target, loss);
  }
  Tensor logit_jacobian(const Tensor& x, Tensor* logits) const override {
    return crafting_.logit_jacobian(x, logits);
  }

 private:
  BaselineSurface crafting_;
  RacnnSurface judged_;
};

/// logits = W x + b, W [C, D]. Analytic gradients.
class AffineSurface final : public AttackSurface {
 public:
  AffineSurface(Tensor weight, Tensor bias, PixelRange bounds);
  Shape input_shape() const override { return {weight_.dim(1)}; }
  int num_classes() const override { return static_cast<int>(weight_.dim(0)); }
  PixelRange bounds() const override { return bounds_; }
  int decision(const Tensor& x) const override;
  Tensor logits(const Tensor& x) const override;
  Tensor loss_gradient(const Tensor& x, const Tensor& target, double* loss) const override;
  Tensor logit_jacobian(const Tensor& x, Tensor* logits) const override;

 private:
  Tensor weight_, bias_;
  PixelRange bounds_;
};

/// Hides the gradients of another surface; only decisions remain.
class DecisionOnlySurface final : public AttackSurface {
 public:
  explicit DecisionOnlySurface(const AttackSurface& inner) : inner_(&inner) {}
  Shape input_shape() const override { return inner_->input_shape(); }
  int num_classes() const override { return inner_->num_classes(); }
  PixelRange bounds() const override { return inner_->bounds(); }
  Scenario scenario() const override { return inner_->scenario(); }
  bool has_gradients() const override { return false; }
  int decision(const Tensor& x) const override { return inner_->decision(x); }
  int crafting_decision(const Tensor& x) const override { return inner_->crafting_decision(x); }
  Tensor logits(const Tensor& x) const override;
  Tensor loss_gradient(const Tensor& x, const Tensor& target, double* loss) const override;
  Tensor logit_jacobian(const Tensor& x, Tensor* logits) const override;

 private:
  const AttackSurface* inner_;
};

struct AttackOutcome {
  Tensor adversarial;
  /// Judged decision differs from the true label.
  bool success = false;
  /// Model evaluations (forward or forward+backward) spent.
  std::int64_t queries = 0;
  int iterations = 0;
  double l2bar = 0;
  /// DeepFool: accumulated residual before overshoot and clipping.
  Tensor residual;
  /// Set when the attack stopped abnormally (e.g. a singular DeepFool step).
  std::string note;
};

struct GradientAttackOptions {
  /// Descend on the loss of `target` instead of ascending on the true label's.
  bool targeted = false;
  int target = -1;
};

/// x' = clip(x + eps * sign(grad)).
AttackOutcome fgsm(const AttackSurface& s, const Tensor& x, int y_true, double epsilon,
                   const GradientAttackOptions& opt = {});
/// S clipped FGSM steps of size eps / S.
AttackOutcome ifgsm(const AttackSurface& s, const Tensor& x, int y_true, double epsilon, int steps,
                    const GradientAttackOptions& opt = {});

struct DeepFoolConfig {
  int max_iter = 50;
  double overshoot = 0.02;
};
AttackOutcome deepfool(const AttackSurface& s, const Tensor& x, int y_true, const DeepFoolConfig& cfg = {});

struct LbfgsAttackConfig {
  /// -1 picks the least likely class of the clean input.
  int target = -1;
  double c_init = 1.0;
  /// Factor-of-10 moves of c before bisecting.
  int c_expand_steps = 4;
  int bisection_steps = 4;
  int max_iter = 60;
  int history = 10;
};
/// min_x' c ||x' - x||^2 + CE(x', target) over the pixel box, searching for the
/// largest c (smallest distortion) whose minimiser flips the decision.
AttackOutcome lbfgs_attack(const AttackSurface& s, const Tensor& x, int y_true, const LbfgsAttackConfig& cfg = {});

struct BoundaryConfig {
  std::int64_t max_queries = 5000;
  double spherical_step = 0.01;
  double source_step = 0.01;
  int init_attempts = 100;
  int blend_steps = 20;
  /// Iterations between step-size adaptations.
  int adapt_every = 10;
  /// Called with every accepted iterate and its L2 distance to x.
  std::function<void(const Tensor&, double)> on_accept;
};
AttackOutcome boundary_attack(const AttackSurface& s, const Tensor& x, int y_true, Rng& rng,
                              const BoundaryConfig& cfg = {});

enum class AttackKind { fgsm, ifgsm, deepfool, lbfgs, boundary };
std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);

struct AttackSpec {
  AttackKind kind = AttackKind::fgsm;
  /// In normalized-L2 units.
  std::vector<double> strengths;
};

/// FGSM / iFGSM budget eps for a strength in normalized-L2 units: a full
/// sign step of size eps has normalized L2 exactly `strength`.
double epsilon_for_strength(double strength, PixelRange range);

struct AttackSuiteConfig {
  std::vector<AttackSpec> grid;
  std::uint64_t seed = 0;
  int ifgsm_steps = 10;
  GradientAttackOptions gradient;
  DeepFoolConfig deepfool;
  LbfgsAttackConfig lbfgs;
  BoundaryConfig boundary;
  /// 0 means worker_threads().
  std::size_t threads = 0;
};

struct OutcomeRow {
  std::uint32_t example_id = 0;
  std::string attack;
  Scenario scenario = Scenario::direct;
  double strength = 0;
  bool success = false;
  double l2bar = 0;
  std::int64_t queries = 0;
};

/// Every attack of the grid at every strength on every example. Minimum-norm
/// attacks (DeepFool, L-BFGS, Boundary) run once per example; their row at
/// strength s counts as a success only when the found perturbation has
/// normalized L2 <= s. A throwing attack yields a row that succeeds exactly
/// when the clean input is already misclassified. `sink` receives each
/// example's rows in ascending example order.
std::vector<OutcomeRow> run_attack_suite(const AttackSurface& s, const Dataset& data,
                                         std::span<const std::uint32_t> ids, const AttackSuiteConfig& cfg,
                                         const std::function<void(const std::vector<OutcomeRow>&)>& sink = {});

/// Outcome CSV: example_id,attack,scenario,strength,success,l2bar,queries.
class OutcomeWriter {
 public:
  explicit OutcomeWriter(const std::filesystem::path& path);
  void write(const std::vector<OutcomeRow>& rows);

 private:
  std::filesystem::path path_;
};

std::string format_outcomes(const std::vector<OutcomeRow>& rows);
std::vector<OutcomeRow> parse_outcomes(const std::string& csv, const std::string& source = "outcomes");
std::vector<OutcomeRow> read_outcomes(const std::filesystem::path& path);

}  // namespace mshield
