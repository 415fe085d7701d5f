#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mshield/model.hpp"
#include "mshield/optim.hpp"
#include "mshield/rng.hpp"

namespace mshield {

/// Uniform draw from the (K-1)-simplex: sorted uniforms, adjacent differences.
std::vector<double> kraemer_sample(int k, Rng& rng);

struct MixedExample {
  Tensor x;
  Tensor target;  // [C], on the simplex
};

/// (lambda x_a + (1 - lambda) x_b, lambda y_a + (1 - lambda) y_b).
MixedExample global_mixup_pair(const LabeledExample& a, const LabeledExample& b, int num_classes, double lambda);

/// Soft targets sum_k alphas[n,k] * onehot(labels[n,k]); alphas is [N,K].
Tensor mixup_targets(const std::vector<std::vector<int>>& labels, const Tensor& alphas, int num_classes);

Tensor one_hot(std::span<const int> labels, int num_classes);

struct StepResult {
  double loss = 0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

/// One Adam update on the cross-entropy of racnn_forward against the true labels.
StepResult ce_step(RacnnParams& params, const RetrievalContext& ctx, const Tensor& batch, std::span<const int> labels,
                   Adam& opt);

/// One Adam update on g(sum_k alpha_k phi(x'_k)) against sum_k alpha_k y'_k,
/// alphas drawn per example with kraemer_sample. U is not involved.
StepResult local_mixup_step(RacnnParams& params, const RetrievalContext& ctx, const Tensor& batch, Adam& opt,
                            Rng& rng);

/// The mixup loss for fixed neighbours and coefficients, recorded on `tape`.
Var local_mixup_loss(Tape& tape, RacnnParams& params, const RetrievalContext& ctx,
                     const std::vector<std::vector<std::uint32_t>>& neighbor_ids, const Tensor& alphas,
                     Tensor* targets_out = nullptr);

struct TrainConfig {
  int n_ce = 1;
  int n_mu = 0;
  int k = 10;
  int batch_size = 32;
  int epochs = 20;
  AdamConfig adam;
  std::uint64_t seed = 0;
  bool augment = true;
  bool freeze_phi = false;
  /// Test examples evaluated after each epoch; 0 means all.
  std::size_t eval_limit = 0;

  void validate(std::size_t candidates) const;
};

struct MetricRow {
  int epoch = 0;
  std::string split;
  double loss = 0;
  double accuracy = 0;
};

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

using MetricSink = std::function<void(const MetricRow&)>;

struct TrainResult {
  RacnnParams best;
  std::vector<MetricRow> metrics;
  int best_epoch = 0;
  double best_accuracy = 0;
  std::size_t ce_steps = 0;
  std::size_t mu_steps = 0;
};

/// Cycles of n_ce CE steps then n_mu mixup steps over shuffled batches; keeps
/// the parameters with the best clean test accuracy. `ctx.k` is overridden by
/// cfg.k.
TrainResult train_racnn(const TrainConfig& cfg, RacnnParams init, const Dataset& train, RetrievalContext ctx,
                        const Dataset& test, const MetricSink& sink = {});

struct PretrainConfig {
  int batch_size = 64;
  int epochs = 20;
  AdamConfig adam;
  std::uint64_t seed = 0;
  bool augment = true;
  std::size_t eval_limit = 0;
};

struct PretrainResult {
  BaselineParams best;
  std::vector<MetricRow> metrics;
  int best_epoch = 0;
  double best_accuracy = 0;
};

PretrainResult pretrain_baseline(const PretrainConfig& cfg, BaselineParams init, const Dataset& train,
                                 const Dataset& test, const MetricSink& sink = {});

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  std::vector<int> predictions;
};

/// Clean loss and accuracy over the first `limit` examples (0 = all).
EvalResult evaluate_racnn(const RacnnParams& params, RetrievalContext ctx, const Dataset& data, std::size_t limit = 0);
EvalResult evaluate_baseline(const BaselineParams& params, const Dataset& data, std::size_t limit = 0);

}  // namespace mshield
