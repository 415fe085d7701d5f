#include "mshield/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mshield/error.hpp"
#include "mshield/parallel.hpp"

namespace mshield {

std::vector<double> kraemer_sample(int k, Rng& rng) {
  if (k < 1) throw ContractError("kraemer_sample: K must be >= 1");
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> cuts(static_cast<std::size_t>(k + 1));
  cuts.front() = 0.0;
  cuts.back() = 1.0;
  for (int i = 1; i < k; ++i) cuts[static_cast<std::size_t>(i)] = uni(rng);
  std::sort(cuts.begin() + 1, cuts.end() - 1);
  std::vector<double> alphas(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < alphas.size(); ++i) alphas[i] = cuts[i + 1] - cuts[i];
  return alphas;
}

Tensor one_hot(std::span<const int> labels, int num_classes) {
  Tensor t(Shape{static_cast<std::int64_t>(labels.size()), num_classes}, 0.0f);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    t[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(labels[i])] = 1.0f;
  }
  return t;
}

MixedExample global_mixup_pair(const LabeledExample& a, const LabeledExample& b, int num_classes, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("global_mixup_pair: lambda must lie in [0, 1]");
  if (a.image.shape() != b.image.shape()) {
    throw DimensionError("global_mixup_pair: " + shape_string(a.image.shape()) + " vs " + shape_string(b.image.shape()));
  }
  MixedExample m;
  m.x = Tensor(a.image.shape());
  const auto l = static_cast<float>(lambda);
  for (std::size_t i = 0; i < m.x.numel(); ++i) m.x[i] = l * a.image[i] + (1.0f - l) * b.image[i];
  const int ya[] = {a.label};
  const int yb[] = {b.label};
  const Tensor ta = one_hot(ya, num_classes), tb = one_hot(yb, num_classes);
  m.target = Tensor(Shape{num_classes});
  for (int c = 0; c < num_classes; ++c) {
    m.target[static_cast<std::size_t>(c)] = static_cast<float>(lambda * ta[static_cast<std::size_t>(c)] +
                                                               (1.0 - lambda) * tb[static_cast<std::size_t>(c)]);
  }
  return m;
}

Tensor mixup_targets(const std::vector<std::vector<int>>& labels, const Tensor& alphas, int num_classes) {
  const auto n = static_cast<std::int64_t>(labels.size());
  if (alphas.rank() != 2 || alphas.dim(0) != n) {
    throw DimensionError("mixup_targets: alphas " + shape_string(alphas.shape()) + " for " + std::to_string(n) +
                         " label rows");
  }
  const auto k = alphas.dim(1);
  std::vector<double> acc(static_cast<std::size_t>(n * num_classes), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (static_cast<std::int64_t>(labels[static_cast<std::size_t>(i)].size()) != k) {
      throw DimensionError("mixup_targets: label row length differs from K");
    }
    for (std::int64_t j = 0; j < k; ++j) {
      const int y = labels[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (y < 0 || y >= num_classes) throw ContractError("mixup_targets: label out of range");
      acc[static_cast<std::size_t>(i * num_classes + y)] += alphas[static_cast<std::size_t>(i * k + j)];
    }
  }
  std::vector<float> out(acc.begin(), acc.end());
  return Tensor(Shape{n, num_classes}, std::move(out));
}

namespace {

std::size_t count_correct(std::span<const float> logits, std::size_t width, std::span<const int> labels) {
  const auto pred = argmax_rows(logits, width);
  std::size_t c = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) c += pred[i] == labels[i];
  return c;
}

std::vector<int> argmax_targets(const Tensor& targets) {
  return argmax_rows(targets.values(), static_cast<std::size_t>(targets.dim(1)));
}

double mean_cross_entropy(std::span<const float> logits, std::size_t width, std::span<const int> labels) {
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.subspan(i * width, width);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0;
    for (float v : row) z += std::exp(static_cast<double>(v) - mx);
    total += mx + std::log(z) - row[static_cast<std::size_t>(labels[i])];
  }
  return labels.empty() ? 0.0 : total / static_cast<double>(labels.size());
}

template <class Fn>
EvalResult evaluate_chunks(std::size_t n, int classes, const Dataset& data, const Fn& logits_of) {
  constexpr std::size_t chunk = 100;
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<std::vector<float>> logits(chunks);
  parallel_for(chunks, worker_threads(), [&](std::size_t c) {
    std::vector<std::uint32_t> ids;
    for (std::size_t i = c * chunk; i < std::min(n, (c + 1) * chunk); ++i) ids.push_back(static_cast<std::uint32_t>(i));
    logits[c] = logits_of(data.gather(ids));
  });
  std::vector<float> all;
  for (auto& l : logits) all.insert(all.end(), l.begin(), l.end());
  const std::span<const int> labels(data.labels.data(), n);
  EvalResult r;
  r.predictions = argmax_rows(all, static_cast<std::size_t>(classes));
  r.loss = mean_cross_entropy(all, static_cast<std::size_t>(classes), labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += r.predictions[i] == labels[i];
  r.accuracy = n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
  return r;
}

std::vector<std::vector<std::uint32_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  auto rng = make_rng(seed, "train/shuffle", static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(batch_size)) {
    const auto e = std::min(n, s + static_cast<std::size_t>(batch_size));
    if (e - s < 2 && !out.empty()) break;  // batch statistics need two examples
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s), order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

Tensor batch_of(const Dataset& data, const std::vector<std::uint32_t>& ids, bool augment, std::uint64_t seed, int epoch) {
  if (!augment) return data.gather(ids);
  return augmented_batch(data, ids, derive_seed(seed, "train/augment", static_cast<std::uint64_t>(epoch)));
}

constexpr std::size_t kBnRefreshExamples = 1024;

Tensor bn_refresh_batch(const Dataset& train) {
  const std::size_t n = std::min(train.size(), kBnRefreshExamples);
  std::vector<std::uint32_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::uint32_t>(i * train.size() / n);
  return train.gather(ids);
}

// Replaces the momentum-averaged batch-norm statistics with exact ones for the
// current weights before each evaluation.
void refresh_bn(BaselineParams& params, const Dataset& train) {
  const Tensor x = bn_refresh_batch(train);
  params.phi_prime.refresh_batch_norm(x);
  params.g_prime.refresh_batch_norm(params.phi_prime.infer(x));
}

void refresh_bn(RacnnParams& params, RetrievalContext ctx, const Dataset& train) {
  const Tensor x = bn_refresh_batch(train);
  params.phi.refresh_batch_norm(x);
  const Tensor cache = precompute_candidate_features(params, *ctx.candidates);
  ctx.candidate_features = &cache;
  const auto n = x.dim(0);
  const auto df = params.feature_dim();
  std::vector<float> projected;
  projected.reserve(static_cast<std::size_t>(n * df));
  constexpr std::int64_t chunk = 128;
  for (std::int64_t start = 0; start < n; start += chunk) {
    std::vector<std::uint32_t> ids;
    for (std::int64_t i = start; i < std::min(n, start + chunk); ++i) ids.push_back(static_cast<std::uint32_t>(i));
    Tape tape;
    const Tensor part = Dataset{x, std::vector<int>(static_cast<std::size_t>(n), 0), 1, {}, false}.gather(ids);
    const auto out = racnn_forward(tape, params, ctx, tape.constant(part), Mode::eval, ParamBinding::frozen);
    const auto v = tape.value(out.projected);
    projected.insert(projected.end(), v.begin(), v.end());
  }
  params.g.refresh_batch_norm(Tensor(Shape{n, df}, std::move(projected)));
}

double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

}  // namespace

StepResult ce_step(RacnnParams& params, const RetrievalContext& ctx, const Tensor& batch, std::span<const int> labels,
                   Adam& opt) {
  Tape tape;
  auto out = racnn_forward(tape, params, ctx, tape.constant(batch), Mode::train, ParamBinding::trainable);
  auto loss = ops::cross_entropy_soft(out.logits, one_hot(labels, params.num_classes));
  tape.backward(loss);
  StepResult r{tape.value(loss)[0], count_correct(tape.value(out.logits), static_cast<std::size_t>(params.num_classes), labels),
               labels.size()};
  opt.step();
  return r;
}

Var local_mixup_loss(Tape& tape, RacnnParams& params, const RetrievalContext& ctx,
                     const std::vector<std::vector<std::uint32_t>>& neighbor_ids, const Tensor& alphas,
                     Tensor* targets_out) {
  if (ctx.index == nullptr) throw ContractError("local mixup needs a retrieval index");
  std::vector<std::vector<int>> labels;
  for (const auto& row : neighbor_ids) {
    auto& l = labels.emplace_back();
    for (auto id : row) l.push_back(ctx.index->labels().at(id));
  }
  Tensor targets = mixup_targets(labels, alphas, params.num_classes);
  auto phi = neighbor_features(tape, params, ctx, neighbor_ids, ParamBinding::trainable);
  auto mixed = ops::convex_combine(tape.constant(alphas), phi);
  auto logits = params.g.forward(tape, mixed, Mode::train, ParamBinding::trainable);
  auto loss = ops::cross_entropy_soft(logits, targets);
  if (targets_out != nullptr) *targets_out = std::move(targets);
  return loss;
}

StepResult local_mixup_step(RacnnParams& params, const RetrievalContext& ctx, const Tensor& batch, Adam& opt, Rng& rng) {
  const auto ids = retrieve_neighbors(ctx, batch);
  const auto n = static_cast<std::int64_t>(ids.size());
  const auto k = static_cast<std::int64_t>(ctx.k);
  Tensor alphas(Shape{n, k});
  for (std::int64_t i = 0; i < n; ++i) {
    const auto a = kraemer_sample(ctx.k, rng);
    for (std::int64_t j = 0; j < k; ++j) alphas[static_cast<std::size_t>(i * k + j)] = static_cast<float>(a[static_cast<std::size_t>(j)]);
  }
  // Float rounding can leave a row a few ulps off the simplex.
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < k; ++j) s += alphas[static_cast<std::size_t>(i * k + j)];
    for (std::int64_t j = 0; j < k; ++j) alphas[static_cast<std::size_t>(i * k + j)] = static_cast<float>(alphas[static_cast<std::size_t>(i * k + j)] / s);
  }
  Tape tape;
  Tensor targets;
  auto loss = local_mixup_loss(tape, params, ctx, ids, alphas, &targets);
  tape.backward(loss);
  const auto logits_id = tape.inputs_of(loss.id)[0];
  const auto truth = argmax_targets(targets);
  StepResult r{tape.value(loss)[0],
               count_correct(tape.value_of(logits_id), static_cast<std::size_t>(params.num_classes), truth),
               ids.size()};
  opt.step();
  return r;
}

void TrainConfig::validate(std::size_t candidates) const {
  if (n_ce < 1) throw ConfigError("train: n_ce must be >= 1");
  if (n_mu < 0) throw ConfigError("train: n_mu must be >= 0");
  if (k < 1 || static_cast<std::size_t>(k) > candidates) {
    throw ConfigError("train: K = " + std::to_string(k) + " must be in [1, " + std::to_string(candidates) + "]");
  }
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (!(adam.lr > 0)) throw ConfigError("train: lr must be > 0");
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::string out = "epoch,split,loss,accuracy\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g\n", r.epoch, r.split.c_str(), r.loss, r.accuracy);
    out += buf;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write metrics to " + path.string());
  f << out;
  if (!f) throw IoError("failed writing " + path.string());
}

TrainResult train_racnn(const TrainConfig& cfg, RacnnParams init, const Dataset& train, RetrievalContext ctx,
                        const Dataset& test, const MetricSink& sink) {
  if (ctx.index == nullptr) throw ContractError("train_racnn: no retrieval index");
  cfg.validate(ctx.index->size());
  ctx.k = cfg.k;
  ctx.candidate_features = nullptr;
  TrainResult result;
  RacnnParams params = std::move(init);
  Adam opt(cfg.adam);
  params.visit_params([&](const std::string& n, Tensor& t) { opt.add(n, t); });
  const auto emit = [&](MetricRow row) {
    if (sink) sink(row);
    result.metrics.push_back(std::move(row));
  };
  const std::size_t cycle = static_cast<std::size_t>(cfg.n_ce + cfg.n_mu);
  std::size_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double ce_loss = 0, mu_loss = 0;
    std::size_t ce_correct = 0, ce_count = 0, ce_batches = 0, mu_correct = 0, mu_count = 0, mu_batches = 0;
    for (const auto& ids : epoch_batches(train.size(), cfg.batch_size, cfg.seed, epoch)) {
      const Tensor batch = batch_of(train, ids, cfg.augment, cfg.seed, epoch);
      if (step % cycle < static_cast<std::size_t>(cfg.n_ce)) {
        const auto labels = train.gather_labels(ids);
        const auto r = ce_step(params, ctx, batch, labels, opt);
        ce_loss += r.loss;
        ce_correct += r.correct;
        ce_count += r.count;
        ++ce_batches;
        ++result.ce_steps;
      } else {
        auto rng = make_rng(cfg.seed, "train/mixup", step);
        const auto r = local_mixup_step(params, ctx, batch, opt, rng);
        mu_loss += r.loss;
        mu_correct += r.correct;
        mu_count += r.count;
        ++mu_batches;
        ++result.mu_steps;
      }
      ++step;
    }
    if (ce_batches > 0) emit({epoch, "train", ce_loss / static_cast<double>(ce_batches), ratio(ce_correct, ce_count)});
    if (mu_batches > 0) emit({epoch, "mixup", mu_loss / static_cast<double>(mu_batches), ratio(mu_correct, mu_count)});
    refresh_bn(params, ctx, train);
    const auto ev = evaluate_racnn(params, ctx, test, cfg.eval_limit);
    emit({epoch, "test", ev.loss, ev.accuracy});
    if (epoch == 1 || ev.accuracy > result.best_accuracy) {
      result.best_accuracy = ev.accuracy;
      result.best_epoch = epoch;
      result.best = params;
    }
  }
  return result;
}

PretrainResult pretrain_baseline(const PretrainConfig& cfg, BaselineParams init, const Dataset& train,
                                 const Dataset& test, const MetricSink& sink) {
  if (cfg.batch_size < 2) throw ConfigError("pretrain: batch_size must be >= 2");
  if (cfg.epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
  PretrainResult result;
  BaselineParams params = std::move(init);
  Adam opt(cfg.adam);
  params.visit_params([&](const std::string& n, Tensor& t) { opt.add(n, t); });
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double total = 0;
    std::size_t correct = 0, count = 0, batches = 0;
    for (const auto& ids : epoch_batches(train.size(), cfg.batch_size, cfg.seed, epoch)) {
      const Tensor batch = batch_of(train, ids, cfg.augment, cfg.seed, epoch);
      const auto labels = train.gather_labels(ids);
      Tape tape;
      auto logits = baseline_forward(tape, params, tape.constant(batch), Mode::train, ParamBinding::trainable);
      auto loss = ops::cross_entropy_soft(logits, one_hot(labels, params.num_classes));
      tape.backward(loss);
      total += tape.value(loss)[0];
      correct += count_correct(tape.value(logits), static_cast<std::size_t>(params.num_classes), labels);
      count += labels.size();
      ++batches;
      opt.step();
    }
    MetricRow tr{epoch, "train", total / static_cast<double>(std::max<std::size_t>(batches, 1)), ratio(correct, count)};
    if (sink) sink(tr);
    result.metrics.push_back(tr);
    refresh_bn(params, train);
    const auto ev = evaluate_baseline(params, test, cfg.eval_limit);
    MetricRow te{epoch, "test", ev.loss, ev.accuracy};
    if (sink) sink(te);
    result.metrics.push_back(te);
    if (epoch == 1 || ev.accuracy > result.best_accuracy) {
      result.best_accuracy = ev.accuracy;
      result.best_epoch = epoch;
      result.best = params;
    }
  }
  return result;
}

EvalResult evaluate_racnn(const RacnnParams& params, RetrievalContext ctx, const Dataset& data, std::size_t limit) {
  const std::size_t n = limit == 0 ? data.size() : std::min(limit, data.size());
  Tensor cache;
  if (ctx.candidate_features == nullptr && ctx.candidates != nullptr) {
    cache = precompute_candidate_features(params, *ctx.candidates);
    ctx.candidate_features = &cache;
  }
  auto& p = const_cast<RacnnParams&>(params);
  return evaluate_chunks(n, params.num_classes, data, [&](const Tensor& batch) {
    Tape tape;
    auto out = racnn_forward(tape, p, ctx, tape.constant(batch), Mode::eval, ParamBinding::frozen);
    const auto v = tape.value(out.logits);
    return std::vector<float>(v.begin(), v.end());
  });
}

EvalResult evaluate_baseline(const BaselineParams& params, const Dataset& data, std::size_t limit) {
  const std::size_t n = limit == 0 ? data.size() : std::min(limit, data.size());
  auto& p = const_cast<BaselineParams&>(params);
  return evaluate_chunks(n, params.num_classes, data, [&](const Tensor& batch) {
    Tape tape;
    auto logits = baseline_forward(tape, p, tape.constant(batch), Mode::eval, ParamBinding::frozen);
    const auto v = tape.value(logits);
    return std::vector<float>(v.begin(), v.end());
  });
}

}  // namespace mshield
