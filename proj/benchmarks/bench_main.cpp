#include <benchmark/benchmark.h>

#include <random>

#include "mshield/model.hpp"
#include "mshield/ops.hpp"
#include "mshield/retrieval.hpp"
#include "mshield/rng.hpp"

using namespace mshield;
using namespace mshield::ops;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto channels = state.range(0);
  const Tensor x = random_tensor({16, channels, 32, 32}, 1);
  const Tensor w = random_tensor({channels, channels, 3, 3}, 2);
  for (auto _ : state) {
    Tape tape;
    auto y = conv2d(tape.constant(x), tape.constant(w), 1);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto channels = state.range(0);
  const Tensor x = random_tensor({16, channels, 32, 32}, 1);
  Tensor w = random_tensor({channels, channels, 3, 3}, 2);
  w.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    auto loss = sum(conv2d(tape.input(x), tape.param(w), 1));
    tape.backward(loss);
    w.clear_grad();
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_Conv2dBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_RetrievalQuery(benchmark::State& state) {
  const auto mode = state.range(0) == 0 ? IndexMode::exhaustive : IndexMode::lsh;
  LshConfig cfg;
  cfg.seed = 3;
  cfg.mode = mode;
  const Tensor keys = random_tensor({10000, 64}, 4);
  const RetrievalIndex index(keys, std::vector<int>(10000, 0), cfg);
  const Tensor queries = random_tensor({256, 64}, 5);
  std::size_t q = 0;
  for (auto _ : state) {
    auto r = index.query(queries.values().subspan((q++ % 256) * 64, 64), 10);
    benchmark::DoNotOptimize(r);
  }
  state.SetLabel(to_string(mode));
}
BENCHMARK(BM_RetrievalQuery)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_RacnnForwardTinyCifar(benchmark::State& state) {
  const auto preset = make_preset("tiny-cifar", {3, 32, 32}, 10);
  const auto base = init_baseline(preset, 1);
  auto params = init_racnn(preset, 2, false, &base);
  const Tensor keys = random_tensor({512, preset.key_dim()}, 6);
  std::vector<int> labels(512);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
  Dataset candidates;
  candidates.images = random_tensor({512, 3, 32, 32}, 7);
  candidates.labels = labels;
  candidates.num_classes = 10;
  const RetrievalIndex index(keys, labels, LshConfig{});
  const NetworkKeyExtractor extractor(base);
  const Tensor cache = precompute_candidate_features(params, candidates);
  const RetrievalContext ctx{&index, &extractor, &candidates, 10, &cache};
  const Tensor batch = random_tensor({32, 3, 32, 32}, 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(predict_racnn(params, ctx, batch));
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_RacnnForwardTinyCifar)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
