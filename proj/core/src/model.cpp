#include "mshield/model.hpp"

#include <algorithm>
#include <cmath>

#include "mshield/error.hpp"

namespace mshield {

namespace {

using L = LayerSpec;

struct ConvWidths {
  std::int64_t c1, c2, c3, c4, c5, df, g_hidden, gp1, gp2;
};

ModelPreset conv_preset(const std::string& name, const Shape& input, int classes, const ConvWidths& w) {
  if (input.size() != 3 || input[1] != 32 || input[2] != 32) {
    throw DimensionError(name + " expects [C,32,32] inputs, got " + shape_string(input));
  }
  ModelPreset p;
  p.name = name;
  p.input_shape = input;
  p.num_classes = classes;
  p.phi = {L::conv(w.c1, 3),    L::bn(), L::conv(w.c2, 3),    L::bn(), L::relu(),
           L::conv(w.c3, 3, 2), L::bn(), L::relu(),           L::conv(w.c4, 3), L::bn(),
           L::relu(),           L::conv(w.c5, 4, 2),          L::bn(), L::conv(w.df, 4)};
  p.phi_prime = {L::conv(w.c1, 3), L::bn(), L::relu(), L::conv(w.c2, 3),    L::bn(),
                 L::relu(),        L::conv(w.c3, 3, 2), L::bn(), L::relu(), L::conv(w.c4, 3),
                 L::bn(),          L::relu(),           L::conv(w.c5, 4, 2), L::bn()};
  p.g = {L::linear(w.g_hidden), L::bn(), L::relu(), L::linear(classes)};
  p.g_prime = {L::linear(w.gp1), L::bn(), L::relu(), L::linear(w.gp2), L::bn(), L::relu(), L::linear(classes)};
  return p;
}

ModelPreset mlp_preset(const Shape& input, int classes) {
  if (input.size() != 1) throw DimensionError("mlp-spheres expects vector inputs, got " + shape_string(input));
  ModelPreset p;
  p.name = "mlp-spheres";
  p.input_shape = input;
  p.num_classes = classes;
  p.phi_prime = {L::linear(128), L::bn(), L::relu(), L::linear(128), L::bn()};
  p.phi = p.phi_prime;
  p.phi.push_back(L::linear(64));
  p.g = {L::linear(32), L::bn(), L::relu(), L::linear(classes)};
  p.g_prime = {L::linear(64), L::bn(), L::relu(), L::linear(classes)};
  return p;
}

template <class T>
BasicVar<T> bind(BasicTape<T>& tape, BasicTensor<T>& t, ParamBinding binding) {
  return binding == ParamBinding::frozen ? tape.constant(t) : tape.param(t);
}

}  // namespace

std::int64_t ModelPreset::feature_dim() const {
  return static_cast<std::int64_t>(shape_numel(layer_shapes(input_shape, phi).back()));
}

std::int64_t ModelPreset::key_dim() const {
  return static_cast<std::int64_t>(shape_numel(layer_shapes(input_shape, phi_prime).back()));
}

ModelPreset make_preset(const std::string& name, const Shape& input_shape, int num_classes) {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (name == "small-cifar") {
    return conv_preset(name, input_shape, num_classes, {96, 96, 96, 192, 192, 256, 64, 512, 128});
  }
  if (name == "tiny-cifar") {
    return conv_preset(name, input_shape, num_classes, {16, 16, 16, 32, 32, 64, 32, 128, 64});
  }
  if (name == "mlp-spheres") return mlp_preset(input_shape, num_classes);
  throw ConfigError("unknown model preset \"" + name + "\"");
}

std::vector<std::string> preset_names() { return {"small-cifar", "tiny-cifar", "mlp-spheres"}; }

template <class T>
void RacnnParamsT<T>::visit_params(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  phi.visit_params([&](const std::string& n, BasicTensor<T>& t) { fn("phi." + n, t); });
  fn("U", U);
  g.visit_params([&](const std::string& n, BasicTensor<T>& t) { fn("g." + n, t); });
}

template <class T>
void RacnnParamsT<T>::visit_state(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  phi.visit_state([&](const std::string& n, BasicTensor<T>& t) { fn("phi." + n, t); });
  fn("U", U);
  g.visit_state([&](const std::string& n, BasicTensor<T>& t) { fn("g." + n, t); });
}

template <class T>
void BaselineParamsT<T>::visit_params(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  phi_prime.visit_params([&](const std::string& n, BasicTensor<T>& t) { fn("phi_prime." + n, t); });
  g_prime.visit_params([&](const std::string& n, BasicTensor<T>& t) { fn("g_prime." + n, t); });
}

template <class T>
void BaselineParamsT<T>::visit_state(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  phi_prime.visit_state([&](const std::string& n, BasicTensor<T>& t) { fn("phi_prime." + n, t); });
  g_prime.visit_state([&](const std::string& n, BasicTensor<T>& t) { fn("g_prime." + n, t); });
}

template struct RacnnParamsT<float>;
template struct RacnnParamsT<double>;
template struct BaselineParamsT<float>;
template struct BaselineParamsT<double>;

RacnnParams init_racnn(const ModelPreset& preset, std::uint64_t seed, bool freeze_phi, const BaselineParams* pretrained) {
  RacnnParams p;
  p.preset = preset.name;
  p.num_classes = preset.num_classes;
  p.freeze_phi = freeze_phi;
  auto phi_specs = preset.phi;
  if (freeze_phi) {
    phi_specs = preset.phi_prime;
    phi_specs.push_back(preset.phi.back());
  }
  p.phi = Sequential<float>(preset.input_shape, phi_specs, seed, "init/phi");
  const auto df = p.phi.output_dim();
  p.g = Sequential<float>(Shape{df}, preset.g, seed, "init/g");
  p.U = Tensor(Shape{df, df}, 0.0f);
  for (std::int64_t i = 0; i < df; ++i) p.U[static_cast<std::size_t>(i * df + i)] = 1.0f / std::sqrt(static_cast<float>(df));
  p.U.set_requires_grad(true);
  if (freeze_phi) {
    if (pretrained == nullptr) throw ContractError("freeze_phi needs the pretrained phi' weights");
    if (pretrained->phi_prime.specs() != preset.phi_prime || pretrained->phi_prime.input_shape() != preset.input_shape) {
      throw ContractError("freeze_phi: pretrained network does not match preset " + preset.name);
    }
    for (std::size_t i = 0; i < pretrained->phi_prime.size(); ++i) {
      const auto& src = pretrained->phi_prime.layer(i);
      auto& dst = p.phi.layer(i);
      dst.weight = src.weight;
      dst.bias = src.bias;
      dst.bn = src.bn;
      dst.frozen = true;
    }
  }
  return p;
}

BaselineParams init_baseline(const ModelPreset& preset, std::uint64_t seed) {
  BaselineParams p;
  p.preset = preset.name;
  p.num_classes = preset.num_classes;
  p.phi_prime = Sequential<float>(preset.input_shape, preset.phi_prime, seed, "init/phi_prime");
  p.g_prime = Sequential<float>(Shape{p.phi_prime.output_dim()}, preset.g_prime, seed, "init/g_prime");
  return p;
}

Tensor NetworkKeyExtractor::extract(const Tensor& batch) const {
  const Shape inner(batch.shape().begin() + 1, batch.shape().end());
  if (batch.rank() < 2 || inner != net_->input_shape()) {
    throw DimensionError("key extractor expects [N]+" + shape_string(net_->input_shape()) + ", got " +
                         shape_string(batch.shape()));
  }
  return net_->infer(batch);
}

std::vector<std::vector<std::uint32_t>> retrieve_neighbors(const RetrievalContext& ctx, const Tensor& batch) {
  if (ctx.index == nullptr || ctx.extractor == nullptr || ctx.candidates == nullptr) {
    throw ContractError("retrieval context is incomplete");
  }
  if (ctx.k < 1) throw ConfigError("K must be >= 1");
  const Tensor keys = ctx.extractor->extract(batch);
  const auto n = static_cast<std::size_t>(keys.dim(0));
  const auto dk = static_cast<std::size_t>(keys.dim(1));
  std::vector<std::vector<std::uint32_t>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& nb : ctx.index->query(keys.values().subspan(i * dk, dk), static_cast<std::size_t>(ctx.k))) {
      out[i].push_back(nb.id);
    }
  }
  return out;
}

template <class T>
BasicVar<T> phi_forward(BasicTape<T>& tape, RacnnParamsT<T>& params, BasicVar<T> x, Mode mode, ParamBinding binding) {
  return params.phi.forward(tape, x, mode, binding);
}

template <class T>
BasicVar<T> neighbor_features(BasicTape<T>& tape, RacnnParamsT<T>& params, const RetrievalContext& ctx,
                              const std::vector<std::vector<std::uint32_t>>& ids, ParamBinding binding) {
  if (ids.empty()) throw ContractError("neighbor_features: empty batch");
  const auto k = ids.front().size();
  if (k == 0) throw ContractError("neighbor_features: K must be >= 1");
  std::vector<std::uint32_t> flat;
  for (const auto& row : ids) {
    if (row.size() != k) throw DimensionError("neighbor_features: rows hold different neighbour counts");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  const auto n = static_cast<std::int64_t>(ids.size());
  const auto df = params.feature_dim();
  if (binding == ParamBinding::frozen && ctx.candidate_features != nullptr) {
    const Tensor& cache = *ctx.candidate_features;
    if (cache.rank() != 2 || cache.dim(1) != df) {
      throw DimensionError("candidate feature cache is " + shape_string(cache.shape()) + ", expected [M, " +
                           std::to_string(df) + "]");
    }
    std::vector<T> vals(flat.size() * static_cast<std::size_t>(df));
    for (std::size_t i = 0; i < flat.size(); ++i) {
      if (flat[i] >= cache.dim(0)) throw DimensionError("neighbour id out of range of the feature cache");
      const auto row = cache.values().subspan(flat[i] * static_cast<std::size_t>(df), static_cast<std::size_t>(df));
      std::copy(row.begin(), row.end(), vals.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(df)));
    }
    return tape.constant(BasicTensor<T>(Shape{n, static_cast<std::int64_t>(k), df}, std::move(vals)));
  }
  if (ctx.candidates == nullptr) throw ContractError("neighbor_features: no candidate data");
  std::vector<std::uint32_t> unique = flat;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::vector<std::uint32_t> pos(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    pos[i] = static_cast<std::uint32_t>(std::lower_bound(unique.begin(), unique.end(), flat[i]) - unique.begin());
  }
  auto inputs = tape.constant(ctx.candidates->gather(unique).template cast<T>());
  auto feats = phi_forward(tape, params, inputs, Mode::eval, binding);
  auto rows = ops::gather_rows(feats, std::span<const std::uint32_t>(pos));
  return ops::reshape(rows, Shape{n, static_cast<std::int64_t>(k), df});
}

template <class T>
RacnnOutput<T> racnn_forward(BasicTape<T>& tape, RacnnParamsT<T>& params, const RetrievalContext& ctx, BasicVar<T> x,
                             Mode mode, ParamBinding binding) {
  auto ids = retrieve_neighbors(ctx, tape.value_tensor(x).template cast<float>());
  return racnn_forward(tape, params, ctx, x, std::move(ids), mode, binding);
}

template <class T>
RacnnOutput<T> racnn_forward(BasicTape<T>& tape, RacnnParamsT<T>& params, const RetrievalContext& ctx, BasicVar<T> x,
                             std::vector<std::vector<std::uint32_t>> neighbor_ids, Mode mode, ParamBinding binding) {
  if (static_cast<std::int64_t>(neighbor_ids.size()) != x.shape()[0]) {
    throw DimensionError("racnn_forward: " + std::to_string(neighbor_ids.size()) + " neighbour lists for a batch of " +
                         std::to_string(x.shape()[0]));
  }
  RacnnOutput<T> out;
  out.query_features = phi_forward(tape, params, x, mode, binding);
  out.neighbor_features = neighbor_features(tape, params, ctx, neighbor_ids, binding);
  auto u = bind(tape, params.U, binding);
  out.betas = ops::attention_scores(out.neighbor_features, ops::linear(out.query_features, u));
  out.alphas = ops::softmax(out.betas);
  out.projected = ops::convex_combine(out.alphas, out.neighbor_features);
  out.logits = params.g.forward(tape, out.projected, mode, binding);
  out.neighbor_ids = std::move(neighbor_ids);
  return out;
}

template <class T>
BasicVar<T> baseline_forward(BasicTape<T>& tape, BaselineParamsT<T>& params, BasicVar<T> x, Mode mode,
                             ParamBinding binding) {
  return params.g_prime.forward(tape, params.phi_prime.forward(tape, x, mode, binding), mode, binding);
}

#define MSHIELD_INSTANTIATE_MODEL(T)                                                                              \
  template BasicVar<T> phi_forward(BasicTape<T>&, RacnnParamsT<T>&, BasicVar<T>, Mode, ParamBinding);            \
  template BasicVar<T> neighbor_features(BasicTape<T>&, RacnnParamsT<T>&, const RetrievalContext&,               \
                                         const std::vector<std::vector<std::uint32_t>>&, ParamBinding);         \
  template RacnnOutput<T> racnn_forward(BasicTape<T>&, RacnnParamsT<T>&, const RetrievalContext&, BasicVar<T>,   \
                                        Mode, ParamBinding);                                                     \
  template RacnnOutput<T> racnn_forward(BasicTape<T>&, RacnnParamsT<T>&, const RetrievalContext&, BasicVar<T>,   \
                                        std::vector<std::vector<std::uint32_t>>, Mode, ParamBinding);            \
  template BasicVar<T> baseline_forward(BasicTape<T>&, BaselineParamsT<T>&, BasicVar<T>, Mode, ParamBinding);

MSHIELD_INSTANTIATE_MODEL(float)
MSHIELD_INSTANTIATE_MODEL(double)

#undef MSHIELD_INSTANTIATE_MODEL

ProjectionTrace attend_project(const Tensor& U, const Tensor& f, const Tensor& Phi) {
  if (U.rank() != 2 || U.dim(0) != U.dim(1)) throw DimensionError("attend_project: U must be square, got " + shape_string(U.shape()));
  const auto df = U.dim(0);
  if (f.rank() != 1 || f.dim(0) != df) {
    throw DimensionError("attend_project: query feature " + shape_string(f.shape()) + " vs U " + shape_string(U.shape()));
  }
  if (Phi.rank() != 2 || Phi.dim(1) != df) {
    throw DimensionError("attend_project: neighbour features " + shape_string(Phi.shape()) + " must be [K, " +
                         std::to_string(df) + "]");
  }
  if (Phi.dim(0) < 1) throw ContractError("attend_project: K must be >= 1");
  const auto k = Phi.dim(0);
  Tape tape;
  auto phi = tape.constant(Phi.reshaped(Shape{1, k, df}));
  auto uf = ops::linear(tape.constant(f.reshaped(Shape{1, df})), tape.constant(U));
  auto betas = ops::attention_scores(phi, uf);
  auto alphas = ops::softmax(betas);
  auto projected = ops::convex_combine(alphas, phi);
  return {tape.value_tensor(betas).reshaped(Shape{k}), tape.value_tensor(alphas).reshaped(Shape{k}),
          tape.value_tensor(projected).reshaped(Shape{df}), {}};
}

std::vector<ProjectionTrace> projection_traces(const RacnnOutput<float>& out) {
  auto& tape = *out.logits.tape;
  const auto n = out.betas.shape()[0], k = out.betas.shape()[1], df = out.projected.shape()[1];
  const auto betas = tape.value(out.betas), alphas = tape.value(out.alphas), proj = tape.value(out.projected);
  std::vector<ProjectionTrace> traces;
  for (std::int64_t i = 0; i < n; ++i) {
    ProjectionTrace t;
    t.betas = Tensor(Shape{k}, std::vector<float>(betas.begin() + i * k, betas.begin() + (i + 1) * k));
    t.alphas = Tensor(Shape{k}, std::vector<float>(alphas.begin() + i * k, alphas.begin() + (i + 1) * k));
    t.projected = Tensor(Shape{df}, std::vector<float>(proj.begin() + i * df, proj.begin() + (i + 1) * df));
    t.neighbor_ids = out.neighbor_ids[static_cast<std::size_t>(i)];
    traces.push_back(std::move(t));
  }
  return traces;
}

Tensor precompute_candidate_features(const RacnnParams& params, const Dataset& candidates) {
  constexpr std::size_t chunk = 128;
  const auto df = params.feature_dim();
  std::vector<float> out(candidates.size() * static_cast<std::size_t>(df));
  std::vector<std::uint32_t> ids;
  for (std::size_t s = 0; s < candidates.size(); s += chunk) {
    const auto e = std::min(candidates.size(), s + chunk);
    ids.resize(e - s);
    for (std::size_t i = s; i < e; ++i) ids[i - s] = static_cast<std::uint32_t>(i);
    const Tensor f = params.phi.infer(candidates.gather(ids));
    std::copy(f.values().begin(), f.values().end(), out.begin() + static_cast<std::ptrdiff_t>(s * static_cast<std::size_t>(df)));
  }
  return Tensor(Shape{static_cast<std::int64_t>(candidates.size()), df}, std::move(out));
}

std::vector<int> argmax_rows(std::span<const float> logits, std::size_t width) {
  std::vector<int> out;
  for (std::size_t r = 0; r + width <= logits.size(); r += width) {
    const auto row = logits.subspan(r, width);
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

std::vector<int> predict_racnn(const RacnnParams& params, const RetrievalContext& ctx, const Tensor& batch) {
  auto& p = const_cast<RacnnParams&>(params);
  Tape tape;
  auto out = racnn_forward(tape, p, ctx, tape.constant(batch), Mode::eval, ParamBinding::frozen);
  return argmax_rows(tape.value(out.logits), static_cast<std::size_t>(params.num_classes));
}

std::vector<int> predict_baseline(const BaselineParams& params, const Tensor& batch) {
  auto& p = const_cast<BaselineParams&>(params);
  Tape tape;
  auto logits = baseline_forward(tape, p, tape.constant(batch), Mode::eval, ParamBinding::frozen);
  return argmax_rows(tape.value(logits), static_cast<std::size_t>(params.num_classes));
}

}  // namespace mshield
