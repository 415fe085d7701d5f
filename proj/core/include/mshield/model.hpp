#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mshield/datasets.hpp"
#include "mshield/nn.hpp"
#include "mshield/retrieval.hpp"

namespace mshield {

/// Layer lists for the four networks of one architecture.
///
/// phi ends with the attention layer (the last entry); the layers before it
/// form the trunk, which mirrors phi_prime shape for shape.
struct ModelPreset {
  std::string name;
  Shape input_shape;
  int num_classes = 0;
  std::vector<LayerSpec> phi;
  std::vector<LayerSpec> g;
  std::vector<LayerSpec> phi_prime;
  std::vector<LayerSpec> g_prime;

  std::size_t trunk_size() const { return phi.size() - 1; }
  std::int64_t feature_dim() const;
  std::int64_t key_dim() const;
};

/// small-cifar: the 96/192-channel conv net for 3x32x32 inputs.
/// tiny-cifar: the same topology at 16/32 channels and a 64-d feature.
/// mlp-spheres: fully-connected nets for vector inputs of any length.
ModelPreset make_preset(const std::string& name, const Shape& input_shape, int num_classes);
std::vector<std::string> preset_names();

template <class T>
struct RacnnParamsT {
  std::string preset;
  int num_classes = 0;
  bool freeze_phi = false;
  Sequential<T> phi;
  /// Attention matrix [df, df].
  BasicTensor<T> U;
  Sequential<T> g;

  std::int64_t feature_dim() const { return U.rank() == 2 ? U.dim(0) : 0; }
  void visit_params(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
  void visit_state(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);

  template <class V>
  RacnnParamsT<V> cast() const {
    return {preset, num_classes, freeze_phi, phi.template cast<V>(), U.template cast<V>(), g.template cast<V>()};
  }
};

/// The pretrained classifier g'(phi'(x)); phi' also keys the retrieval index.
template <class T>
struct BaselineParamsT {
  std::string preset;
  int num_classes = 0;
  Sequential<T> phi_prime;
  Sequential<T> g_prime;

  void visit_params(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
  void visit_state(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);

  template <class V>
  BaselineParamsT<V> cast() const {
    return {preset, num_classes, phi_prime.template cast<V>(), g_prime.template cast<V>()};
  }
};

using RacnnParams = RacnnParamsT<float>;
using BaselineParams = BaselineParamsT<float>;

/// U starts at I / sqrt(df). With `freeze_phi`, the trunk takes phi''s layer
/// list and weights from `pretrained` (required) and stays fixed; the
/// attention layer, U and g still train.
RacnnParams init_racnn(const ModelPreset& preset, std::uint64_t seed, bool freeze_phi = false,
                       const BaselineParams* pretrained = nullptr);
BaselineParams init_baseline(const ModelPreset& preset, std::uint64_t seed);

/// phi' as a retrieval key extractor (eval mode, no gradients).
class NetworkKeyExtractor final : public KeyExtractor {
 public:
  explicit NetworkKeyExtractor(const BaselineParams& params) : net_(&params.phi_prime) {}
  Tensor extract(const Tensor& batch) const override;
  Shape input_shape() const override { return net_->input_shape(); }
  std::int64_t key_dim() const override { return net_->output_dim(); }

 private:
  const Sequential<float>* net_;
};

/// Everything racnn_forward needs besides the parameters.
struct RetrievalContext {
  const RetrievalIndex* index = nullptr;
  const KeyExtractor* extractor = nullptr;
  /// Raw candidate inputs; ids index into this dataset.
  const Dataset* candidates = nullptr;
  int k = 10;
  /// phi features of every candidate under frozen parameters. When set,
  /// frozen forwards read neighbour features from here instead of
  /// recomputing them.
  const Tensor* candidate_features = nullptr;
};

/// K nearest candidate ids for every example of `batch`. Keys are computed
/// from the batch exactly as given.
std::vector<std::vector<std::uint32_t>> retrieve_neighbors(const RetrievalContext& ctx, const Tensor& batch);

template <class T>
struct RacnnOutput {
  BasicVar<T> logits;             // [N, C]
  BasicVar<T> query_features;     // [N, df]
  BasicVar<T> neighbor_features;  // [N, K, df]
  BasicVar<T> betas;              // [N, K]
  BasicVar<T> alphas;             // [N, K]
  BasicVar<T> projected;          // [N, df]
  std::vector<std::vector<std::uint32_t>> neighbor_ids;
};

template <class T>
BasicVar<T> phi_forward(BasicTape<T>& tape, RacnnParamsT<T>& params, BasicVar<T> x, Mode mode,
                        ParamBinding binding);

/// phi features of the given candidates as [N, K, df], computed in eval mode
/// (or read from ctx.candidate_features under a frozen binding). Repeated
/// candidates are evaluated once.
template <class T>
BasicVar<T> neighbor_features(BasicTape<T>& tape, RacnnParamsT<T>& params, const RetrievalContext& ctx,
                              const std::vector<std::vector<std::uint32_t>>& ids, ParamBinding binding);

/// Retrieval (no gradient), then attention projection and g. The query runs
/// through phi in `mode`; neighbours always use eval-mode statistics.
template <class T>
RacnnOutput<T> racnn_forward(BasicTape<T>& tape, RacnnParamsT<T>& params, const RetrievalContext& ctx,
                             BasicVar<T> x, Mode mode, ParamBinding binding);

/// As above with the neighbour ids supplied instead of retrieved.
template <class T>
RacnnOutput<T> racnn_forward(BasicTape<T>& tape, RacnnParamsT<T>& params, const RetrievalContext& ctx,
                             BasicVar<T> x, std::vector<std::vector<std::uint32_t>> neighbor_ids, Mode mode,
                             ParamBinding binding);

template <class T>
BasicVar<T> baseline_forward(BasicTape<T>& tape, BaselineParamsT<T>& params, BasicVar<T> x, Mode mode,
                             ParamBinding binding);

struct ProjectionTrace {
  Tensor betas;      // [K]
  Tensor alphas;     // [K]
  Tensor projected;  // [df]
  std::vector<std::uint32_t> neighbor_ids;
};

/// betas = Phi (U f), alphas = softmax(betas), projected = alphas^T Phi.
/// f is [df], Phi is [K, df].
ProjectionTrace attend_project(const Tensor& U, const Tensor& f, const Tensor& Phi);

/// Per-example traces of a forward pass.
std::vector<ProjectionTrace> projection_traces(const RacnnOutput<float>& out);

/// phi features [M, df] of every candidate under frozen parameters.
Tensor precompute_candidate_features(const RacnnParams& params, const Dataset& candidates);

/// Predicted classes, in batches, eval mode.
std::vector<int> predict_racnn(const RacnnParams& params, const RetrievalContext& ctx, const Tensor& batch);
std::vector<int> predict_baseline(const BaselineParams& params, const Tensor& batch);

std::vector<int> argmax_rows(std::span<const float> logits, std::size_t width);

extern template struct RacnnParamsT<float>;
extern template struct RacnnParamsT<double>;
extern template struct BaselineParamsT<float>;
extern template struct BaselineParamsT<double>;

}  // namespace mshield
