#pragma once

#include <utility>

#include "mshield/tape.hpp"

namespace mshield {

/// Running statistics owned by a batch-norm layer.
template <class T>
struct BatchNormState {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::int64_t channels)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

namespace ops {

template <class T> BasicVar<T> add(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> scale(BasicVar<T> a, T factor);
template <class T> BasicVar<T> sum(BasicVar<T> a);
template <class T> BasicVar<T> mean(BasicVar<T> a);
template <class T> BasicVar<T> reshape(BasicVar<T> a, Shape shape);
/// [N, ...] -> [N, prod(...)]
template <class T> BasicVar<T> flatten(BasicVar<T> a);

/// [M,K] x [K,N] -> [M,N]
template <class T> BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b);
/// x[N,in], weight[out,in], optional bias[out] -> x * weight^T + bias.
template <class T> BasicVar<T> linear(BasicVar<T> x, BasicVar<T> weight);
template <class T> BasicVar<T> linear(BasicVar<T> x, BasicVar<T> weight, BasicVar<T> bias);

/// Valid (unpadded) cross-correlation. input[N,C,H,W], kernel[O,C,kh,kw].
template <class T> BasicVar<T> conv2d(BasicVar<T> input, BasicVar<T> kernel, int stride = 1);
/// Valid average pooling with a square window.
template <class T> BasicVar<T> avg_pool2d(BasicVar<T> input, int window, int stride);

template <class T> BasicVar<T> relu(BasicVar<T> a);

/// Per-channel normalisation over every axis except 1. Input is [N,C] or
/// [N,C,H,W]. Variance is floored at `state.eps`. Train mode uses batch
/// statistics and updates the running ones; eval mode uses the running ones.
template <class T>
BasicVar<T> batch_norm(BasicVar<T> x, BasicVar<T> gamma, BasicVar<T> beta, BatchNormState<T>& state,
                       Mode mode);

/// Row-wise softmax / log-softmax over the last axis of a [N,C] tensor.
template <class T> BasicVar<T> softmax(BasicVar<T> logits);
template <class T> BasicVar<T> log_softmax(BasicVar<T> logits);

/// Mean over the batch of -sum_c target_c * log softmax(logits)_c.
/// Every target row must be on the probability simplex (sum 1 within 1e-6).
template <class T>
BasicVar<T> cross_entropy_soft(BasicVar<T> logits, const BasicTensor<T>& targets);

/// scores[n,k] = <neighbors[n,k,:], query[n,:]>. neighbors[N,K,D], query[N,D].
template <class T> BasicVar<T> attention_scores(BasicVar<T> neighbors, BasicVar<T> query);
/// out[n,:] = sum_k weights[n,k] * neighbors[n,k,:]. weights[N,K], neighbors[N,K,D].
template <class T> BasicVar<T> convex_combine(BasicVar<T> weights, BasicVar<T> neighbors);

/// out[i,:] = rows[ids[i],:]. Repeated ids accumulate gradient.
template <class T> BasicVar<T> gather_rows(BasicVar<T> rows, std::span<const std::uint32_t> ids);
}  // namespace ops

/// Row-major dense helpers shared by the kernels and tests.
void check_simplex_rows(std::span<const float> rows, std::size_t width, double tol);
void check_simplex_rows(std::span<const double> rows, std::size_t width, double tol);

}  // namespace mshield
