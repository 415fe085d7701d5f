#include "mshield/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mshield/error.hpp"

namespace mshield {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
void require_same_tape(BasicVar<T> a, BasicVar<T> b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands live on different tapes");
}

template <class T>
void require_same_shape(BasicVar<T> a, BasicVar<T> b, const char* op) {
  require_same_tape(a, b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <class T>
void require_rank(BasicVar<T> a, std::size_t rank, const char* op, const char* what) {
  if (a.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_string(a.shape()));
  }
}

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct ConvGeometry {
  std::int64_t n, c, h, w, o, kh, kw, stride, ho, wo;
  std::int64_t patch() const { return c * kh * kw; }
  std::int64_t positions() const { return ho * wo; }
};

template <class T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const std::int64_t p = g.positions();
  for (std::int64_t ch = 0; ch < g.c; ++ch) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((ch * g.kh + i) * g.kw + j) * p;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const T* src = image + (ch * g.h + oy * g.stride + i) * g.w + j;
          T* dst = row + oy * g.wo;
          if (g.stride == 1) {
            std::copy(src, src + g.wo, dst);
          } else {
            for (std::int64_t ox = 0; ox < g.wo; ++ox) dst[ox] = src[ox * g.stride];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  const std::int64_t p = g.positions();
  for (std::int64_t ch = 0; ch < g.c; ++ch) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((ch * g.kh + i) * g.kw + j) * p;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          T* dst = image + (ch * g.h + oy * g.stride + i) * g.w + j;
          const T* src = row + oy * g.wo;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

}  // namespace

void check_simplex_rows(std::span<const double> rows, std::size_t width, double tol) {
  if (width == 0 || rows.size() % width != 0) throw DimensionError("simplex rows: bad width");
  for (std::size_t r = 0; r < rows.size() / width; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < width; ++c) {
      const double v = rows[r * width + c];
      if (!(v >= -tol)) {
        throw ContractError("target row " + std::to_string(r) + " has negative entry " +
                            std::to_string(v));
      }
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ContractError("target row " + std::to_string(r) + " sums to " + std::to_string(s) +
                          ", not 1");
    }
  }
}

void check_simplex_rows(std::span<const float> rows, std::size_t width, double tol) {
  std::vector<double> d(rows.begin(), rows.end());
  check_simplex_rows(std::span<const double>(d), width, tol);
}

namespace ops {

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  require_same_shape(a, b, "add");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record("add", a.shape(), std::move(out), {a, b}, [ia, ib](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    if (t.needs_grad_at(ia)) accumulate(t.grad_buffer(ia), g);
    if (t.needs_grad_at(ib)) accumulate(t.grad_buffer(ib), g);
  });
}

template <class T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) {
  require_same_shape(a, b, "sub");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record("sub", a.shape(), std::move(out), {a, b}, [ia, ib](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    if (t.needs_grad_at(ia)) accumulate(t.grad_buffer(ia), g);
    if (t.needs_grad_at(ib)) {
      auto d = t.grad_buffer(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  require_same_shape(a, b, "mul");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record("mul", a.shape(), std::move(out), {a, b}, [ia, ib](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto av = t.value_at(ia);
    auto bv = t.value_at(ib);
    if (t.needs_grad_at(ia)) {
      auto d = t.grad_buffer(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.needs_grad_at(ib)) {
      auto d = t.grad_buffer(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

template <class T>
BasicVar<T> scale(BasicVar<T> a, T factor) {
  auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const auto ia = a.id;
  return a.tape->record("scale", a.shape(), std::move(out), {a}, [ia, factor](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto d = t.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * factor;
  });
}

template <class T>
BasicVar<T> sum(BasicVar<T> a) {
  auto av = a.value();
  T s{0};
  for (auto v : av) s += v;
  const auto ia = a.id;
  return a.tape->record("sum", Shape{1}, std::vector<T>{s}, {a}, [ia](BasicTape<T>& t, std::uint32_t self) {
    const T g = t.grad_of(self)[0];
    for (auto& d : t.grad_buffer(ia)) d += g;
  });
}

template <class T>
BasicVar<T> mean(BasicVar<T> a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T{1} / n);
}

template <class T>
BasicVar<T> reshape(BasicVar<T> a, Shape shape) {
  if (shape_numel(shape) != a.value().size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  std::vector<T> out(a.value().begin(), a.value().end());
  const auto ia = a.id;
  return a.tape->record("reshape", std::move(shape), std::move(out), {a}, [ia](BasicTape<T>& t, std::uint32_t self) {
    accumulate(t.grad_buffer(ia), t.grad_of(self));
  });
}

template <class T>
BasicVar<T> flatten(BasicVar<T> a) {
  const auto& s = a.shape();
  if (s.empty()) throw DimensionError("flatten: rank-0 input");
  if (s.size() == 2) return a;
  const std::int64_t n = s[0];
  const auto rest = static_cast<std::int64_t>(a.value().size()) / n;
  return reshape(a, Shape{n, rest});
}

template <class T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  require_same_tape(a, b, "matmul");
  require_rank(a, 2, "matmul", "left operand");
  require_rank(b, 2, "matmul", "right operand");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: left axis 1 (" + std::to_string(k) + ") vs right axis 0 (" +
                         std::to_string(b.shape()[0]) + ")");
  }
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.value().data(), m, k) * ConstMatMap<T>(b.value().data(), k, n);
  const auto ia = a.id, ib = b.id;
  return a.tape->record("matmul", Shape{m, n}, std::move(out), {a, b},
                        [ia, ib, m, k, n](BasicTape<T>& t, std::uint32_t self) {
    ConstMatMap<T> g(t.grad_of(self).data(), m, n);
    if (t.needs_grad_at(ia)) {
      MatMap<T>(t.grad_buffer(ia).data(), m, k).noalias() += g * ConstMatMap<T>(t.value_at(ib).data(), k, n).transpose();
    }
    if (t.needs_grad_at(ib)) {
      MatMap<T>(t.grad_buffer(ib).data(), k, n).noalias() += ConstMatMap<T>(t.value_at(ia).data(), m, k).transpose() * g;
    }
  });
}

namespace {

template <class T>
BasicVar<T> linear_impl(BasicVar<T> x, BasicVar<T> w, const BasicVar<T>* bias) {
  require_same_tape(x, w, "linear");
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const auto n = x.shape()[0], in = x.shape()[1], out_f = w.shape()[0];
  if (w.shape()[1] != in) {
    throw DimensionError("linear: input features (axis 1) = " + std::to_string(in) +
                         " but weight axis 1 = " + std::to_string(w.shape()[1]));
  }
  if (bias != nullptr && bias->shape() != Shape{out_f}) {
    throw DimensionError("linear: bias shape " + shape_string(bias->shape()) + " vs output features " +
                         std::to_string(out_f));
  }
  std::vector<T> out(static_cast<std::size_t>(n * out_f));
  MatMap<T> y(out.data(), n, out_f);
  y.noalias() = ConstMatMap<T>(x.value().data(), n, in) * ConstMatMap<T>(w.value().data(), out_f, in).transpose();
  if (bias != nullptr) {
    auto bv = bias->value();
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t c = 0; c < out_f; ++c) y(r, c) += bv[static_cast<std::size_t>(c)];
  }
  const auto ix = x.id, iw = w.id;
  const std::int64_t ib = bias != nullptr ? static_cast<std::int64_t>(bias->id) : -1;
  auto backward = [ix, iw, ib, n, in, out_f](BasicTape<T>& t, std::uint32_t self) {
    ConstMatMap<T> g(t.grad_of(self).data(), n, out_f);
    if (t.needs_grad_at(ix)) {
      MatMap<T>(t.grad_buffer(ix).data(), n, in).noalias() += g * ConstMatMap<T>(t.value_at(iw).data(), out_f, in);
    }
    if (t.needs_grad_at(iw)) {
      MatMap<T>(t.grad_buffer(iw).data(), out_f, in).noalias() += g.transpose() * ConstMatMap<T>(t.value_at(ix).data(), n, in);
    }
    if (ib >= 0 && t.needs_grad_at(static_cast<std::uint32_t>(ib))) {
      auto d = t.grad_buffer(static_cast<std::uint32_t>(ib));
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t c = 0; c < out_f; ++c) d[static_cast<std::size_t>(c)] += g(r, c);
    }
  };
  if (bias != nullptr) return x.tape->record("linear", Shape{n, out_f}, std::move(out), {x, w, *bias}, backward);
  return x.tape->record("linear", Shape{n, out_f}, std::move(out), {x, w}, backward);
}

}  // namespace

template <class T>
BasicVar<T> linear(BasicVar<T> x, BasicVar<T> weight) {
  return linear_impl<T>(x, weight, nullptr);
}

template <class T>
BasicVar<T> linear(BasicVar<T> x, BasicVar<T> weight, BasicVar<T> bias) {
  require_same_tape(x, bias, "linear");
  return linear_impl<T>(x, weight, &bias);
}

template <class T>
BasicVar<T> conv2d(BasicVar<T> input, BasicVar<T> kernel, int stride) {
  require_same_tape(input, kernel, "conv2d");
  require_rank(input, 4, "conv2d", "input [N,C,H,W]");
  require_rank(kernel, 4, "conv2d", "kernel [O,C,kh,kw]");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  const auto& xs = input.shape();
  const auto& ks = kernel.shape();
  if (ks[1] != xs[1]) {
    throw DimensionError("conv2d: input channels (input axis 1) = " + std::to_string(xs[1]) +
                         " but kernel axis 1 = " + std::to_string(ks[1]));
  }
  if (ks[2] > xs[2] || ks[3] > xs[3]) {
    throw DimensionError("conv2d: kernel spatial axes (2,3) " + shape_string(ks) +
                         " exceed input spatial axes (2,3) " + shape_string(xs));
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, 0, 0};
  g.ho = (g.h - g.kh) / stride + 1;
  g.wo = (g.w - g.kw) / stride + 1;

  const auto patch = g.patch(), pos = g.positions();
  std::vector<T> out(static_cast<std::size_t>(g.n * g.o * pos));
  std::vector<T> cols(static_cast<std::size_t>(patch * pos));
  ConstMatMap<T> wmat(kernel.value().data(), g.o, patch);
  const T* x = input.value().data();
  const auto image_size = g.c * g.h * g.w;
  for (std::int64_t n = 0; n < g.n; ++n) {
    im2col(x + n * image_size, g, cols.data());
    MatMap<T>(out.data() + n * g.o * pos, g.o, pos).noalias() = wmat * ConstMatMap<T>(cols.data(), patch, pos);
  }

  const auto ix = input.id, ik = kernel.id;
  return input.tape->record("conv2d", Shape{g.n, g.o, g.ho, g.wo}, std::move(out), {input, kernel},
                            [ix, ik, g](BasicTape<T>& t, std::uint32_t self) {
    const auto patch = g.patch(), pos = g.positions();
    const auto image_size = g.c * g.h * g.w;
    const bool want_x = t.needs_grad_at(ix), want_k = t.needs_grad_at(ik);
    auto gy = t.grad_of(self);
    const T* x = t.value_at(ix).data();
    ConstMatMap<T> wmat(t.value_at(ik).data(), g.o, patch);
    std::vector<T> cols(static_cast<std::size_t>(patch * pos));
    T* dx = want_x ? t.grad_buffer(ix).data() : nullptr;
    T* dk = want_k ? t.grad_buffer(ik).data() : nullptr;
    for (std::int64_t n = 0; n < g.n; ++n) {
      ConstMatMap<T> gyn(gy.data() + n * g.o * pos, g.o, pos);
      if (want_k) {
        im2col(x + n * image_size, g, cols.data());
        MatMap<T>(dk, g.o, patch).noalias() += gyn * ConstMatMap<T>(cols.data(), patch, pos).transpose();
      }
      if (want_x) {
        MatMap<T>(cols.data(), patch, pos).noalias() = wmat.transpose() * gyn;
        col2im_add(cols.data(), g, dx + n * image_size);
      }
    }
  });
}

template <class T>
BasicVar<T> avg_pool2d(BasicVar<T> input, int window, int stride) {
  require_rank(input, 4, "avg_pool2d", "input [N,C,H,W]");
  if (window < 1 || stride < 1) throw ContractError("avg_pool2d: window and stride must be >= 1");
  const auto& s = input.shape();
  const std::int64_t nc = s[0] * s[1], h = s[2], w = s[3];
  if (window > h || window > w) {
    throw DimensionError("avg_pool2d: window " + std::to_string(window) + " exceeds spatial axes (2,3) of " +
                         shape_string(s));
  }
  const std::int64_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  const T inv = T{1} / static_cast<T>(window * window);
  auto xv = input.value();
  std::vector<T> out(static_cast<std::size_t>(nc * ho * wo));
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        T acc{0};
        for (int i = 0; i < window; ++i)
          for (int j = 0; j < window; ++j)
            acc += xv[static_cast<std::size_t>((p * h + oy * stride + i) * w + ox * stride + j)];
        out[static_cast<std::size_t>((p * ho + oy) * wo + ox)] = acc * inv;
      }
  const auto ix = input.id;
  return input.tape->record("avg_pool2d", Shape{s[0], s[1], ho, wo}, std::move(out), {input},
                            [ix, nc, h, w, ho, wo, window, stride, inv](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto d = t.grad_buffer(ix);
    for (std::int64_t p = 0; p < nc; ++p)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          const T gv = g[static_cast<std::size_t>((p * ho + oy) * wo + ox)] * inv;
          for (int i = 0; i < window; ++i)
            for (int j = 0; j < window; ++j)
              d[static_cast<std::size_t>((p * h + oy * stride + i) * w + ox * stride + j)] += gv;
        }
  });
}

template <class T>
BasicVar<T> relu(BasicVar<T> a) {
  auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T{0} ? av[i] : T{0};
  const auto ia = a.id;
  return a.tape->record("relu", a.shape(), std::move(out), {a}, [ia](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto x = t.value_at(ia);
    auto d = t.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x[i] > T{0}) d[i] += g[i];
  });
}

template <class T>
BasicVar<T> batch_norm(BasicVar<T> x, BasicVar<T> gamma, BasicVar<T> beta, BatchNormState<T>& state, Mode mode) {
  require_same_tape(x, gamma, "batch_norm");
  require_same_tape(x, beta, "batch_norm");
  const auto& s = x.shape();
  if (s.size() != 2 && s.size() != 4) {
    throw DimensionError("batch_norm: input must be [N,C] or [N,C,H,W], got " + shape_string(s));
  }
  const std::int64_t n = s[0], c = s[1];
  const std::int64_t inner = s.size() == 4 ? s[2] * s[3] : 1;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("batch_norm: channel axis 1 has " + std::to_string(c) + " channels but gamma/beta are " +
                         shape_string(gamma.shape()) + "/" + shape_string(beta.shape()));
  }
  if (state.running_mean.shape() != Shape{c} || state.running_var.shape() != Shape{c}) {
    throw DimensionError("batch_norm: running statistics do not match " + std::to_string(c) + " channels");
  }
  const std::int64_t count = n * inner;
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  std::vector<T> mu(static_cast<std::size_t>(c)), inv(static_cast<std::size_t>(c));
  std::vector<char> floored(static_cast<std::size_t>(c), 0);
  auto at = [&](std::int64_t b, std::int64_t ch, std::int64_t p) {
    return static_cast<std::size_t>((b * c + ch) * inner + p);
  };
  if (mode == Mode::train) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double m = 0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t p = 0; p < inner; ++p) m += xv[at(b, ch, p)];
      m /= static_cast<double>(count);
      double v = 0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t p = 0; p < inner; ++p) {
          const double d = xv[at(b, ch, p)] - m;
          v += d * d;
        }
      v /= static_cast<double>(count);
      const auto idx = static_cast<std::size_t>(ch);
      mu[idx] = static_cast<T>(m);
      floored[idx] = v < static_cast<double>(state.eps);
      inv[idx] = static_cast<T>(1.0 / std::sqrt(std::max(v, static_cast<double>(state.eps))));
      const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
      auto& rm = state.running_mean[idx];
      auto& rv = state.running_var[idx];
      rm = static_cast<T>((1 - state.momentum) * rm + state.momentum * m);
      rv = static_cast<T>((1 - state.momentum) * rv + state.momentum * unbiased);
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto idx = static_cast<std::size_t>(ch);
      mu[idx] = state.running_mean[idx];
      inv[idx] = T{1} / std::sqrt(std::max(state.running_var[idx], state.eps));
    }
  }
  std::vector<T> xhat(xv.size()), out(xv.size());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < inner; ++p) {
        const auto i = at(b, ch, p);
        const auto k = static_cast<std::size_t>(ch);
        xhat[i] = (xv[i] - mu[k]) * inv[k];
        out[i] = gv[k] * xhat[i] + bv[k];
      }
  const auto ix = x.id, ig = gamma.id, ib = beta.id;
  const bool train = mode == Mode::train;
  return x.tape->record("batch_norm", s, std::move(out), {x, gamma, beta},
                        [ix, ig, ib, n, c, inner, count, train, inv = std::move(inv), floored = std::move(floored),
                         xhat = std::move(xhat)](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto gam = t.value_at(ig);
    auto at = [&](std::int64_t b, std::int64_t ch, std::int64_t p) {
      return static_cast<std::size_t>((b * c + ch) * inner + p);
    };
    std::vector<T> sum_g(static_cast<std::size_t>(c), T{0}), sum_gx(static_cast<std::size_t>(c), T{0});
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t p = 0; p < inner; ++p) {
          const auto i = at(b, ch, p);
          sum_g[static_cast<std::size_t>(ch)] += g[i];
          sum_gx[static_cast<std::size_t>(ch)] += g[i] * xhat[i];
        }
    if (t.needs_grad_at(ig)) accumulate(t.grad_buffer(ig), std::span<const T>(sum_gx));
    if (t.needs_grad_at(ib)) accumulate(t.grad_buffer(ib), std::span<const T>(sum_g));
    if (!t.needs_grad_at(ix)) return;
    auto dx = t.grad_buffer(ix);
    const T m = static_cast<T>(count);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto k = static_cast<std::size_t>(ch);
      const T scale = gam[k] * inv[k];
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t p = 0; p < inner; ++p) {
          const auto i = at(b, ch, p);
          if (!train) {
            dx[i] += g[i] * scale;
          } else if (floored[k]) {
            dx[i] += scale * (g[i] - sum_g[k] / m);
          } else {
            dx[i] += scale * (g[i] - sum_g[k] / m - xhat[i] * sum_gx[k] / m);
          }
        }
    }
  });
}

template <class T>
BasicVar<T> softmax(BasicVar<T> logits) {
  require_rank(logits, 2, "softmax", "logits");
  const auto n = logits.shape()[0], c = logits.shape()[1];
  auto xv = logits.value();
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * c;
    T* dst = out.data() + r * c;
    const T mx = *std::max_element(row, row + c);
    T z{0};
    for (std::int64_t j = 0; j < c; ++j) z += (dst[j] = std::exp(row[j] - mx));
    for (std::int64_t j = 0; j < c; ++j) dst[j] /= z;
  }
  const auto ix = logits.id;
  return logits.tape->record("softmax", logits.shape(), std::move(out), {logits},
                             [ix, n, c](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto y = t.value_at(self);
    auto d = t.grad_buffer(ix);
    for (std::int64_t r = 0; r < n; ++r) {
      T dot{0};
      for (std::int64_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::int64_t j = 0; j < c; ++j) d[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

template <class T>
BasicVar<T> log_softmax(BasicVar<T> logits) {
  require_rank(logits, 2, "log_softmax", "logits");
  const auto n = logits.shape()[0], c = logits.shape()[1];
  auto xv = logits.value();
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * c;
    T* dst = out.data() + r * c;
    const T mx = *std::max_element(row, row + c);
    T z{0};
    for (std::int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    for (std::int64_t j = 0; j < c; ++j) dst[j] = row[j] - lse;
  }
  const auto ix = logits.id;
  return logits.tape->record("log_softmax", logits.shape(), std::move(out), {logits},
                             [ix, n, c](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto y = t.value_at(self);
    auto d = t.grad_buffer(ix);
    for (std::int64_t r = 0; r < n; ++r) {
      T gs{0};
      for (std::int64_t j = 0; j < c; ++j) gs += g[r * c + j];
      for (std::int64_t j = 0; j < c; ++j) d[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gs;
    }
  });
}

template <class T>
BasicVar<T> cross_entropy_soft(BasicVar<T> logits, const BasicTensor<T>& targets) {
  require_rank(logits, 2, "cross_entropy_soft", "logits");
  if (targets.shape() != logits.shape()) {
    throw DimensionError("cross_entropy_soft: targets " + shape_string(targets.shape()) + " vs logits " +
                         shape_string(logits.shape()));
  }
  const auto n = logits.shape()[0], c = logits.shape()[1];
  check_simplex_rows(targets.values(), static_cast<std::size_t>(c), 1e-6);
  auto xv = logits.value();
  auto tv = targets.values();
  std::vector<T> probs(xv.size());
  std::vector<T> target_mass(static_cast<std::size_t>(n));
  double loss = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * c;
    const T mx = *std::max_element(row, row + c);
    double z = 0;
    for (std::int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(z);
    T mass{0};
    for (std::int64_t j = 0; j < c; ++j) {
      const double ls = static_cast<double>(row[j]) - lse;
      probs[static_cast<std::size_t>(r * c + j)] = static_cast<T>(std::exp(ls));
      loss -= static_cast<double>(tv[static_cast<std::size_t>(r * c + j)]) * ls;
      mass += tv[static_cast<std::size_t>(r * c + j)];
    }
    target_mass[static_cast<std::size_t>(r)] = mass;
  }
  loss /= static_cast<double>(n);
  std::vector<T> tcopy(tv.begin(), tv.end());
  const auto ix = logits.id;
  return logits.tape->record("cross_entropy_soft", Shape{1}, std::vector<T>{static_cast<T>(loss)}, {logits},
                             [ix, n, c, probs = std::move(probs), tcopy = std::move(tcopy),
                              target_mass = std::move(target_mass)](BasicTape<T>& t, std::uint32_t self) {
    const T g = t.grad_of(self)[0] / static_cast<T>(n);
    auto d = t.grad_buffer(ix);
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t j = 0; j < c; ++j) {
        const auto i = static_cast<std::size_t>(r * c + j);
        d[i] += g * (probs[i] * target_mass[static_cast<std::size_t>(r)] - tcopy[i]);
      }
  });
}

template <class T>
BasicVar<T> attention_scores(BasicVar<T> neighbors, BasicVar<T> query) {
  require_same_tape(neighbors, query, "attention_scores");
  require_rank(neighbors, 3, "attention_scores", "neighbors [N,K,D]");
  require_rank(query, 2, "attention_scores", "query [N,D]");
  const auto n = neighbors.shape()[0], k = neighbors.shape()[1], d = neighbors.shape()[2];
  if (query.shape()[0] != n || query.shape()[1] != d) {
    throw DimensionError("attention_scores: query " + shape_string(query.shape()) + " vs neighbors " +
                         shape_string(neighbors.shape()) + " (axes 0 and 2 must agree)");
  }
  auto phi = neighbors.value();
  auto q = query.value();
  std::vector<T> out(static_cast<std::size_t>(n * k));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t j = 0; j < k; ++j) {
      T acc{0};
      for (std::int64_t e = 0; e < d; ++e) acc += phi[(b * k + j) * d + e] * q[b * d + e];
      out[static_cast<std::size_t>(b * k + j)] = acc;
    }
  const auto in = neighbors.id, iq = query.id;
  return neighbors.tape->record("attention_scores", Shape{n, k}, std::move(out), {neighbors, query},
                                [in, iq, n, k, d](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto phi = t.value_at(in);
    auto q = t.value_at(iq);
    if (t.needs_grad_at(in)) {
      auto dphi = t.grad_buffer(in);
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t j = 0; j < k; ++j)
          for (std::int64_t e = 0; e < d; ++e) dphi[(b * k + j) * d + e] += g[b * k + j] * q[b * d + e];
    }
    if (t.needs_grad_at(iq)) {
      auto dq = t.grad_buffer(iq);
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t j = 0; j < k; ++j)
          for (std::int64_t e = 0; e < d; ++e) dq[b * d + e] += g[b * k + j] * phi[(b * k + j) * d + e];
    }
  });
}

template <class T>
BasicVar<T> convex_combine(BasicVar<T> weights, BasicVar<T> neighbors) {
  require_same_tape(weights, neighbors, "convex_combine");
  require_rank(weights, 2, "convex_combine", "weights [N,K]");
  require_rank(neighbors, 3, "convex_combine", "neighbors [N,K,D]");
  const auto n = neighbors.shape()[0], k = neighbors.shape()[1], d = neighbors.shape()[2];
  if (weights.shape()[0] != n || weights.shape()[1] != k) {
    throw DimensionError("convex_combine: weights " + shape_string(weights.shape()) + " vs neighbors " +
                         shape_string(neighbors.shape()) + " (axes 0 and 1 must agree)");
  }
  auto a = weights.value();
  auto phi = neighbors.value();
  std::vector<T> out(static_cast<std::size_t>(n * d), T{0});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t j = 0; j < k; ++j) {
      const T w = a[b * k + j];
      for (std::int64_t e = 0; e < d; ++e) out[b * d + e] += w * phi[(b * k + j) * d + e];
    }
  const auto iw = weights.id, in = neighbors.id;
  return weights.tape->record("convex_combine", Shape{n, d}, std::move(out), {weights, neighbors},
                              [iw, in, n, k, d](BasicTape<T>& t, std::uint32_t self) {
    auto g = t.grad_of(self);
    auto a = t.value_at(iw);
    auto phi = t.value_at(in);
    if (t.needs_grad_at(iw)) {
      auto da = t.grad_buffer(iw);
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t j = 0; j < k; ++j) {
          T acc{0};
          for (std::int64_t e = 0; e < d; ++e) acc += g[b * d + e] * phi[(b * k + j) * d + e];
          da[b * k + j] += acc;
        }
    }
    if (t.needs_grad_at(in)) {
      auto dphi = t.grad_buffer(in);
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t j = 0; j < k; ++j)
          for (std::int64_t e = 0; e < d; ++e) dphi[(b * k + j) * d + e] += a[b * k + j] * g[b * d + e];
    }
  });
}

template <class T>
BasicVar<T> gather_rows(BasicVar<T> rows, std::span<const std::uint32_t> ids) {
  require_rank(rows, 2, "gather_rows", "rows [M,D]");
  const auto m = rows.shape()[0], d = rows.shape()[1];
  const auto n = static_cast<std::int64_t>(ids.size());
  auto src = rows.value();
  std::vector<T> out(static_cast<std::size_t>(n * d));
  for (std::int64_t i = 0; i < n; ++i) {
    if (ids[static_cast<std::size_t>(i)] >= m) {
      throw DimensionError("gather_rows: row " + std::to_string(ids[static_cast<std::size_t>(i)]) +
                           " out of range for axis 0 of " + shape_string(rows.shape()));
    }
    std::copy_n(src.begin() + ids[static_cast<std::size_t>(i)] * d, d, out.begin() + i * d);
  }
  const auto ir = rows.id;
  std::vector<std::uint32_t> idx(ids.begin(), ids.end());
  return rows.tape->record("gather_rows", Shape{n, d}, std::move(out), {rows},
                           [ir, d, idx = std::move(idx)](BasicTape<T>& t, std::uint32_t self) {
    if (!t.needs_grad_at(ir)) return;
    auto g = t.grad_of(self);
    auto dr = t.grad_buffer(ir);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::int64_t e = 0; e < d; ++e) dr[idx[i] * d + e] += g[static_cast<std::int64_t>(i) * d + e];
  });
}

#define MSHIELD_INSTANTIATE_OPS(T)                                                                        \
  template BasicVar<T> add(BasicVar<T>, BasicVar<T>);                                                     \
  template BasicVar<T> sub(BasicVar<T>, BasicVar<T>);                                                     \
  template BasicVar<T> mul(BasicVar<T>, BasicVar<T>);                                                     \
  template BasicVar<T> scale(BasicVar<T>, T);                                                             \
  template BasicVar<T> sum(BasicVar<T>);                                                                  \
  template BasicVar<T> mean(BasicVar<T>);                                                                 \
  template BasicVar<T> reshape(BasicVar<T>, Shape);                                                       \
  template BasicVar<T> flatten(BasicVar<T>);                                                              \
  template BasicVar<T> matmul(BasicVar<T>, BasicVar<T>);                                                  \
  template BasicVar<T> linear(BasicVar<T>, BasicVar<T>);                                                  \
  template BasicVar<T> linear(BasicVar<T>, BasicVar<T>, BasicVar<T>);                                     \
  template BasicVar<T> conv2d(BasicVar<T>, BasicVar<T>, int);                                             \
  template BasicVar<T> avg_pool2d(BasicVar<T>, int, int);                                                 \
  template BasicVar<T> relu(BasicVar<T>);                                                                 \
  template BasicVar<T> batch_norm(BasicVar<T>, BasicVar<T>, BasicVar<T>, BatchNormState<T>&, Mode);       \
  template BasicVar<T> softmax(BasicVar<T>);                                                              \
  template BasicVar<T> log_softmax(BasicVar<T>);                                                          \
  template BasicVar<T> cross_entropy_soft(BasicVar<T>, const BasicTensor<T>&);                            \
  template BasicVar<T> attention_scores(BasicVar<T>, BasicVar<T>);                                        \
  template BasicVar<T> convex_combine(BasicVar<T>, BasicVar<T>);                                          \
  template BasicVar<T> gather_rows(BasicVar<T>, std::span<const std::uint32_t>);

MSHIELD_INSTANTIATE_OPS(float)
MSHIELD_INSTANTIATE_OPS(double)

#undef MSHIELD_INSTANTIATE_OPS

}  // namespace ops
}  // namespace mshield
