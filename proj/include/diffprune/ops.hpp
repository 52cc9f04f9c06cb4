#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <span>
#include <vector>

#include "diffprune/tensor.hpp"

// Differentiable primitives. Every function here computes its forward value
// eagerly and, when an input is tracked by the active tape, records a node
// whose backward closure accumulates into the tracked inputs only.
namespace diffprune::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline Tape* recording(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (tape->tracks(*t)) return tape;
  }
  return nullptr;
}

inline Tensor finish(Tensor out, [[maybe_unused]] const char* name) {
#ifndef NDEBUG
  require_finite(out.values(), name);
#endif
  return out;
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                          " vs " + shape_string(b.shape()));
  }
}

inline void nonempty(const Tensor& a, const char* op) {
  if (a.empty()) throw ValidationError(std::string(op) + ": empty tensor");
}

inline void rank_is(const Tensor& a, std::size_t r, const char* op) {
  if (a.rank() != r) {
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                          shape_string(a.shape()));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = recording({&x})) {
    const Tensor y = result;
    result = tape->record(std::move(result), [x, y, deriv](std::span<const double> g, Tape& t) {
      std::vector<double> gx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * deriv(x[i], y[i]);
      t.accumulate(x, gx);
    });
  }
  return finish(std::move(result), name);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor result(a.shape(), std::move(out));
  if (Tape* tape = detail::recording({&a, &b})) {
    result = tape->record(std::move(result), [a, b](std::span<const double> g, Tape& t) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }
  return detail::finish(std::move(result), "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor result(a.shape(), std::move(out));
  if (Tape* tape = detail::recording({&a, &b})) {
    result = tape->record(std::move(result), [a, b](std::span<const double> g, Tape& t) {
      t.accumulate(a, g);
      if (t.tracks(b)) {
        std::vector<double> gb(g.begin(), g.end());
        for (auto& v : gb) v = -v;
        t.accumulate(b, gb);
      }
    });
  }
  return detail::finish(std::move(result), "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor result(a.shape(), std::move(out));
  if (Tape* tape = detail::recording({&a, &b})) {
    result = tape->record(std::move(result), [a, b](std::span<const double> g, Tape& t) {
      if (t.tracks(a)) {
        std::vector<double> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
        t.accumulate(a, ga);
      }
      if (t.tracks(b)) {
        std::vector<double> gb(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
        t.accumulate(b, gb);
      }
    });
  }
  return detail::finish(std::move(result), "mul");
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(
      x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(
      x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

// x * s where s holds a single value (broadcast).
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw ValidationError("mul_scalar: factor must hold one value");
  const double k = s[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * k;
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x, &s})) {
    result = tape->record(std::move(result), [x, s, k](std::span<const double> g, Tape& t) {
      if (t.tracks(x)) {
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * k;
        t.accumulate(x, gx);
      }
      if (t.tracks(s)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
        t.accumulate(s, std::span<const double>(&acc, 1));
      }
    });
  }
  return detail::finish(std::move(result), "mul_scalar");
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor abs(const Tensor& x) {
  // Subgradient 0 at the kink.
  return detail::unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline double sigmoid_value(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, "sigmoid", [](double v) { return sigmoid_value(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor silu(const Tensor& x) {
  return detail::unary(
      x, "silu", [](double v) { return v * sigmoid_value(v); },
      [](double v, double) {
        const double s = sigmoid_value(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

// Gradient passes only where lo <= x <= hi.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// Forward rounds to nearest (half away from zero); backward is the identity.
inline Tensor ste_round(const Tensor& x) {
  return detail::unary(
      x, "ste_round", [](double v) { return std::round(v); }, [](double, double) { return 1.0; });
}

// ------------------------------------------------------------------ reductions

inline Tensor sum(const Tensor& x) {
  detail::nonempty(x, "sum");
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor result = Tensor::scalar(acc);
  if (Tape* tape = detail::recording({&x})) {
    result = tape->record(std::move(result), [x](std::span<const double> g, Tape& t) {
      t.accumulate(x, std::vector<double>(x.size(), g[0]));
    });
  }
  return detail::finish(std::move(result), "sum");
}

inline Tensor mean(const Tensor& x) {
  detail::nonempty(x, "mean");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "dot");
  detail::nonempty(a, "dot");
  return sum(mul(a, b));
}

inline Tensor l2_norm(const Tensor& x) { return sqrt(sum(square(x))); }

inline Tensor reciprocal(const Tensor& x) {
  return detail::unary(
      x, "reciprocal", [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

inline Tensor cosine(const Tensor& a, const Tensor& b) {
  const Tensor denom = mul(l2_norm(a), l2_norm(b));
  if (denom[0] == 0.0) throw ValidationError("cosine: zero-norm vector");
  return mul(dot(a, b), reciprocal(denom));
}

// -------------------------------------------------------------- last-axis ops

inline Tensor softmax(const Tensor& x) {
  detail::nonempty(x, "softmax");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < n; ++i) o[i] /= total;
  }
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    const Tensor y = result;
    result = tape->record(std::move(result), [x, y, n, rows](std::span<const double> g, Tape& t) {
      std::vector<double> gx(g.size());
      for (std::size_t r = 0; r < rows; ++r) {
        double dotp = 0.0;
        for (std::size_t i = 0; i < n; ++i) dotp += g[r * n + i] * y[r * n + i];
        for (std::size_t i = 0; i < n; ++i) gx[r * n + i] = y[r * n + i] * (g[r * n + i] - dotp);
      }
      t.accumulate(x, gx);
    });
  }
  return detail::finish(std::move(result), "softmax");
}

// Running sum along the last axis; `reverse` accumulates from the end
// (out[e] = sum_{w >= e} x[w]).
inline Tensor cumsum(const Tensor& x, bool reverse = false) {
  detail::nonempty(x, "cumsum");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  auto scan = [n, rows](std::span<const double> in, bool rev) {
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = r * n + (rev ? n - 1 - k : k);
        acc += in[i];
        out[i] = acc;
      }
    }
    return out;
  };
  Tensor result(x.shape(), scan(x.values(), reverse));
  if (Tape* tape = detail::recording({&x})) {
    result = tape->record(std::move(result), [x, scan, reverse](std::span<const double> g, Tape& t) {
      t.accumulate(x, scan(g, !reverse));
    });
  }
  return detail::finish(std::move(result), "cumsum");
}

// ------------------------------------------------------------ linear algebra

// a[M,K] * b[K,N], or a[M,K] * b[N,K]^T when transpose_b.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::rank_is(a, 2, "matmul");
  detail::rank_is(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  if (k != kb) {
    throw ValidationError("matmul: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                          shape_string(b.shape()));
  }
  using detail::ConstMap;
  std::vector<double> out(m * n);
  detail::MutMap c(out.data(), m, n);
  ConstMap am(a.data(), m, k);
  if (transpose_b) {
    c.noalias() = am * ConstMap(b.data(), n, k).transpose();
  } else {
    c.noalias() = am * ConstMap(b.data(), k, n);
  }
  Tensor result({m, n}, std::move(out));
  if (Tape* tape = detail::recording({&a, &b})) {
    result = tape->record(std::move(result), [a, b, m, k, n, transpose_b](std::span<const double> g, Tape& t) {
      ConstMap gm(g.data(), m, n);
      if (t.tracks(a)) {
        std::vector<double> ga(m * k);
        if (transpose_b) {
          detail::MutMap(ga.data(), m, k).noalias() = gm * ConstMap(b.data(), n, k);
        } else {
          detail::MutMap(ga.data(), m, k).noalias() = gm * ConstMap(b.data(), k, n).transpose();
        }
        t.accumulate(a, ga);
      }
      if (t.tracks(b)) {
        std::vector<double> gb(k * n);
        if (transpose_b) {
          detail::MutMap(gb.data(), n, k).noalias() = gm.transpose() * ConstMap(a.data(), m, k);
        } else {
          detail::MutMap(gb.data(), k, n).noalias() = ConstMap(a.data(), m, k).transpose() * gm;
        }
        t.accumulate(b, gb);
      }
    });
  }
  return detail::finish(std::move(result), "matmul");
}

// Batched matmul over a leading axis: a[G,M,K] * b[G,K,N] (or b[G,N,K]^T).
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::rank_is(a, 3, "bmm");
  detail::rank_is(b, 3, "bmm");
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != groups || k != kb) {
    throw ValidationError("bmm: shape mismatch " + shape_string(a.shape()) + " x " +
                          shape_string(b.shape()));
  }
  using detail::ConstMap;
  std::vector<double> out(groups * m * n);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    detail::MutMap c(out.data() + gi * m * n, m, n);
    ConstMap am(a.data() + gi * m * k, m, k);
    if (transpose_b) {
      c.noalias() = am * ConstMap(b.data() + gi * n * k, n, k).transpose();
    } else {
      c.noalias() = am * ConstMap(b.data() + gi * k * n, k, n);
    }
  }
  Tensor result({groups, m, n}, std::move(out));
  if (Tape* tape = detail::recording({&a, &b})) {
    result = tape->record(std::move(result), [a, b, groups, m, k, n, transpose_b](std::span<const double> g, Tape& t) {
      const bool need_a = t.tracks(a), need_b = t.tracks(b);
      std::vector<double> ga(need_a ? a.size() : 0), gb(need_b ? b.size() : 0);
      for (std::size_t gi = 0; gi < groups; ++gi) {
        ConstMap gm(g.data() + gi * m * n, m, n);
        ConstMap am(a.data() + gi * m * k, m, k);
        if (transpose_b) {
          ConstMap bm(b.data() + gi * n * k, n, k);
          if (need_a) detail::MutMap(ga.data() + gi * m * k, m, k).noalias() = gm * bm;
          if (need_b) detail::MutMap(gb.data() + gi * n * k, n, k).noalias() = gm.transpose() * am;
        } else {
          ConstMap bm(b.data() + gi * k * n, k, n);
          if (need_a) detail::MutMap(ga.data() + gi * m * k, m, k).noalias() = gm * bm.transpose();
          if (need_b) detail::MutMap(gb.data() + gi * k * n, k, n).noalias() = am.transpose() * gm;
        }
      }
      if (need_a) t.accumulate(a, ga);
      if (need_b) t.accumulate(b, gb);
    });
  }
  return detail::finish(std::move(result), "bmm");
}

// 1-D convolution. x[B,Cin,L], weight[Cout,Cin,K], bias[Cout]; symmetric zero
// padding, output length (L + 2*pad - K) / stride + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
  detail::rank_is(x, 3, "conv1d");
  detail::rank_is(weight, 3, "conv1d");
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = weight.dim(0), ksize = weight.dim(2);
  if (weight.dim(1) != cin || bias.size() != cout) {
    throw ValidationError("conv1d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                          shape_string(x.shape()));
  }
  if (stride == 0 || len + 2 * pad < ksize) throw ValidationError("conv1d: invalid stride or kernel");
  const std::size_t lout = (len + 2 * pad - ksize) / stride + 1;
  const std::size_t rows = cin * ksize;
  const std::size_t cols = batch * lout;

  // im2col: cols matrix [Cin*K, B*Lout].
  auto columns = std::make_shared<std::vector<double>>(rows * cols, 0.0);
  {
    auto& c = *columns;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t kk = 0; kk < ksize; ++kk) {
        double* row = c.data() + (ci * ksize + kk) * cols;
        for (std::size_t b = 0; b < batch; ++b) {
          const double* in = x.data() + (b * cin + ci) * len;
          for (std::size_t lo = 0; lo < lout; ++lo) {
            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(lo * stride + kk) -
                                       static_cast<std::ptrdiff_t>(pad);
            if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) row[b * lout + lo] = in[pos];
          }
        }
      }
    }
  }
  using detail::ConstMap;
  std::vector<double> prod(cout * cols);
  detail::MutMap(prod.data(), cout, cols).noalias() =
      ConstMap(weight.data(), cout, rows) * ConstMap(columns->data(), rows, cols);
  std::vector<double> out(batch * cout * lout);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t b = 0; b < batch; ++b) {
      const double* src = prod.data() + co * cols + b * lout;
      double* dst = out.data() + (b * cout + co) * lout;
      for (std::size_t lo = 0; lo < lout; ++lo) dst[lo] = src[lo] + bias[co];
    }
  }
  Tensor result({batch, cout, lout}, std::move(out));
  if (Tape* tape = detail::recording({&x, &weight, &bias})) {
    result = tape->record(std::move(result), [=](std::span<const double> g, Tape& t) {
      // Upstream gradient rearranged to [Cout, B*Lout].
      std::vector<double> gmat(cout * cols);
      for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t b = 0; b < batch; ++b) {
          std::copy_n(g.data() + (b * cout + co) * lout, lout, gmat.data() + co * cols + b * lout);
        }
      }
      ConstMap gm(gmat.data(), cout, cols);
      if (t.tracks(bias)) {
        std::vector<double> gb(cout);
        for (std::size_t co = 0; co < cout; ++co) gb[co] = gm.row(static_cast<Eigen::Index>(co)).sum();
        t.accumulate(bias, gb);
      }
      if (t.tracks(weight)) {
        std::vector<double> gw(cout * rows);
        detail::MutMap(gw.data(), cout, rows).noalias() =
            gm * ConstMap(columns->data(), rows, cols).transpose();
        t.accumulate(weight, gw);
      }
      if (t.tracks(x)) {
        std::vector<double> gcol(rows * cols);
        detail::MutMap(gcol.data(), rows, cols).noalias() =
            ConstMap(weight.data(), cout, rows).transpose() * gm;
        std::vector<double> gx(x.size(), 0.0);
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t kk = 0; kk < ksize; ++kk) {
            const double* row = gcol.data() + (ci * ksize + kk) * cols;
            for (std::size_t b = 0; b < batch; ++b) {
              double* dst = gx.data() + (b * cin + ci) * len;
              for (std::size_t lo = 0; lo < lout; ++lo) {
                const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(lo * stride + kk) -
                                           static_cast<std::ptrdiff_t>(pad);
                if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) dst[pos] += row[b * lout + lo];
              }
            }
          }
        }
        t.accumulate(x, gx);
      }
    });
  }
  return detail::finish(std::move(result), "conv1d");
}

// ----------------------------------------------------------- channel-wise ops

// Per-channel normalization: for each (sample, channel), mean and variance
// over the remaining axes; then a learned per-channel scale and shift.
// x[B,C,...], scale[C], shift[C].
inline Tensor channel_norm(const Tensor& x, const Tensor& scale_p, const Tensor& shift_p, double eps = 1e-5) {
  if (x.rank() < 2) throw ValidationError("channel_norm: expected [B,C,...]");
  detail::nonempty(x, "channel_norm");
  const std::size_t batch = x.dim(0), ch = x.dim(1);
  const std::size_t inner = x.size() / (batch * ch);
  if (scale_p.size() != ch || shift_p.size() != ch) throw ValidationError("channel_norm: parameter size mismatch");
  std::vector<double> xhat(x.size()), inv_std(batch * ch), out(x.size());
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    const double* in = x.data() + bc * inner;
    double mu = 0.0;
    for (std::size_t i = 0; i < inner; ++i) mu += in[i];
    mu /= static_cast<double>(inner);
    double var = 0.0;
    for (std::size_t i = 0; i < inner; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(inner);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[bc] = is;
    const std::size_t c = bc % ch;
    for (std::size_t i = 0; i < inner; ++i) {
      xhat[bc * inner + i] = (in[i] - mu) * is;
      out[bc * inner + i] = scale_p[c] * xhat[bc * inner + i] + shift_p[c];
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x, &scale_p, &shift_p})) {
    auto saved = std::make_shared<std::pair<std::vector<double>, std::vector<double>>>(std::move(xhat),
                                                                                       std::move(inv_std));
    result = tape->record(std::move(result), [=](std::span<const double> g, Tape& t) {
      const auto& xh = saved->first;
      const auto& is = saved->second;
      if (t.tracks(scale_p) || t.tracks(shift_p)) {
        std::vector<double> gs(ch, 0.0), gsh(ch, 0.0);
        for (std::size_t bc = 0; bc < batch * ch; ++bc) {
          const std::size_t c = bc % ch;
          for (std::size_t i = 0; i < inner; ++i) {
            gs[c] += g[bc * inner + i] * xh[bc * inner + i];
            gsh[c] += g[bc * inner + i];
          }
        }
        t.accumulate(scale_p, gs);
        t.accumulate(shift_p, gsh);
      }
      if (t.tracks(x)) {
        std::vector<double> gx(x.size());
        const double n = static_cast<double>(inner);
        for (std::size_t bc = 0; bc < batch * ch; ++bc) {
          const double gamma = scale_p[bc % ch];
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t i = 0; i < inner; ++i) {
            const double d = g[bc * inner + i] * gamma;
            sum_d += d;
            sum_dx += d * xh[bc * inner + i];
          }
          for (std::size_t i = 0; i < inner; ++i) {
            const double d = g[bc * inner + i] * gamma;
            gx[bc * inner + i] = is[bc] / n * (n * d - sum_d - xh[bc * inner + i] * sum_dx);
          }
        }
        t.accumulate(x, gx);
      }
    });
  }
  return detail::finish(std::move(result), "channel_norm");
}

// x[B,C,...] + b, with b either [C] (shared across samples) or [B,C].
inline Tensor add_channels(const Tensor& x, const Tensor& b) {
  if (x.rank() < 2) throw ValidationError("add_channels: expected [B,C,...]");
  const std::size_t batch = x.dim(0), ch = x.dim(1);
  const std::size_t inner = x.size() / (batch * ch);
  const bool per_sample = b.size() == batch * ch && b.rank() == 2;
  if (!per_sample && b.size() != ch) {
    throw ValidationError("add_channels: bias " + shape_string(b.shape()) + " vs input " + shape_string(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    const double v = per_sample ? b[bc] : b[bc % ch];
    for (std::size_t i = 0; i < inner; ++i) out[bc * inner + i] = x[bc * inner + i] + v;
  }
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x, &b})) {
    result = tape->record(std::move(result), [=](std::span<const double> g, Tape& t) {
      t.accumulate(x, g);
      if (t.tracks(b)) {
        std::vector<double> gb(b.size(), 0.0);
        for (std::size_t bc = 0; bc < batch * ch; ++bc) {
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += g[bc * inner + i];
          gb[per_sample ? bc : bc % ch] += acc;
        }
        t.accumulate(b, gb);
      }
    });
  }
  return detail::finish(std::move(result), "add_channels");
}

// Mask multiply: x[B,C,...] * m[C], m broadcast over batch and spatial axes.
inline Tensor channel_mul(const Tensor& x, const Tensor& m) {
  if (x.rank() < 2) throw ValidationError("channel_mul: expected [B,C,...]");
  const std::size_t batch = x.dim(0), ch = x.dim(1);
  const std::size_t inner = x.size() / (batch * ch);
  if (m.size() != ch) {
    throw ValidationError("channel_mul: mask of size " + std::to_string(m.size()) + " for " +
                          std::to_string(ch) + " channels");
  }
  std::vector<double> out(x.size());
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    const double v = m[bc % ch];
    for (std::size_t i = 0; i < inner; ++i) out[bc * inner + i] = x[bc * inner + i] * v;
  }
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = detail::recording({&x, &m})) {
    result = tape->record(std::move(result), [=](std::span<const double> g, Tape& t) {
      if (t.tracks(x)) {
        std::vector<double> gx(x.size());
        for (std::size_t bc = 0; bc < batch * ch; ++bc) {
          const double v = m[bc % ch];
          for (std::size_t i = 0; i < inner; ++i) gx[bc * inner + i] = g[bc * inner + i] * v;
        }
        t.accumulate(x, gx);
      }
      if (t.tracks(m)) {
        std::vector<double> gm(ch, 0.0);
        for (std::size_t bc = 0; bc < batch * ch; ++bc) {
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += g[bc * inner + i] * x[bc * inner + i];
          gm[bc % ch] += acc;
        }
        t.accumulate(m, gm);
      }
    });
  }
  return detail::finish(std::move(result), "channel_mul");
}

// ------------------------------------------------------------- shape moves

inline Tensor reshape(const Tensor& x, Shape shape) {
  Tensor result = x.reshaped_value(std::move(shape));
  if (Tape* tape = detail::recording({&x})) {
    result = tape->record(std::move(result), [x](std::span<const double> g, Tape& t) { t.accumulate(x, g); });
  }
  return result;
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ValidationError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ValidationError("permute: not a permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // Source offset for each output element.
  auto index = std::make_shared<std::vector<std::size_t>>(x.size());
  {
    std::vector<std::size_t> counter(r, 0);
    for (std::size_t o = 0; o < x.size(); ++o) {
      std::size_t src = 0;
      for (std::size_t i = 0; i < r; ++i) src += counter[i] * in_strides[perm[i]];
      (*index)[o] = src;
      for (std::size_t i = r; i-- > 0;) {
        if (++counter[i] < out_shape[i]) break;
        counter[i] = 0;
      }
    }
  }
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[(*index)[o]];
  Tensor result(out_shape, std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    result = tape->record(std::move(result), [x, index](std::span<const double> g, Tape& t) {
      std::vector<double> gx(x.size());
      for (std::size_t o = 0; o < g.size(); ++o) gx[(*index)[o]] = g[o];
      t.accumulate(x, gx);
    });
  }
  return result;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ValidationError("concat: axis out of range");
  std::size_t outer = 1, inner = 1, total_axis = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ValidationError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) throw ValidationError("concat: shape mismatch");
    }
    total_axis += p.dim(axis);
  }
  Shape out_shape = ref;
  out_shape[axis] = total_axis;
  std::vector<double> out(shape_size(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data() + o * chunk, chunk, out.data() + o * total_axis * inner + offset);
    }
    offset += chunk;
  }
  Tensor result(out_shape, std::move(out));
  Tape* tape = active_tape();
  bool any = false;
  if (tape) {
    for (const auto& p : parts) any = any || tape->tracks(p);
  }
  if (any) {
    result = tape->record(std::move(result), [parts, outer, inner, total_axis, axis](std::span<const double> g, Tape& t) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * inner;
        if (t.tracks(p)) {
          std::vector<double> gp(p.size());
          for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(g.data() + o * total_axis * inner + off, chunk, gp.data() + o * chunk);
          }
          t.accumulate(p, gp);
        }
        off += chunk;
      }
    });
  }
  return result;
}

// Half-open slice [begin, end) along one axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) throw ValidationError("slice: out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis) * inner;
  const std::size_t chunk = (end - begin) * inner;
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  std::vector<double> out(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data() + o * full + begin * inner, chunk, out.data() + o * chunk);
  }
  Tensor result(out_shape, std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    result = tape->record(std::move(result), [=](std::span<const double> g, Tape& t) {
      std::vector<double> gx(x.size(), 0.0);
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(g.data() + o * chunk, chunk, gx.data() + o * full + begin * inner);
      }
      t.accumulate(x, gx);
    });
  }
  return result;
}

// Nearest-neighbour upsampling along the last axis.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  detail::nonempty(x, "upsample_nearest");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  Shape out_shape = x.shape();
  out_shape.back() = len * factor;
  std::vector<double> out(x.size() * factor);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < len * factor; ++i) out[r * len * factor + i] = x[r * len + i / factor];
  }
  Tensor result(out_shape, std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    result = tape->record(std::move(result), [x, rows, len, factor](std::span<const double> g, Tape& t) {
      std::vector<double> gx(x.size(), 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < len * factor; ++i) gx[r * len + i / factor] += g[r * len * factor + i];
      }
      t.accumulate(x, gx);
    });
  }
  return result;
}

// out[i] = x[index[i]] for a flat x.
inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& index) {
  for (auto i : index) {
    if (i >= x.size()) throw ValidationError("gather: index out of range");
  }
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x[index[i]];
  Tensor result({index.size()}, std::move(out));
  if (Tape* tape = detail::recording({&x})) {
    result = tape->record(std::move(result), [x, index](std::span<const double> g, Tape& t) {
      std::vector<double> gx(x.size(), 0.0);
      for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
      t.accumulate(x, gx);
    });
  }
  return result;
}

// Row lookup: table[V,D], ids -> [ids.size(), D].
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  detail::rank_is(table, 2, "embedding");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<std::size_t> idx;
  idx.reserve(ids.size() * width);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) throw ValidationError("embedding: id out of range");
    for (std::size_t j = 0; j < width; ++j) idx.push_back(static_cast<std::size_t>(id) * width + j);
  }
  return reshape(gather(table, idx), {ids.size(), width});
}

// Weight normalization of the rows of v[out,in]: w_r = g_r * v_r / |v_r|.
inline Tensor weight_norm(const Tensor& v, const Tensor& g) {
  detail::rank_is(v, 2, "weight_norm");
  const std::size_t rows = v.dim(0), cols = v.dim(1);
  if (g.size() != rows) throw ValidationError("weight_norm: gain size mismatch");
  std::vector<double> norms(rows), out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += v[r * cols + c] * v[r * cols + c];
    norms[r] = std::sqrt(acc);
    if (norms[r] == 0.0) throw NumericalError("weight_norm: zero row");
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = g[r] * v[r * cols + c] / norms[r];
  }
  Tensor result(v.shape(), std::move(out));
  if (Tape* tape = detail::recording({&v, &g})) {
    result = tape->record(std::move(result), [v, g, norms, rows, cols](std::span<const double> up, Tape& t) {
      std::vector<double> gg(rows), gv(v.size());
      for (std::size_t r = 0; r < rows; ++r) {
        double proj = 0.0;  // <up_r, v_r> / |v_r|
        for (std::size_t c = 0; c < cols; ++c) proj += up[r * cols + c] * v[r * cols + c];
        proj /= norms[r];
        gg[r] = proj;
        const double k = g[r] / norms[r];
        for (std::size_t c = 0; c < cols; ++c) {
          gv[r * cols + c] = k * (up[r * cols + c] - proj * v[r * cols + c] / norms[r]);
        }
      }
      t.accumulate(g, gg);
      t.accumulate(v, gv);
    });
  }
  return detail::finish(std::move(result), "weight_norm");
}

// x[N,in] * w[out,in]^T + b[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_channels(matmul(x, w, true), b);
}

}  // namespace diffprune::ops
