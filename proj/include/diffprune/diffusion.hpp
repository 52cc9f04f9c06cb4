#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "diffprune/ops.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

// Linear beta schedule over timesteps 1..T. Index 0 of alpha_bar is the
// clean-data convention (alpha_bar_0 = 1) used by the final DDIM step.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1]
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative product
  std::string advisory;           // set when alpha_bar_T >= 0.05

  double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
  double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t - 1)); }

  void check_timestep(int t) const {
    if (t < 1 || t > T) throw ValidationError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  require(betas.size() >= 2, "schedule: need at least two timesteps");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.beta = std::move(betas);
  double prod = 1.0;
  for (double b : s.beta) {
    require(b > 0.0 && b < 1.0, "schedule: beta must lie in (0, 1)");
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  if (s.alpha_bar.back() >= 0.05) {
    s.advisory = "terminal alpha_bar " + std::to_string(s.alpha_bar.back()) +
                 " >= 0.05; x_T is not close to pure noise";
  }
  return s;
}

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  require(T >= 2, "schedule: T must be at least 2");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
  }
  return schedule_from_betas(std::move(betas));
}

// Contiguous closed intervals [lo, hi] covering 1..T, ascending.
struct Interval {
  int lo = 1;
  int hi = 1;
  int size() const { return hi - lo + 1; }
  bool contains(int t) const { return t >= lo && t <= hi; }
};

struct IntervalPartition {
  int T = 0;
  std::vector<int> cuts;  // last timestep of every interval but the final one
  std::vector<Interval> intervals;
  std::vector<double> weights;  // |I_i| / T

  std::size_t size() const { return intervals.size(); }

  std::size_t index_of(int t) const {
    for (std::size_t i = 0; i < intervals.size(); ++i) {
      if (intervals[i].contains(t)) return i;
    }
    throw ValidationError("timestep " + std::to_string(t) + " not covered by the partition");
  }

  static IntervalPartition from_cuts(std::vector<int> cuts, int T) {
    require(T >= 1, "partition: T must be positive");
    IntervalPartition p;
    p.T = T;
    p.cuts = std::move(cuts);
    int lo = 1;
    for (int c : p.cuts) {
      require(c >= lo && c < T, "partition: cuts must be strictly increasing inside [1, T)");
      p.intervals.push_back({lo, c});
      lo = c + 1;
    }
    p.intervals.push_back({lo, T});
    for (const auto& iv : p.intervals) p.weights.push_back(static_cast<double>(iv.size()) / T);
    return p;
  }

  static IntervalPartition single(int T) { return from_cuts({}, T); }
};

struct Batch {
  Tensor x0;                // [B, C, L]
  std::vector<int> labels;  // empty when unconditional
};

using Denoiser = std::function<Tensor(const Tensor& x, std::span<const int> t, std::span<const int> cond)>;

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, with t per sample (or one
// t broadcast when t.size() == 1).
inline Tensor q_sample(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& s) {
  require(x0.shape() == eps.shape(), "q_sample: noise shape mismatch");
  require(x0.rank() >= 1 && !x0.empty(), "q_sample: empty input");
  const std::size_t batch = x0.dim(0);
  const std::size_t per = x0.size() / batch;
  require(t.size() == batch || t.size() == 1, "q_sample: one timestep per sample expected");
  std::vector<double> out(x0.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const int tb = t.size() == 1 ? t[0] : t[b];
    s.check_timestep(tb);
    const double a = std::sqrt(s.alpha_bar_at(tb));
    const double n = std::sqrt(1.0 - s.alpha_bar_at(tb));
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = a * x0[b * per + i] + n * eps[b * per + i];
  }
  return Tensor(x0.shape(), std::move(out));
}

inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  const int ts[1] = {t};
  return q_sample(x0, std::span<const int>(ts, 1), eps, s);
}

inline Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

// Mean over the batch of ||eps_theta(x_t, t) - eps||^2 with the given
// timesteps and noise.
template <typename Model>
Tensor noise_prediction_loss(const Model& model, const Batch& batch, std::span<const int> t, const Tensor& eps,
                             const NoiseSchedule& s) {
  require(!batch.x0.empty(), "loss: empty batch");
  const Tensor xt = q_sample(batch.x0, t, eps, s);
  std::vector<int> ts(t.begin(), t.end());
  if (ts.size() == 1) ts.assign(batch.x0.dim(0), t[0]);
  const Tensor pred = model(xt, std::span<const int>(ts), std::span<const int>(batch.labels));
  return ops::scale(ops::sum(ops::square(ops::sub(pred, eps))), 1.0 / static_cast<double>(batch.x0.dim(0)));
}

// Denoising objective with t ~ Uniform{lo..hi} per sample.
template <typename Model>
Tensor interval_loss(const Model& model, const Batch& batch, Interval interval, const NoiseSchedule& s, Rng& rng) {
  require(!batch.x0.empty() && batch.x0.dim(0) > 0, "loss: empty batch");
  require(interval.lo <= interval.hi, "interval_loss: empty interval");
  s.check_timestep(interval.lo);
  s.check_timestep(interval.hi);
  const std::size_t n = batch.x0.dim(0);
  std::vector<int> t(n);
  for (auto& v : t) v = static_cast<int>(rng.uniform_int(interval.lo, interval.hi));
  const Tensor eps = standard_normal(batch.x0.shape(), rng);
  return noise_prediction_loss(model, batch, std::span<const int>(t), eps, s);
}

template <typename Model>
Tensor ddpm_loss(const Model& model, const Batch& batch, const NoiseSchedule& s, Rng& rng) {
  return interval_loss(model, batch, Interval{1, s.T}, s, rng);
}

// ------------------------------------------------------------------ samplers

// One ancestral step. `noise` is z; it is ignored at t = 1.
template <typename Model>
Tensor ddpm_step(const Model& model, const Tensor& xt, int t, const NoiseSchedule& s, const Tensor& noise,
                 std::span<const int> cond = {}) {
  s.check_timestep(t);
  const std::vector<int> ts(xt.dim(0), t);
  const Tensor eps = model(xt, std::span<const int>(ts), cond);
  const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
  const double inv = 1.0 / std::sqrt(s.alpha_at(t));
  const double sigma = t > 1 ? std::sqrt(s.beta_at(t)) : 0.0;
  std::vector<double> out(xt.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = inv * (xt[i] - coef * eps[i]) + (t > 1 ? sigma * noise[i] : 0.0);
  }
  return Tensor(xt.shape(), std::move(out));
}

template <typename Model>
Tensor ddpm_step(const Model& model, const Tensor& xt, int t, const NoiseSchedule& s, Rng& rng,
                 std::span<const int> cond = {}) {
  s.check_timestep(t);
  const Tensor z = t > 1 ? standard_normal(xt.shape(), rng) : Tensor(xt.shape());
  return ddpm_step(model, xt, t, s, z, cond);
}

// Deterministic (eta = 0) step from t to t_prev (t_prev = 0 yields x0).
template <typename Model>
Tensor ddim_step(const Model& model, const Tensor& xt, int t, int t_prev, const NoiseSchedule& s,
                 std::span<const int> cond = {}) {
  s.check_timestep(t);
  require(t_prev >= 0 && t_prev <= t, "ddim_step: need 0 <= t_prev <= t");
  if (t_prev == t) return xt;
  const std::vector<int> ts(xt.dim(0), t);
  const Tensor eps = model(xt, std::span<const int>(ts), cond);
  const double ab = s.alpha_bar_at(t);
  const double ab_prev = s.alpha_bar_at(t_prev);
  std::vector<double> out(xt.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (xt[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
    out[i] = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps[i];
  }
  return Tensor(xt.shape(), std::move(out));
}

// Evenly spaced visited timesteps, descending: t_k = floor(k T / steps), k = steps..1.
inline std::vector<int> linear_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, "sampler: steps must lie in [1, T]");
  std::vector<int> ts;
  for (int k = steps; k >= 1; --k) {
    ts.push_back(static_cast<int>((static_cast<std::int64_t>(k) * T) / steps));
  }
  return ts;
}

enum class SamplerKind { ddpm, ddim };

inline SamplerKind sampler_from_string(const std::string& s) {
  if (s == "ddpm") return SamplerKind::ddpm;
  if (s == "ddim") return SamplerKind::ddim;
  throw ValidationError("unknown sampler '" + s + "'");
}

struct SampleResult {
  Tensor samples;                        // [n, C, L]
  std::vector<std::size_t> expert_calls;  // denoising steps served per expert
  std::vector<int> visited;               // timesteps in visiting order
};

// Mixture-of-experts sampling: at each visited timestep the expert whose
// interval contains t provides eps_theta. Chain i draws its noise from
// Rng(seed + i).
inline SampleResult sample_mixture(const std::vector<Denoiser>& experts, const IntervalPartition& partition,
                                   const NoiseSchedule& s, SamplerKind kind, int steps, std::size_t n,
                                   std::size_t channels, std::size_t length, std::uint64_t seed,
                                   std::span<const int> cond = {}) {
  require(experts.size() == partition.size(), "sample_mixture: one expert per interval expected");
  require(partition.T == s.T, "sample_mixture: partition and schedule disagree on T");
  require(n > 0, "sample_mixture: need at least one chain");
  if (kind == SamplerKind::ddpm) require(steps == s.T, "sample_mixture: ddpm visits every timestep (steps == T)");
  NoGradScope no_grad;
  std::vector<Rng> chains;
  chains.reserve(n);
  for (std::size_t i = 0; i < n; ++i) chains.emplace_back(seed + i);
  const std::size_t per = channels * length;

  auto draw = [&](std::vector<double>& v) {
    v.resize(n * per);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < per; ++k) v[i * per + k] = chains[i].normal();
    }
  };

  std::vector<double> buf;
  draw(buf);
  Tensor x({n, channels, length}, buf);
  SampleResult result;
  result.expert_calls.assign(experts.size(), 0);
  const std::vector<int> ts = linear_timesteps(s.T, steps);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const std::size_t e = partition.index_of(t);
    ++result.expert_calls[e];
    result.visited.push_back(t);
    if (kind == SamplerKind::ddpm) {
      Tensor z({n, channels, length});
      if (t > 1) {
        draw(buf);
        z = Tensor({n, channels, length}, buf);
      }
      x = ddpm_step(experts[e], x, t, s, z, cond);
    } else {
      const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
      x = ddim_step(experts[e], x, t, t_prev, s, cond);
    }
  }
  result.samples = x;
  return result;
}

}  // namespace diffprune
