#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "diffprune/data.hpp"
#include "diffprune/denoiser.hpp"
#include "diffprune/diffusion.hpp"

namespace diffprune {

// Cosine similarities between per-timestep loss gradients.
struct AlignmentMatrix {
  std::vector<int> grid;
  std::vector<double> scores;  // row-major grid.size() x grid.size()
  std::vector<bool> degenerate;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return grid.size(); }
  double at(std::size_t i, std::size_t j) const { return scores[i * grid.size() + j]; }

  static AlignmentMatrix from_scores(std::vector<int> grid, std::vector<double> scores) {
    require(!grid.empty() && scores.size() == grid.size() * grid.size(), "alignment: score matrix size mismatch");
    for (std::size_t i = 1; i < grid.size(); ++i) require(grid[i] > grid[i - 1], "alignment: grid must be increasing");
    AlignmentMatrix a;
    a.grid = std::move(grid);
    a.scores = std::move(scores);
    a.degenerate.assign(a.grid.size(), false);
    return a;
  }
};

// Every timestep when T <= 200, otherwise every ceil(T/200)-th.
inline std::vector<int> default_grid(int T) {
  const int stride = T <= 200 ? 1 : (T + 199) / 200;
  std::vector<int> g;
  for (int t = stride; t <= T; t += stride) g.push_back(t);
  if (g.empty() || g.back() != T) g.push_back(T);
  return g;
}

// Gradient of loss() with respect to params, flattened in list order.
inline std::vector<double> flat_gradient(const std::function<Tensor()>& loss, const std::vector<Parameter*>& params) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss());
  }
  std::vector<double> g;
  for (auto* p : params) {
    if (p->grad.size() != p->value.size()) p->grad.assign(p->value.size(), 0.0);
    g.insert(g.end(), p->grad.begin(), p->grad.end());
    p->zero_grad();
  }
  return g;
}

// grad_theta L_t on a fixed batch; the noise is drawn from Rng(seed).fork(t).
inline std::vector<double> per_timestep_gradient(ExpertModel& model, const Batch& batch, int t,
                                                 const NoiseSchedule& sched, std::uint64_t seed) {
  sched.check_timestep(t);
  require(!batch.x0.empty(), "gradient probe: empty batch");
  Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(t));
  const Tensor eps = standard_normal(batch.x0.shape(), rng);
  const std::vector<int> ts(batch.x0.dim(0), t);
  const Denoiser d = as_denoiser(model);
  return flat_gradient([&] { return noise_prediction_loss(d, batch, std::span<const int>(ts), eps, sched); },
                       model.parameters());
}

inline AlignmentMatrix build_alignment(ExpertModel& model, const Dataset& data, const std::vector<int>& grid,
                                       std::size_t batch_size, const NoiseSchedule& sched, std::uint64_t seed) {
  require(!grid.empty(), "alignment: empty grid");
  for (std::size_t i = 1; i < grid.size(); ++i) require(grid[i] > grid[i - 1], "alignment: grid must be increasing");
  require(batch_size > 0, "alignment: batch size must be positive");
  Rng batch_rng = Rng(seed).fork(0xba7c4);
  const Batch batch = data.sample(batch_size, batch_rng);
  const std::size_t n = grid.size();
  std::vector<std::vector<double>> grads(n);
  std::vector<double> norms(n);
  AlignmentMatrix a;
  a.grid = grid;
  a.batch_size = batch_size;
  a.seed = seed;
  a.degenerate.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    grads[i] = per_timestep_gradient(model, batch, grid[i], sched, seed);
    double s = 0.0;
    for (double v : grads[i]) s += v * v;
    norms[i] = std::sqrt(s);
    a.degenerate[i] = !(norms[i] > 0.0);
  }
  a.scores.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    a.scores[i * n + i] = 1.0;
    if (a.degenerate[i]) continue;
    for (std::size_t j = i + 1; j < n; ++j) {
      if (a.degenerate[j]) continue;
      double dot = 0.0;
      const auto& gi = grads[i];
      const auto& gj = grads[j];
      for (std::size_t k = 0; k < gi.size(); ++k) dot += gi[k] * gj[k];
      const double c = std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
      a.scores[i * n + j] = c;
      a.scores[j * n + i] = c;
    }
  }
  return a;
}

namespace detail {

// Block sums of the score matrix in O(1) via 2-D prefix sums.
class BlockSums {
 public:
  explicit BlockSums(const AlignmentMatrix& a) : n_(a.size()), s_((n_ + 1) * (n_ + 1), 0.0) {
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < n_; ++j) {
        s_[(i + 1) * (n_ + 1) + j + 1] =
            a.at(i, j) + s_[i * (n_ + 1) + j + 1] + s_[(i + 1) * (n_ + 1) + j] - s_[i * (n_ + 1) + j];
      }
    }
  }
  // Sum over the square block [lo, hi) x [lo, hi).
  double block(std::size_t lo, std::size_t hi) const {
    const std::size_t w = n_ + 1;
    return s_[hi * w + hi] - s_[lo * w + hi] - s_[hi * w + lo] + s_[lo * w + lo];
  }
  // Objective for interval boundaries given as grid positions (exclusive ends).
  double objective(const std::vector<std::size_t>& ends) const {
    // (|I| / n) * block / |I|^2 summed as block / |I|, divided by n once.
    double j = 0.0;
    std::size_t lo = 0;
    for (auto hi : ends) {
      j += block(lo, hi) / static_cast<double>(hi - lo);
      lo = hi;
    }
    return j / static_cast<double>(n_);
  }

 private:
  std::size_t n_;
  std::vector<double> s_;
};

// Grid positions (exclusive ends) of the intervals defined by cut timesteps.
inline std::vector<std::size_t> interval_ends(const AlignmentMatrix& a, const std::vector<int>& cuts) {
  std::vector<std::size_t> ends;
  std::size_t pos = 0;
  for (std::size_t c = 0; c < cuts.size(); ++c) {
    require(c == 0 || cuts[c] > cuts[c - 1], "partition: cuts must be strictly increasing");
    const std::size_t start = pos;
    while (pos < a.size() && a.grid[pos] <= cuts[c]) ++pos;
    require(pos > start, "partition: empty interval before cut " + std::to_string(cuts[c]));
    ends.push_back(pos);
  }
  require(pos < a.size(), "partition: empty final interval");
  ends.push_back(a.size());
  return ends;
}

}  // namespace detail

// J = sum_i w_i mean_{j,k in I_i} a_{j,k}, w_i = |I_i| / grid size.
inline double partition_objective(const AlignmentMatrix& a, const std::vector<int>& cuts) {
  return detail::BlockSums(a).objective(detail::interval_ends(a, cuts));
}

struct ClusterResult {
  IntervalPartition partition;
  double objective = 0.0;
  // Objective of every single-cut candidate (filled when clusters == 2).
  std::vector<std::pair<int, double>> single_cut_scores;
};

// Exhaustive search over cut positions; ties keep the lexicographically
// earliest cut vector. Cuts are grid timesteps, so interval i ends at a grid
// point and the final interval ends at T.
inline ClusterResult best_partition(const AlignmentMatrix& a, std::size_t clusters, int T) {
  const std::size_t n = a.size();
  require(clusters >= 1 && clusters <= n, "partition: need 1 <= clusters <= grid size");
  require(a.grid.back() <= T, "partition: grid exceeds T");
  const detail::BlockSums sums(a);
  ClusterResult r;
  std::vector<std::size_t> ends(clusters), best;
  ends.back() = n;
  double best_j = -std::numeric_limits<double>::infinity();
  constexpr double kMargin = 1e-12;
  // Enumerate ends[0] < ... < ends[clusters-2] in lexicographic order.
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t k, std::size_t lo) {
    if (k + 1 == clusters) {
      const double j = sums.objective(ends);
      if (clusters == 2) r.single_cut_scores.emplace_back(a.grid[ends[0] - 1], j);
      if (j > best_j + kMargin) {
        best_j = j;
        best = ends;
      }
      return;
    }
    const std::size_t remaining = clusters - 1 - k;  // intervals still to place after this one
    for (std::size_t e = lo + 1; e + remaining <= n; ++e) {
      ends[k] = e;
      rec(k + 1, e);
    }
  };
  rec(0, 0);
  std::vector<int> cuts;
  for (std::size_t k = 0; k + 1 < best.size(); ++k) cuts.push_back(a.grid[best[k] - 1]);
  r.partition = IntervalPartition::from_cuts(cuts, T);
  r.objective = best_j;
  return r;
}

// Mean score of pairs at a given grid offset.
inline double mean_offset_score(const AlignmentMatrix& a, std::size_t offset) {
  require(offset < a.size(), "alignment: offset out of range");
  double s = 0.0;
  for (std::size_t i = 0; i + offset < a.size(); ++i) s += a.at(i, i + offset);
  return s / static_cast<double>(a.size() - offset);
}

}  // namespace diffprune
