#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

// Rows of a tensor flattened to [n, D] (first axis is the sample axis).
struct SampleSet {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  static SampleSet from(const Tensor& t) {
    require(t.rank() >= 1 && t.dim(0) > 0, "samples: empty set");
    return SampleSet{t.dim(0), t.size() / t.dim(0), t.vec()};
  }
  const double* row(std::size_t i) const { return values.data() + i * dim; }
};

inline double squared_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

inline double median_pairwise_distance(const SampleSet& x) {
  require(x.n >= 2, "median distance: need two samples");
  std::vector<double> d;
  d.reserve(x.n * (x.n - 1) / 2);
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t j = i + 1; j < x.n; ++j) d.push_back(std::sqrt(squared_distance(x.row(i), x.row(j), x.dim)));
  }
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  if (d.size() % 2 == 1) return *mid;
  const double upper = *mid;
  return 0.5 * (upper + *std::max_element(d.begin(), mid));
}

// Energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| with all pairs (V-statistics).
inline double energy_distance(const SampleSet& x, const SampleSet& y) {
  require(x.dim == y.dim, "energy distance: dimension mismatch");
  auto mean_dist = [](const SampleSet& a, const SampleSet& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.n; ++i) {
      for (std::size_t j = 0; j < b.n; ++j) s += std::sqrt(squared_distance(a.row(i), b.row(j), a.dim));
    }
    return s / static_cast<double>(a.n * b.n);
  };
  return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y);
}

// Gaussian kernel matrix of the pooled set [x; y].
struct PooledKernel {
  std::size_t nx = 0;
  std::size_t n = 0;
  std::vector<double> k;

  PooledKernel(const SampleSet& x, const SampleSet& y, double bandwidth) : nx(x.n), n(x.n + y.n), k(n * n) {
    require(x.dim == y.dim, "mmd: dimension mismatch");
    require(bandwidth > 0.0, "mmd: bandwidth must be positive");
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    auto row = [&](std::size_t i) { return i < x.n ? x.row(i) : y.row(i - x.n); };
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        const double v = std::exp(-squared_distance(row(i), row(j), x.dim) * inv);
        k[i * n + j] = v;
        k[j * n + i] = v;
      }
    }
  }

  // Biased MMD^2 for a labelling where in_x[i] marks membership of the first set.
  double mmd2(const std::vector<char>& in_x) const {
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    std::size_t cx = 0;
    for (std::size_t i = 0; i < n; ++i) cx += in_x[i] ? 1 : 0;
    const std::size_t cy = n - cx;
    for (std::size_t i = 0; i < n; ++i) {
      const double* r = k.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        if (in_x[i] && in_x[j]) {
          sxx += r[j];
        } else if (!in_x[i] && !in_x[j]) {
          syy += r[j];
        } else {
          sxy += r[j];
        }
      }
    }
    const double fx = static_cast<double>(cx), fy = static_cast<double>(cy);
    return sxx / (fx * fx) + syy / (fy * fy) - sxy / (fx * fy);
  }

  std::vector<char> identity_labels() const {
    std::vector<char> l(n, 0);
    std::fill(l.begin(), l.begin() + static_cast<std::ptrdiff_t>(nx), 1);
    return l;
  }
};

// Biased (V-statistic) squared MMD with a Gaussian kernel.
inline double mmd2_rbf(const SampleSet& x, const SampleSet& y, double bandwidth) {
  const PooledKernel k(x, y, bandwidth);
  return k.mmd2(k.identity_labels());
}

struct PermutationTest {
  double statistic = 0.0;
  double p_value = 1.0;
};

// p = (1 + #{permuted >= observed}) / (1 + permutations).
inline PermutationTest mmd_permutation_test(const SampleSet& x, const SampleSet& y, double bandwidth,
                                            std::size_t permutations, Rng& rng) {
  const PooledKernel k(x, y, bandwidth);
  std::vector<char> labels = k.identity_labels();
  PermutationTest r;
  r.statistic = k.mmd2(labels);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    for (std::size_t i = k.n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(labels[i - 1], labels[j]);
    }
    if (k.mmd2(labels) >= r.statistic) ++hits;
  }
  r.p_value = static_cast<double>(1 + hits) / static_cast<double>(1 + permutations);
  return r;
}

}  // namespace diffprune
