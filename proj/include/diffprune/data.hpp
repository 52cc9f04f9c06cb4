#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "diffprune/diffusion.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

struct DatasetSpec {
  std::string family = "sines";  // sines | gmm2d
  std::size_t train_size = 4096;
  std::size_t heldout_size = 1024;
  std::size_t num_classes = 0;  // 0: unconditional
  std::size_t length = 32;      // sines only
};

// Samples stored as [N, C, L] in standardized units.
struct Dataset {
  Tensor x;
  std::vector<int> labels;  // empty when unconditional
  std::size_t channels = 0;
  std::size_t length = 0;
  double mean = 0.0;    // raw-space mean removed during standardization
  double stddev = 1.0;  // raw-space scale divided out

  std::size_t size() const { return x.empty() ? 0 : x.dim(0); }
  std::size_t sample_size() const { return channels * length; }

  Batch batch(std::span<const std::size_t> idx) const {
    const std::size_t per = sample_size();
    std::vector<double> v(idx.size() * per);
    Batch b;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < size(), "dataset: index out of range");
      std::copy_n(x.data() + idx[i] * per, per, v.begin() + static_cast<std::ptrdiff_t>(i * per));
      if (!labels.empty()) b.labels.push_back(labels[idx[i]]);
    }
    b.x0 = Tensor({idx.size(), channels, length}, std::move(v));
    return b;
  }

  // Uniform draw with replacement.
  Batch sample(std::size_t n, Rng& rng) const {
    require(size() > 0, "dataset: empty");
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(size()) - 1));
    return batch(idx);
  }

  Batch range(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(end, size()); ++i) idx.push_back(i);
    return batch(idx);
  }
};

struct DataSplit {
  Dataset train;
  Dataset heldout;
};

// Frequencies of class c are {2c+1, 2c+2}; unconditional draws use 1..6.
inline std::vector<double> sines_signal(std::size_t length, int label, Rng& rng) {
  std::vector<double> x(length, 0.0);
  for (int m = 0; m < 2; ++m) {
    const double a = rng.uniform(0.5, 1.0);
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double f = label < 0 ? static_cast<double>(rng.uniform_int(1, 6))
                               : static_cast<double>(2 * label + 1 + rng.uniform_int(0, 1));
    for (std::size_t p = 0; p < length; ++p) {
      x[p] += a * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(p) / static_cast<double>(length) + phi);
    }
  }
  return x;
}

// Eight isotropic Gaussians (std 0.1) on a circle of radius 2; the label is
// the component index modulo the class count.
inline std::vector<double> gmm2d_point(int& component, Rng& rng) {
  component = static_cast<int>(rng.uniform_int(0, 7));
  const double angle = 2.0 * std::numbers::pi * component / 8.0;
  return {2.0 * std::cos(angle) + 0.1 * rng.normal(), 2.0 * std::sin(angle) + 0.1 * rng.normal()};
}

namespace detail {

inline Dataset raw_dataset(const DatasetSpec& spec, std::size_t n, Rng& rng) {
  Dataset d;
  std::vector<double> v;
  if (spec.family == "sines") {
    d.channels = 1;
    d.length = spec.length;
    for (std::size_t i = 0; i < n; ++i) {
      int label = -1;
      if (spec.num_classes > 0) {
        label = static_cast<int>(i % spec.num_classes);
        d.labels.push_back(label);
      }
      const auto s = sines_signal(spec.length, label, rng);
      v.insert(v.end(), s.begin(), s.end());
    }
  } else if (spec.family == "gmm2d") {
    d.channels = 2;
    d.length = 1;
    for (std::size_t i = 0; i < n; ++i) {
      int component = 0;
      const auto p = gmm2d_point(component, rng);
      if (spec.num_classes > 0) d.labels.push_back(component % static_cast<int>(spec.num_classes));
      v.insert(v.end(), p.begin(), p.end());
    }
  } else {
    throw ValidationError("unknown dataset family '" + spec.family + "'");
  }
  d.x = Tensor({n, d.channels, d.length}, std::move(v));
  return d;
}

inline void standardize(Dataset& d, double mean, double stddev) {
  std::vector<double> v = d.x.vec();
  for (auto& x : v) x = (x - mean) / stddev;
  d.x = Tensor(d.x.shape(), std::move(v));
  d.mean = mean;
  d.stddev = stddev;
}

}  // namespace detail

// Training statistics (one scalar mean and standard deviation over every
// value) standardize both splits.
inline DataSplit generate_dataset(const DatasetSpec& spec, const Rng& rng) {
  require(spec.train_size >= 2, "dataset: need at least two training samples");
  require(spec.family != "sines" || spec.length >= 4, "dataset: sines length must be at least 4");
  require(spec.family != "sines" || spec.num_classes == 0 || 2 * spec.num_classes + 2 < spec.length / 2,
          "dataset: too many classes for the signal length");
  Rng train_rng = rng.fork(1);
  Rng held_rng = rng.fork(2);
  DataSplit s;
  s.train = detail::raw_dataset(spec, spec.train_size, train_rng);
  s.heldout = detail::raw_dataset(spec, spec.heldout_size, held_rng);
  double mean = 0.0;
  for (double x : s.train.x.values()) mean += x;
  mean /= static_cast<double>(s.train.x.size());
  double var = 0.0;
  for (double x : s.train.x.values()) var += (x - mean) * (x - mean);
  var /= static_cast<double>(s.train.x.size());
  require(var > 0.0, "dataset: zero variance");
  const double sd = std::sqrt(var);
  detail::standardize(s.train, mean, sd);
  detail::standardize(s.heldout, mean, sd);
  return s;
}

}  // namespace diffprune
