#include <gtest/gtest.h>

#include <numeric>

#include "diffprune/clustering.hpp"
#include "diffprune/data.hpp"
#include "diffprune/elastic.hpp"
#include "gradcheck.hpp"

using namespace diffprune;

namespace {

AlignmentMatrix block_matrix(std::size_t n, std::size_t first) {
  std::vector<int> grid(n);
  std::iota(grid.begin(), grid.end(), 1);
  std::vector<double> s(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) s[i * n + j] = (i < first) == (j < first) ? 1.0 : 0.0;
  }
  return AlignmentMatrix::from_scores(grid, s);
}

AlignmentMatrix random_matrix(std::size_t n, Rng& rng) {
  std::vector<int> grid(n);
  std::iota(grid.begin(), grid.end(), 1);
  std::vector<double> s(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) s[i * n + j] = s[j * n + i] = rng.uniform(-1.0, 1.0);
  }
  return AlignmentMatrix::from_scores(grid, s);
}

// Direct evaluation without prefix sums.
double direct_objective(const AlignmentMatrix& a, const std::vector<std::size_t>& ends) {
  double j = 0.0;
  std::size_t lo = 0;
  for (auto hi : ends) {
    double sum = 0.0;
    for (std::size_t r = lo; r < hi; ++r) {
      for (std::size_t c = lo; c < hi; ++c) sum += a.at(r, c);
    }
    const double size = static_cast<double>(hi - lo);
    j += size / static_cast<double>(a.size()) * sum / (size * size);
    lo = hi;
  }
  return j;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.stage_channels = {4, 8};
  c.attention_stages = {};
  c.heads = 1;
  c.signal_length = 16;
  c.time_embed_dim = 8;
  return c;
}

}  // namespace

TEST(Clustering, DefaultGrid) {
  EXPECT_EQ(default_grid(100).size(), 100u);
  EXPECT_EQ(default_grid(200).back(), 200);
  const auto g = default_grid(1000);
  EXPECT_LE(g.size(), 200u);
  EXPECT_EQ(g.front(), 5);
  EXPECT_EQ(g.back(), 1000);
}

TEST(Clustering, SevenThreeBlockMatrix) {
  const AlignmentMatrix a = block_matrix(10, 7);
  EXPECT_DOUBLE_EQ(partition_objective(a, {7}), 1.0);
  for (int c = 1; c <= 9; ++c) {
    if (c != 7) {
      EXPECT_LT(partition_objective(a, {c}), 1.0) << "cut " << c;
    }
  }
  const ClusterResult r = best_partition(a, 2, 10);
  EXPECT_EQ(r.partition.cuts, std::vector<int>{7});
  EXPECT_DOUBLE_EQ(r.objective, 1.0);
  EXPECT_EQ(r.single_cut_scores.size(), 9u);
}

TEST(Clustering, RecoversEveryBlockBoundary) {
  for (std::size_t n = 10; n <= 50; ++n) {
    for (std::size_t first = 1; first < n; ++first) {
      const ClusterResult r = best_partition(block_matrix(n, first), 2, static_cast<int>(n));
      ASSERT_EQ(r.partition.cuts, std::vector<int>{static_cast<int>(first)}) << "n=" << n;
      EXPECT_DOUBLE_EQ(r.objective, 1.0);
    }
  }
}

TEST(Clustering, OneClusterIsGlobalMean) {
  Rng rng(1);
  const AlignmentMatrix a = random_matrix(12, rng);
  const double mean = std::accumulate(a.scores.begin(), a.scores.end(), 0.0) / 144.0;
  EXPECT_NEAR(partition_objective(a, {}), mean, 1e-14);
  const ClusterResult r = best_partition(a, 1, 12);
  EXPECT_TRUE(r.partition.cuts.empty());
  EXPECT_NEAR(r.objective, mean, 1e-14);
}

TEST(Clustering, AllOnesTiesKeepEarliestCut) {
  std::vector<int> grid(8);
  std::iota(grid.begin(), grid.end(), 1);
  const AlignmentMatrix a = AlignmentMatrix::from_scores(grid, std::vector<double>(64, 1.0));
  for (int c = 1; c < 8; ++c) EXPECT_DOUBLE_EQ(partition_objective(a, {c}), 1.0);
  EXPECT_EQ(best_partition(a, 2, 8).partition.cuts, std::vector<int>{1});
}

TEST(Clustering, SingletonClusters) {
  Rng rng(2);
  const AlignmentMatrix a = random_matrix(6, rng);
  const ClusterResult r = best_partition(a, 6, 6);
  EXPECT_EQ(r.partition.cuts, (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_NEAR(r.objective, 1.0, 1e-14);
  EXPECT_THROW(best_partition(a, 7, 6), ValidationError);
}

TEST(Clustering, ExhaustiveSearchMatchesDirectEvaluation) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const AlignmentMatrix a = random_matrix(9, rng);
    double best = -1e300;
    for (std::size_t e1 = 1; e1 < 9; ++e1) {
      for (std::size_t e2 = e1 + 1; e2 < 9; ++e2) best = std::max(best, direct_objective(a, {e1, e2, 9}));
    }
    const ClusterResult r = best_partition(a, 3, 9);
    EXPECT_NEAR(r.objective, best, 1e-12);
    EXPECT_NEAR(partition_objective(a, r.partition.cuts), best, 1e-12);
  }
}

TEST(Clustering, SubsampledGridCutsAreGridPoints) {
  std::vector<int> grid{5, 10, 15, 20, 25, 30};
  std::vector<double> s(36);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) s[i * 6 + j] = (i < 2) == (j < 2) ? 1.0 : 0.0;
  }
  const ClusterResult r = best_partition(AlignmentMatrix::from_scores(grid, s), 2, 30);
  EXPECT_EQ(r.partition.cuts, std::vector<int>{10});
  EXPECT_EQ(r.partition.intervals.back().hi, 30);
}

TEST(Gradient, FlatGradientMatchesFiniteDifferences) {
  Parameter a{"a", Tensor::scalar(0.3), {}}, b{"b", Tensor::scalar(-1.2), {}}, c{"c", Tensor::scalar(0.7), {}};
  const std::vector<Parameter*> params{&a, &b, &c};
  auto loss = [&] {
    return ops::sum(ops::square(ops::add(ops::mul(a.use(), ops::tanh(b.use())), ops::exp(c.use()))));
  };
  const auto g = flat_gradient(loss, params);
  ASSERT_EQ(g.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    const double orig = params[k]->value[0];
    auto at = [&](double d) {
      params[k]->value = Tensor::scalar(orig + d);
      const double f = loss().item();
      params[k]->value = Tensor::scalar(orig);
      return f;
    };
    const double num = (at(1e-6) - at(-1e-6)) / 2e-6;
    EXPECT_LT(std::fabs(g[k] - num) / std::max(std::fabs(num), 1e-4), 1e-6);
  }
}

TEST(Gradient, PerTimestepGradientIsDeterministic) {
  Rng rng(4);
  ExpertModel m = build_model(toy_config(), rng);
  const DataSplit d = generate_dataset({"sines", 64, 16, 0, 16}, Rng(5));
  const Batch b = d.train.range(0, 8);
  const NoiseSchedule s = make_schedule(20, 1e-3, 0.2);
  const auto g1 = per_timestep_gradient(m, b, 7, s, 11);
  const auto g2 = per_timestep_gradient(m, b, 7, s, 11);
  EXPECT_EQ(g1, g2);
  EXPECT_EQ(g1.size(), m.parameter_count());
  EXPECT_NE(g1, per_timestep_gradient(m, b, 8, s, 11));
}

TEST(Alignment, DiagonalSymmetryAndBanding) {
  const DataSplit d = generate_dataset({"sines", 512, 64, 0, 16}, Rng(6));
  const NoiseSchedule s = make_schedule(20, 1e-3, 0.2);
  Rng rng(7);
  ExpertModel m = build_model(toy_config(), rng);
  TrainConfig tc;
  tc.iters = 300;
  tc.batch_size = 32;
  train_interval(m, Interval{1, 20}, tc, d.train, s, rng);
  const AlignmentMatrix a = build_alignment(m, d.train, default_grid(20), 64, s, 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_FALSE(a.degenerate[i]);
    EXPECT_NEAR(a.at(i, i), 1.0, 1e-12);
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(a.at(i, j), a.at(j, i));
  }
  EXPECT_GT(mean_offset_score(a, 1), mean_offset_score(a, a.size() / 2));
}
