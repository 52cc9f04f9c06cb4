#include <gtest/gtest.h>

#include <cmath>

#include "diffprune/diffusion.hpp"
#include "diffprune/optim.hpp"
#include "gradcheck.hpp"

using namespace diffprune;
using diffprune::testing::random_tensor;

namespace {

// Minimal model whose output is a fixed tensor or a function of its inputs.
Denoiser constant_model(const Tensor& out) {
  return [out](const Tensor&, std::span<const int>, std::span<const int>) { return out; };
}

Denoiser zero_model() {
  return [](const Tensor& x, std::span<const int>, std::span<const int>) { return Tensor(x.shape()); };
}

// Predicts eps from x_t given the known clean signal x0 (exact oracle).
Denoiser oracle_model(const Tensor& x0, const NoiseSchedule& s) {
  return [x0, s](const Tensor& xt, std::span<const int> t, std::span<const int>) {
    std::vector<double> v(xt.size());
    const std::size_t per = xt.size() / xt.dim(0);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double ab = s.alpha_bar_at(t[i / per]);
      v[i] = (xt[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1.0 - ab);
    }
    return Tensor(xt.shape(), std::move(v));
  };
}

struct Moments {
  double mean = 0.0;
  double se = 0.0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m.mean) * (x - m.mean);
  var /= static_cast<double>(v.size() - 1);
  m.se = std::sqrt(var / static_cast<double>(v.size()));
  return m;
}

}  // namespace

TEST(AdamW, ZeroGradientZeroDecayLeavesParameters) {
  Parameter p{"p", Tensor::from({1.0, -2.0}), {}};
  AdamW opt({.lr = 0.1, .weight_decay = 0.0});
  p.zero_grad();
  opt.step({&p});
  EXPECT_EQ(p.value[0], 1.0);
  EXPECT_EQ(p.value[1], -2.0);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Parameter p{"p", Tensor::scalar(3.0), {}};
  AdamW opt({.lr = 0.1, .weight_decay = 0.0});
  p.grad = {1.0};
  opt.step({&p});
  // m_hat = 1, v_hat = 1: update = lr * 1 / (1 + eps).
  EXPECT_NEAR(p.value[0], 3.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(AdamW, DecoupledWeightDecay) {
  Parameter p{"p", Tensor::from({2.0, -4.0}), {}};
  AdamW opt({.lr = 1.0, .weight_decay = 0.01});
  p.zero_grad();
  opt.step({&p});
  EXPECT_DOUBLE_EQ(p.value[0], 2.0 * 0.99);
  EXPECT_DOUBLE_EQ(p.value[1], -4.0 * 0.99);
}

TEST(AdamW, RejectsNonFiniteGradient) {
  Parameter p{"p", Tensor::scalar(1.0), {}};
  AdamW opt;
  p.grad = {std::nan("")};
  EXPECT_THROW(opt.step({&p}), NumericalError);
}

TEST(Schedule, ConstantBetaProducts) {
  const NoiseSchedule s = schedule_from_betas({0.5, 0.5});
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(1), 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(2), 0.25);
}

TEST(Schedule, DefaultTerminalAlphaBarIsSmall) {
  const NoiseSchedule s = make_schedule(100, 1e-3, 0.2);
  double prod = 1.0;
  for (int i = 0; i < 100; ++i) prod *= 1.0 - (1e-3 + (0.2 - 1e-3) * i / 99.0);
  EXPECT_NEAR(s.alpha_bar_at(100), prod, 1e-15);
  EXPECT_LT(s.alpha_bar_at(100), 0.05);
  EXPECT_TRUE(s.advisory.empty());
}

TEST(Schedule, RejectsDecreasingBetas) {
  EXPECT_THROW(make_schedule(100, 0.2, 1e-3), ValidationError);
  EXPECT_THROW(make_schedule(1, 1e-3, 0.2), ValidationError);
}

TEST(Schedule, AdvisoryForWeakSchedule) {
  EXPECT_FALSE(make_schedule(10, 1e-4, 1e-3).advisory.empty());
}

TEST(QSample, Limits) {
  Rng rng(1);
  const Tensor x0 = random_tensor({2, 1, 4}, rng), eps = random_tensor({2, 1, 4}, rng);
  NoiseSchedule clean = schedule_from_betas({1e-300, 0.5});
  clean.alpha_bar[0] = 1.0;
  const Tensor a = q_sample(x0, 1, eps, clean);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], x0[i]);
  NoiseSchedule noisy = schedule_from_betas({0.5, 0.5});
  noisy.alpha_bar[1] = 0.0;
  const Tensor b = q_sample(x0, 2, eps, noisy);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b[i], eps[i]);
}

TEST(QSample, MonteCarloVariance) {
  const NoiseSchedule s = make_schedule(100, 1e-3, 0.2);
  Rng rng(2);
  for (int t : {1, 30, 100}) {
    const Tensor x0({10000, 1, 1});
    const Tensor eps = standard_normal(x0.shape(), rng);
    const Tensor xt = q_sample(x0, t, eps, s);
    std::vector<double> sq(xt.size());
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = xt[i] * xt[i];
    const Moments m = moments(sq);
    EXPECT_NEAR(m.mean, 1.0 - s.alpha_bar_at(t), 3.0 * m.se) << "t=" << t;
  }
}

TEST(Loss, PerfectModelHasZeroLoss) {
  const NoiseSchedule s = make_schedule(50, 1e-3, 0.2);
  Rng rng(3);
  Batch b{random_tensor({4, 1, 8}, rng), {}};
  const Tensor eps = standard_normal(b.x0.shape(), rng);
  const std::vector<int> t{1, 10, 25, 50};
  EXPECT_NEAR(noise_prediction_loss(oracle_model(b.x0, s), b, t, eps, s).item(), 0.0, 1e-20);
}

TEST(Loss, ZeroModelLossIsDimensionality) {
  const NoiseSchedule s = make_schedule(50, 1e-3, 0.2);
  Rng rng(4);
  std::vector<double> values;
  for (int r = 0; r < 2000; ++r) {
    Batch b{random_tensor({1, 2, 8}, rng), {}};
    values.push_back(ddpm_loss(zero_model(), b, s, rng).item());
  }
  const Moments m = moments(values);
  EXPECT_NEAR(m.mean, 16.0, 3.0 * m.se);
}

TEST(Loss, SingleTimestepIntervalUsesOnlyThatTimestep) {
  const NoiseSchedule s = make_schedule(50, 1e-3, 0.2);
  std::vector<int> seen;
  const Denoiser spy = [&](const Tensor& x, std::span<const int> t, std::span<const int>) {
    seen.assign(t.begin(), t.end());
    return Tensor(x.shape());
  };
  Rng rng(5);
  Batch b{random_tensor({16, 1, 4}, rng), {}};
  interval_loss(spy, b, Interval{17, 17}, s, rng);
  ASSERT_EQ(seen.size(), 16u);
  for (int t : seen) EXPECT_EQ(t, 17);
}

TEST(Loss, WeightedIntervalLossesMatchGlobalLoss) {
  const NoiseSchedule s = make_schedule(40, 1e-3, 0.2);
  // A deterministic, timestep-dependent model so the loss varies with t.
  const Denoiser model = [](const Tensor& x, std::span<const int> t, std::span<const int>) {
    std::vector<double> v(x.size());
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.02 * t[i / per] * x[i];
    return Tensor(x.shape(), std::move(v));
  };
  Rng rng(6);
  const std::size_t draws = 4000;
  std::vector<double> global, split;
  const IntervalPartition p = IntervalPartition::from_cuts({12}, 40);
  for (std::size_t r = 0; r < draws; ++r) {
    Batch b{random_tensor({1, 1, 4}, rng), {}};
    global.push_back(ddpm_loss(model, b, s, rng).item());
    double w = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      w += p.weights[i] * interval_loss(model, b, p.intervals[i], s, rng).item();
    }
    split.push_back(w);
  }
  const Moments g = moments(global), w = moments(split);
  EXPECT_NEAR(g.mean, w.mean, 3.0 * std::hypot(g.se, w.se));
}

TEST(Sampler, DdpmFinalStepAddsNoNoise) {
  const NoiseSchedule s = make_schedule(10, 1e-3, 0.2);
  Rng rng(7);
  const Tensor x = random_tensor({2, 1, 4}, rng);
  const Tensor z = random_tensor({2, 1, 4}, rng);
  const Tensor a = ddpm_step(zero_model(), x, 1, s, z);
  const Tensor b = ddpm_step(zero_model(), x, 1, s, Tensor(x.shape()));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Sampler, DdpmTinyBetaIsNearIdentity) {
  const NoiseSchedule s = schedule_from_betas({1e-12, 1e-12, 1e-12});
  Rng rng(8);
  const Tensor x = random_tensor({2, 1, 4}, rng);
  const Tensor y = ddpm_step(zero_model(), x, 3, s, standard_normal(x.shape(), rng));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(Sampler, DdpmMeanMatchesPosteriorMean) {
  const NoiseSchedule s = make_schedule(20, 1e-3, 0.2);
  Rng rng(9);
  const Tensor x = random_tensor({3, 1, 4}, rng), e = random_tensor({3, 1, 4}, rng);
  for (int t : {2, 11, 20}) {
    const Tensor y = ddpm_step(constant_model(e), x, t, s, Tensor(x.shape()));
    const double ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t - 1), beta = s.beta_at(t);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = (x[i] - std::sqrt(1.0 - ab) * e[i]) / std::sqrt(ab);
      const double mean = std::sqrt(ab_prev) * beta / (1.0 - ab) * x0 +
                          std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab) * x[i];
      EXPECT_NEAR(y[i], mean, 1e-12);
    }
  }
}

TEST(Sampler, DdimIdentityAndExactRecovery) {
  const NoiseSchedule s = make_schedule(30, 1e-3, 0.2);
  Rng rng(10);
  const Tensor x0 = random_tensor({2, 1, 4}, rng), eps = random_tensor({2, 1, 4}, rng);
  const Tensor xt = q_sample(x0, 25, eps, s);
  const Tensor same = ddim_step(zero_model(), xt, 25, 25, s);
  for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_EQ(same[i], xt[i]);
  const Tensor prev = ddim_step(constant_model(eps), xt, 25, 12, s);
  const double a = s.alpha_bar_at(12);
  for (std::size_t i = 0; i < xt.size(); ++i) {
    EXPECT_NEAR(prev[i], std::sqrt(a) * x0[i] + std::sqrt(1.0 - a) * eps[i], 1e-12);
  }
  const Tensor clean = ddim_step(constant_model(eps), xt, 25, 0, s);
  for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_NEAR(clean[i], x0[i], 1e-12);
}

TEST(Sampler, DdimTrajectoryMatchesReference) {
  const NoiseSchedule s = make_schedule(50, 1e-3, 0.2);
  // eps_theta(x, t) = 0.1 * x * t / T, evaluated by hand below.
  const Denoiser model = [](const Tensor& x, std::span<const int> t, std::span<const int>) {
    std::vector<double> v(x.size());
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * x[i] * t[i / per] / 50.0;
    return Tensor(x.shape(), std::move(v));
  };
  const Denoiser single = model;
  const IntervalPartition p = IntervalPartition::single(50);
  const SampleResult r = sample_mixture({single}, p, s, SamplerKind::ddim, 10, 2, 1, 3, 77);

  std::vector<double> ref;
  for (std::size_t i = 0; i < 2; ++i) {
    Rng chain(77 + i);
    for (int k = 0; k < 3; ++k) ref.push_back(chain.normal());
  }
  const std::vector<int> ts{50, 45, 40, 35, 30, 25, 20, 15, 10, 5};
  EXPECT_EQ(r.visited, ts);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int tp = k + 1 < ts.size() ? ts[k + 1] : 0;
    double ab = 1.0, abp = 1.0;
    for (int j = 1; j <= t; ++j) ab *= 1.0 - (1e-3 + (0.2 - 1e-3) * (j - 1) / 49.0);
    for (int j = 1; j <= tp; ++j) abp *= 1.0 - (1e-3 + (0.2 - 1e-3) * (j - 1) / 49.0);
    for (double& x : ref) {
      const double e = 0.1 * x * t / 50.0;
      const double x0 = (x - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
      x = std::sqrt(abp) * x0 + std::sqrt(1.0 - abp) * e;
    }
  }
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.samples[i], ref[i], 1e-10);
}

TEST(Sampler, LinearScheduleDispatch) {
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  const IntervalPartition p = IntervalPartition::from_cuts({700}, 1000);
  const SampleResult r = sample_mixture({zero_model(), zero_model()}, p, s, SamplerKind::ddim, 100, 1, 1, 2, 0);
  EXPECT_EQ(r.expert_calls[0], 70u);
  EXPECT_EQ(r.expert_calls[1], 30u);
  std::vector<std::size_t> counts(2, 0);
  for (int t : r.visited) ++counts[p.index_of(t)];
  EXPECT_EQ(counts, r.expert_calls);
}

TEST(Sampler, SingleExpertMixtureEqualsSingleModel) {
  const NoiseSchedule s = make_schedule(20, 1e-3, 0.2);
  const Denoiser model = [](const Tensor& x, std::span<const int> t, std::span<const int>) {
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(x[i]) * t[0] / 20.0;
    return Tensor(x.shape(), std::move(v));
  };
  const SampleResult r =
      sample_mixture({model}, IntervalPartition::single(20), s, SamplerKind::ddpm, 20, 2, 1, 3, 5);
  // Same chain with direct ddpm steps and the identical noise streams.
  std::vector<Rng> chains{Rng(5), Rng(6)};
  auto draw = [&] {
    std::vector<double> v;
    for (auto& c : chains) {
      for (int k = 0; k < 3; ++k) v.push_back(c.normal());
    }
    return Tensor({2, 1, 3}, v);
  };
  Tensor x = draw();
  for (int t = 20; t >= 1; --t) x = ddpm_step(model, x, t, s, t > 1 ? draw() : Tensor(x.shape()));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(r.samples[i], x[i]);
}

TEST(Sampler, DdpmRequiresEveryTimestep) {
  const NoiseSchedule s = make_schedule(20, 1e-3, 0.2);
  EXPECT_THROW(sample_mixture({zero_model()}, IntervalPartition::single(20), s, SamplerKind::ddpm, 10, 1, 1, 2, 0),
               ValidationError);
}

TEST(Partition, CutsAndWeights) {
  const IntervalPartition p = IntervalPartition::from_cuts({700}, 1000);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p.intervals[0].lo, 1);
  EXPECT_EQ(p.intervals[0].hi, 700);
  EXPECT_EQ(p.intervals[1].lo, 701);
  EXPECT_DOUBLE_EQ(p.weights[0], 0.7);
  EXPECT_THROW(IntervalPartition::from_cuts({1000}, 1000), ValidationError);
  EXPECT_THROW(IntervalPartition::from_cuts({5, 5}, 10), ValidationError);
}
