#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "diffprune/data.hpp"
#include "diffprune/denoiser.hpp"
#include "diffprune/diffusion.hpp"
#include "diffprune/optim.hpp"

namespace diffprune {

struct TrainConfig {
  std::size_t iters = 3000;
  std::size_t batch_size = 64;
  AdamWOptions optim{};
  double divergence_factor = 10.0;
};

struct ElasticConfig {
  double depth_drop_p = 0.5;
  std::size_t depth_iters = 1000;
  std::size_t width_iters = 1000;
  std::size_t batch_size = 64;
  AdamWOptions optim{};
  double divergence_factor = 10.0;

  void validate() const {
    require(depth_drop_p >= 0.0 && depth_drop_p < 1.0, "elastic: depth_drop_p must lie in [0, 1)");
    require(batch_size > 0, "elastic: batch size must be positive");
  }
};

// Sub-network of one optimization step: null for the full network.
using ConfigSampler = std::function<std::optional<SoftMasks>(const ExpertModel&, Rng&)>;

// AdamW on the interval denoising loss. The divergence guard compares a
// smoothed loss against the mean of the first ten steps.
inline std::vector<double> train_interval(ExpertModel& model, Interval interval, const TrainConfig& cfg,
                                          const Dataset& data, const NoiseSchedule& sched, Rng& rng,
                                          const ConfigSampler& sampler = {}, const std::string& phase = "train") {
  require(cfg.batch_size > 0, phase + ": batch size must be positive");
  std::vector<double> losses;
  if (cfg.iters == 0) return losses;
  model.set_requires_grad(true);
  AdamW opt(cfg.optim);
  const auto params = model.parameters();
  double initial = 0.0, smooth = 0.0, head = 0.0;
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const Batch batch = data.sample(cfg.batch_size, rng);
    const std::optional<SoftMasks> masks = sampler ? sampler(model, rng) : std::nullopt;
    zero_grads(params);
    double value = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      const Denoiser d = as_denoiser(model, masks ? &*masks : nullptr);
      const Tensor loss = interval_loss(d, batch, interval, sched, rng);
      value = loss.item();
      tape.backward(loss);
    }
    if (!std::isfinite(value)) throw NumericalError(phase + ": non-finite loss at step " + std::to_string(it));
    opt.step(params);
    losses.push_back(value);
    if (it < 10) {
      head += value;
      initial = head / static_cast<double>(it + 1);
      smooth = initial;
    } else {
      smooth = 0.98 * smooth + 0.02 * value;
      if (smooth > cfg.divergence_factor * initial) {
        throw NumericalError(phase + ": diverged at step " + std::to_string(it) + " (smoothed loss " +
                             std::to_string(smooth) + ", initial " + std::to_string(initial) + ")");
      }
    }
  }
  return losses;
}

// Each depth unit kept with probability 1 - p.
inline std::vector<bool> sample_depth_config(const ExpertModel& model, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "depth config: p must lie in [0, 1)");
  std::vector<bool> kept;
  for (std::size_t j = 0; j < model.depth_slots().size(); ++j) kept.push_back(!rng.bernoulli(p));
  return kept;
}

// Per width slot: r ~ U[0, 1), the floor(W r) least important units dropped.
inline Architecture sample_width_config(const ExpertModel& model, Rng& rng) {
  Architecture a = full_architecture(model);
  const auto slots = model.width_slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::size_t w = model.width_units(slots[i]);
    const double r = rng.uniform();
    const auto drop = static_cast<std::size_t>(std::floor(static_cast<double>(w) * r));
    a.width_kept[i] = importance_prefix(model.importance[i], w - drop);
  }
  return a;
}

inline TrainConfig elastic_train_config(const ElasticConfig& cfg, std::size_t iters) {
  TrainConfig t;
  t.iters = iters;
  t.batch_size = cfg.batch_size;
  t.optim = cfg.optim;
  t.divergence_factor = cfg.divergence_factor;
  return t;
}

inline std::vector<double> elastic_depth_phase(ExpertModel& model, Interval interval, const ElasticConfig& cfg,
                                               const Dataset& data, const NoiseSchedule& sched, Rng& rng) {
  cfg.validate();
  const ConfigSampler sampler = [&cfg](const ExpertModel& m, Rng& r) -> std::optional<SoftMasks> {
    if (cfg.depth_drop_p == 0.0) return std::nullopt;
    SoftMasks s = ones_masks(m);
    std::vector<double> u;
    for (bool k : sample_depth_config(m, cfg.depth_drop_p, r)) u.push_back(k ? 1.0 : 0.0);
    s.depth = Tensor::from(std::move(u));
    return s;
  };
  return train_interval(model, interval, elastic_train_config(cfg, cfg.depth_iters), data, sched, rng, sampler,
                        "elastic-depth");
}

// Sorts importance once, then trains random importance-suffix-dropped widths
// with every depth unit kept.
inline std::vector<double> elastic_width_phase(ExpertModel& model, Interval interval, const ElasticConfig& cfg,
                                               const Dataset& data, const NoiseSchedule& sched, Rng& rng) {
  cfg.validate();
  importance_sort(model);
  const ConfigSampler sampler = [](const ExpertModel& m, Rng& r) -> std::optional<SoftMasks> {
    return binary_masks(m, sample_width_config(m, r));
  };
  return train_interval(model, interval, elastic_train_config(cfg, cfg.width_iters), data, sched, rng, sampler,
                        "elastic-width");
}

}  // namespace diffprune
