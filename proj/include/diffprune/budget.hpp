#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "diffprune/data.hpp"
#include "diffprune/denoiser.hpp"
#include "diffprune/diffusion.hpp"
#include "diffprune/era.hpp"
#include "diffprune/optim.hpp"

namespace diffprune {

struct BudgetConfig {
  double target_fraction = 0.5;  // T_d as a fraction of the full pretrained MACs
  std::size_t iters = 500;
  double tau = 0.4;
  std::size_t batch_size = 64;
  AdamWOptions optim{};
  bool loss_enabled = true;  // false: MACs-only objective

  void validate() const {
    require(target_fraction > 0.0 && target_fraction <= 1.0, "budget: target must lie in (0, 1]");
    require(tau > 0.0, "budget: tau must be positive");
    require(!loss_enabled || batch_size > 0, "budget: batch size must be positive");
  }
};

// Differentiable MACs of one expert: fixed + sum over depth units of
// round(u_j) (T_j + its width layers) + width layers outside depth units.
// Width layer l contributes sum(round(v_l)) x (T_l / W_l). With round = false
// the masks enter unrounded (the surrogate whose gradient the STE follows).
inline Tensor soft_expert_macs(const MacsTable& table, const SoftMasks& masks, bool round = true) {
  auto hard = [round](const Tensor& t) { return round ? ops::ste_round(t) : t; };
  require(masks.width.size() == table.width_slope.size(), "soft macs: width mask count mismatch");
  require(masks.depth.size() == table.depth_fixed.size(), "soft macs: depth mask count mismatch");
  const std::size_t D = table.depth_fixed.size();
  Tensor total = Tensor::scalar(static_cast<double>(table.fixed));
  std::vector<std::vector<Tensor>> inside(D);
  for (std::size_t l = 0; l < table.width_slope.size(); ++l) {
    require(masks.width[l].size() == table.width_units[l], "soft macs: width mask size mismatch");
    if (table.width_units[l] == 0) continue;
    const double per_unit = static_cast<double>(table.width_full(l)) / static_cast<double>(table.width_units[l]);
    const Tensor layer = ops::scale(ops::sum(hard(masks.width[l])), per_unit);
    const int j = table.width_depth_unit[l];
    if (j < 0) {
      total = ops::add(total, layer);
    } else {
      inside[static_cast<std::size_t>(j)].push_back(layer);
    }
  }
  const Tensor u = hard(masks.depth);
  for (std::size_t j = 0; j < D; ++j) {
    Tensor unit = Tensor::scalar(static_cast<double>(table.depth_fixed[j]));
    for (const auto& t : inside[j]) unit = ops::add(unit, t);
    total = ops::add(total, ops::mul_scalar(unit, ops::slice(u, 0, j, j + 1)));
  }
  return total;
}

// Interval-weighted mixture MACs: sum_i (|I_i| / sum_k |I_k|) T_i.
inline Tensor mixture_macs(const std::vector<Tensor>& expert_macs, const IntervalPartition& partition) {
  require(expert_macs.size() == partition.size(), "mixture macs: one value per interval expected");
  double total_len = 0.0;
  for (const auto& iv : partition.intervals) total_len += iv.size();
  Tensor sum = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < expert_macs.size(); ++i) {
    sum = ops::add(sum, ops::scale(expert_macs[i], partition.intervals[i].size() / total_len));
  }
  return sum;
}

inline double mixture_macs(const std::vector<std::int64_t>& expert_macs, const IntervalPartition& partition) {
  require(expert_macs.size() == partition.size(), "mixture macs: one value per interval expected");
  double total_len = 0.0;
  for (const auto& iv : partition.intervals) total_len += iv.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < expert_macs.size(); ++i) {
    sum += static_cast<double>(expert_macs[i]) * (partition.intervals[i].size() / total_len);
  }
  return sum;
}

// R = log(max(x, y) / min(x, y)) = |log x - log y|.
inline Tensor macs_regularizer(const Tensor& t_hat, double t_d) {
  require(t_d > 0.0, "regularizer: budget must be positive");
  require(t_hat.size() == 1 && t_hat.item() > 0.0, "regularizer: MACs estimate must be a positive scalar");
  return ops::abs(ops::add_scalar(ops::log(t_hat), -std::log(t_d)));
}

struct PruneStep {
  Tensor objective;
  Tensor t_hat;
  Tensor regularizer;
  std::vector<double> losses;
};

// J = mean_i L_{I_i}(E_i under soft masks) / D + R(T_hat, T_d) on one shared batch,
// with D the per-sample element count so the loss is a per-element mean.
inline PruneStep pruning_objective(const std::vector<const ExpertModel*>& experts, const RoutingAgent& agent,
                                   const std::vector<MacsTable>& tables, const IntervalPartition& partition,
                                   const Batch* batch, double t_d, double tau, const NoiseSchedule& sched, Rng& rng) {
  require(experts.size() == partition.size() && tables.size() == experts.size(),
          "pruning objective: experts, tables and intervals must align");
  const ArchitectureLogits logits = agent.logits();
  const std::vector<SoftMasks> masks = make_soft_masks(agent, logits, experts, tau, &rng);
  PruneStep s;
  std::vector<Tensor> macs;
  for (std::size_t i = 0; i < experts.size(); ++i) macs.push_back(soft_expert_macs(tables[i], masks[i]));
  s.t_hat = mixture_macs(macs, partition);
  s.regularizer = macs_regularizer(s.t_hat, t_d);
  s.objective = s.regularizer;
  if (batch != nullptr) {
    Tensor mean_loss = Tensor::scalar(0.0);
    const double per_element = static_cast<double>(batch->x0.dim(0)) / static_cast<double>(batch->x0.size());
    for (std::size_t i = 0; i < experts.size(); ++i) {
      const Denoiser d = as_denoiser(*experts[i], &masks[i]);
      const Tensor l = ops::scale(interval_loss(d, *batch, partition.intervals[i], sched, rng), per_element);
      s.losses.push_back(l.item());
      mean_loss = ops::add(mean_loss, ops::scale(l, 1.0 / static_cast<double>(experts.size())));
    }
    s.objective = ops::add(mean_loss, s.regularizer);
  }
  return s;
}

struct PruneLogRow {
  std::size_t iter = 0;
  double objective = 0.0;
  double t_hat_ratio = 0.0;  // T_hat / T_d
  std::vector<double> losses;
};

struct PruneResult {
  std::vector<Architecture> architectures;
  std::vector<PruneLogRow> log;
  double target_macs = 0.0;
  double expected_macs = 0.0;  // T_hat at the final agent state, averaged over the mask noise
  double final_macs = 0.0;     // noise-free T_hat of the exported architectures
  bool off_target = false;  // final T_hat more than 10% from T_d
};

// Trains only the agent; expert weights are frozen for the whole loop.
inline PruneResult prune_train_loop(const std::vector<ExpertModel*>& experts, RoutingAgent& agent,
                                    const Dataset& data, const IntervalPartition& partition, const BudgetConfig& cfg,
                                    double full_macs, const NoiseSchedule& sched, Rng& rng) {
  cfg.validate();
  require(full_macs > 0.0, "prune: full MACs must be positive");
  std::vector<const ExpertModel*> views;
  std::vector<MacsTable> tables;
  std::vector<bool> was_trainable;
  for (auto* e : experts) {
    views.push_back(e);
    tables.push_back(macs_table(*e));
  }
  for (auto* e : experts) {
    for (auto* p : e->parameters()) was_trainable.push_back(p->requires_grad);
    e->set_requires_grad(false);
  }
  PruneResult r;
  r.target_macs = cfg.target_fraction * full_macs;
  const auto params = agent.parameters();
  AdamW opt(cfg.optim);
  try {
    for (std::size_t it = 0; it < cfg.iters; ++it) {
      std::optional<Batch> batch;
      if (cfg.loss_enabled) batch = data.sample(cfg.batch_size, rng);
      zero_grads(params);
      PruneLogRow row;
      row.iter = it;
      {
        Tape tape;
        TapeScope scope(tape);
        const PruneStep s = pruning_objective(views, agent, tables, partition, batch ? &*batch : nullptr,
                                              r.target_macs, cfg.tau, sched, rng);
        row.objective = s.objective.item();
        row.t_hat_ratio = s.t_hat.item() / r.target_macs;
        row.losses = s.losses;
        if (!std::isfinite(row.objective)) throw NumericalError("prune: non-finite objective at step " + std::to_string(it));
        tape.backward(s.objective);
      }
      opt.step(params);
      r.log.push_back(std::move(row));
    }
  } catch (...) {
    std::size_t k = 0;
    for (auto* e : experts) {
      for (auto* p : e->parameters()) p->requires_grad = was_trainable[k++];
    }
    throw;
  }
  std::size_t k = 0;
  for (auto* e : experts) {
    for (auto* p : e->parameters()) p->requires_grad = was_trainable[k++];
  }
  const ArchitectureLogits logits = [&] {
    NoGradScope ng;
    return agent.logits();
  }();
  {
    // Each rounded mask is Bernoulli(sigmoid(logit)) and T_hat is linear in
    // every mask with independent noise, so the expectation takes the keep
    // probabilities unrounded.
    NoGradScope ng;
    const auto probs = make_soft_masks(agent, logits, views, 1.0, nullptr);
    std::vector<Tensor> expected;
    for (std::size_t i = 0; i < experts.size(); ++i) expected.push_back(soft_expert_macs(tables[i], probs[i], false));
    r.expected_macs = mixture_macs(expected, partition).item();
  }
  std::vector<std::int64_t> exact;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    r.architectures.push_back(final_architecture(agent, logits, i, *experts[i]));
    exact.push_back(tables[i].predict(r.architectures.back()));
  }
  r.final_macs = mixture_macs(exact, partition);
  r.off_target = std::fabs(r.final_macs - r.target_macs) > 0.1 * r.target_macs;
  return r;
}

}  // namespace diffprune
