#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "diffprune/budget.hpp"
#include "diffprune/data.hpp"
#include "diffprune/era.hpp"
#include "gradcheck.hpp"

namespace diffprune::testing {

// Weighted sum so every output coordinate gets a distinct upstream gradient.
inline Tensor probe(const Tensor& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return ops::sum(ops::mul(y, Tensor(y.shape(), w)));
}

struct PrimitiveCase {
  std::string name;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
  std::vector<Tensor> inputs;
};

// Every differentiable primitive with inputs away from its kinks.
inline std::vector<PrimitiveCase> primitive_cases() {
  using V = const std::vector<Tensor>&;
  Rng rng(1);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  const Tensor pos = random_tensor({3, 4}, rng, 0.2, 2.0);
  const Tensor u = random_tensor({5}, rng), v = random_tensor({5}, rng);
  const Tensor sm = random_tensor({2, 6}, rng, -2, 2);
  const Tensor ma = random_tensor({3, 4}, rng), mb = random_tensor({4, 5}, rng), mbt = random_tensor({5, 4}, rng);
  const Tensor p = random_tensor({2, 3, 4}, rng), q = random_tensor({2, 4, 3}, rng), r = random_tensor({2, 5, 4}, rng);
  const Tensor cx = random_tensor({2, 3, 8}, rng), cw = random_tensor({4, 3, 3}, rng), cb = random_tensor({4}, rng);
  const Tensor cw1 = random_tensor({4, 3, 1}, rng);
  const Tensor nx = random_tensor({2, 3, 5}, rng, -2, 2);
  const Tensor ns = random_tensor({3}, rng, 0.5, 1.5), nt = random_tensor({3}, rng), nbc = random_tensor({2, 3}, rng);
  const Tensor sx = random_tensor({2, 3, 4}, rng), sy = random_tensor({2, 2, 4}, rng);
  const Tensor g4 = random_tensor({4}, rng), table = random_tensor({3, 4}, rng);
  const Tensor wv = random_tensor({4, 3}, rng), wg = random_tensor({4}, rng, 0.5, 1.5);
  const Tensor lx = random_tensor({2, 3}, rng), lb = random_tensor({4}, rng);
  return {
      {"add", [](V x) { return probe(ops::add(x[0], x[1])); }, {a, b}},
      {"sub", [](V x) { return probe(ops::sub(x[0], x[1])); }, {a, b}},
      {"mul", [](V x) { return probe(ops::mul(x[0], x[1])); }, {a, b}},
      {"scale", [](V x) { return probe(ops::scale(x[0], -2.5)); }, {a}},
      {"add_scalar", [](V x) { return probe(ops::add_scalar(x[0], 1.5)); }, {a}},
      {"mul_scalar", [](V x) { return probe(ops::mul_scalar(x[0], x[1])); }, {a, Tensor::scalar(0.7)}},
      {"square", [](V x) { return probe(ops::square(x[0])); }, {a}},
      {"exp", [](V x) { return probe(ops::exp(x[0])); }, {a}},
      {"sigmoid", [](V x) { return probe(ops::sigmoid(x[0])); }, {a}},
      {"tanh", [](V x) { return probe(ops::tanh(x[0])); }, {a}},
      {"silu", [](V x) { return probe(ops::silu(x[0])); }, {a}},
      {"sqrt", [](V x) { return probe(ops::sqrt(x[0])); }, {pos}},
      {"log", [](V x) { return probe(ops::log(x[0])); }, {pos}},
      {"reciprocal", [](V x) { return probe(ops::reciprocal(x[0])); }, {pos}},
      {"sum", [](V x) { return ops::sum(x[0]); }, {u}},
      {"mean", [](V x) { return ops::mean(ops::square(x[0])); }, {u}},
      {"dot", [](V x) { return ops::dot(x[0], x[1]); }, {u, v}},
      {"l2_norm", [](V x) { return ops::l2_norm(x[0]); }, {u}},
      {"cosine", [](V x) { return ops::cosine(x[0], x[1]); }, {u, v}},
      {"softmax", [](V x) { return probe(ops::softmax(x[0])); }, {sm}},
      {"cumsum", [](V x) { return probe(ops::cumsum(x[0], false)); }, {sm}},
      {"cumsum_reverse", [](V x) { return probe(ops::cumsum(x[0], true)); }, {sm}},
      {"matmul", [](V x) { return probe(ops::matmul(x[0], x[1])); }, {ma, mb}},
      {"matmul_transposed", [](V x) { return probe(ops::matmul(x[0], x[1], true)); }, {ma, mbt}},
      {"bmm", [](V x) { return probe(ops::bmm(x[0], x[1])); }, {p, q}},
      {"bmm_transposed", [](V x) { return probe(ops::bmm(x[0], x[1], true)); }, {p, r}},
      {"conv1d", [](V x) { return probe(ops::conv1d(x[0], x[1], x[2], 1, 1)); }, {cx, cw, cb}},
      {"conv1d_stride2", [](V x) { return probe(ops::conv1d(x[0], x[1], x[2], 2, 1)); }, {cx, cw, cb}},
      {"conv1d_pointwise", [](V x) { return probe(ops::conv1d(x[0], x[1], x[2], 1, 0)); }, {cx, cw1, cb}},
      {"channel_norm", [](V x) { return probe(ops::channel_norm(x[0], x[1], x[2])); }, {nx, ns, nt}},
      {"add_channels", [](V x) { return probe(ops::add_channels(x[0], x[1])); }, {nx, nt}},
      {"add_channels_batched", [](V x) { return probe(ops::add_channels(x[0], x[1])); }, {nx, nbc}},
      {"channel_mul", [](V x) { return probe(ops::channel_mul(x[0], x[1])); }, {nx, ns}},
      {"reshape", [](V x) { return probe(ops::reshape(x[0], {6, 4})); }, {sx}},
      {"permute", [](V x) { return probe(ops::permute(x[0], {2, 0, 1})); }, {sx}},
      {"concat", [](V x) { return probe(ops::concat({x[0], x[1]}, 1)); }, {sx, sy}},
      {"slice", [](V x) { return probe(ops::slice(x[0], 2, 1, 3)); }, {sx}},
      {"upsample_nearest", [](V x) { return probe(ops::upsample_nearest(x[0], 2)); }, {sx}},
      {"gather", [](V x) { return probe(ops::gather(x[0], {0, 0, 3, 1, 3})); }, {g4}},
      {"embedding", [](V x) { return probe(ops::embedding(x[0], std::vector<int>{2, 0, 2})); }, {table}},
      {"weight_norm", [](V x) { return probe(ops::weight_norm(x[0], x[1])); }, {wv, wg}},
      {"linear", [](V x) { return probe(ops::linear(x[0], x[1], x[2])); }, {lx, wv, lb}},
  };
}

inline ModelConfig micro_config() {
  ModelConfig c;
  c.stage_channels = {3};
  c.attention_stages = {};
  c.heads = 1;
  c.signal_length = 4;
  c.time_embed_dim = 4;
  return c;
}

inline std::vector<ExpertShape> shapes_of(const std::vector<const ExpertModel*>& experts) {
  std::vector<ExpertShape> s;
  for (const auto* e : experts) s.push_back(ExpertShape::of(*e));
  return s;
}

inline std::vector<std::vector<std::size_t>> rankings_of(const std::vector<const ExpertModel*>& experts) {
  std::vector<std::vector<std::size_t>> r;
  for (const auto* e : experts) r.push_back(default_depth_ranking(*e));
  return r;
}

struct FdReport {
  double max_coordinate = 0.0;  // per coordinate, denominator max(|a|, |n|, 1e-4)
  double normwise = 0.0;        // ||a - n|| / max(||a||, ||n||) over all checked coordinates
};

// Central differences over a few coordinates of every parameter.
template <typename F>
FdReport fd_check(const std::vector<Parameter*>& params, F&& value, double h = 1e-6) {
  FdReport r;
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (Parameter* p : params) {
    const std::size_t step = std::max<std::size_t>(1, p->value.size() / 4);
    for (std::size_t k = 0; k < p->value.size(); k += step) {
      const Tensor orig = p->value;
      auto at = [&](double d) {
        std::vector<double> v = orig.vec();
        v[k] += d;
        p->value = Tensor(orig.shape(), v);
        const double f = value();
        p->value = orig;
        return f;
      };
      const double num = (at(h) - at(-h)) / (2 * h);
      const double a = p->grad[k];
      r.max_coordinate = std::max(r.max_coordinate, std::fabs(a - num) / std::max({std::fabs(a), std::fabs(num), 1e-4}));
      diff += (a - num) * (a - num);
      na += a * a;
      nn += num * num;
    }
  }
  r.normwise = std::sqrt(diff / std::max(na, nn));
  return r;
}

// Two micro experts on a 20-step schedule split at 8.
struct MicroSetup {
  NoiseSchedule sched = make_schedule(20, 1e-3, 0.2);
  IntervalPartition partition = IntervalPartition::from_cuts({8}, 20);
  ExpertModel e0, e1;
  std::vector<MacsTable> tables;
  Batch batch;

  explicit MicroSetup(std::uint64_t seed) {
    Rng rng(seed);
    e0 = build_model(micro_config(), rng);
    e1 = build_model(micro_config(), rng);
    importance_sort(e0);
    importance_sort(e1);
    tables = {macs_table(e0), macs_table(e1)};
    const DataSplit d = generate_dataset({"sines", 16, 4, 0, 4}, Rng(seed + 1));
    batch = d.train.range(0, 4);
  }
  std::vector<const ExpertModel*> views() const { return {&e0, &e1}; }
  double full() const { return static_cast<double>(count_macs(e0)); }
};

// The objective with rounding decisions frozen at a reference point: masks
// enter the MACs term as round(m0) + (m - m0), unrounded. Its derivative at
// the reference point is exactly what the straight-through estimator returns.
inline double frozen_rounding_objective(const MicroSetup& s, const RoutingAgent& agent,
                                        const std::vector<SoftMasks>& ref, double t_d, double tau, Rng rng) {
  const auto experts = s.views();
  const auto masks = make_soft_masks(agent, agent.logits(), experts, tau, &rng);
  auto shift = [](const Tensor& m, const Tensor& m0) {
    std::vector<double> d(m0.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::round(m0[i]) - m0[i];
    return ops::add(m, Tensor(m0.shape(), d));
  };
  std::vector<Tensor> macs;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    SoftMasks shifted;
    for (std::size_t k = 0; k < masks[i].width.size(); ++k) shifted.width.push_back(shift(masks[i].width[k], ref[i].width[k]));
    shifted.depth = shift(masks[i].depth, ref[i].depth);
    macs.push_back(soft_expert_macs(s.tables[i], shifted, false));
  }
  Tensor j = macs_regularizer(mixture_macs(macs, s.partition), t_d);
  const double elements = static_cast<double>(s.batch.x0.size() / s.batch.x0.dim(0));
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const Tensor l = interval_loss(as_denoiser(*experts[i], &masks[i]), s.batch, s.partition.intervals[i], s.sched, rng);
    j = ops::add(j, ops::scale(l, 0.5 / elements));
  }
  return j.item();
}

struct ObjectiveCheck {
  double value_gap = 0.0;  // |tape objective - surrogate objective| at the reference point
  FdReport fd;
};

// Tape gradient of the full pruning objective on a micro instance against
// central differences of the frozen-rounding surrogate.
inline ObjectiveCheck check_pruning_objective(std::uint64_t seed) {
  const MicroSetup s(seed);
  Rng init(seed + 1);
  EraAgent agent(shapes_of(s.views()), rankings_of(s.views()), init, 4, 6);
  const double t_d = 0.6 * s.full(), tau = 0.4;
  const Rng rng(seed + 2);
  std::vector<SoftMasks> ref;
  {
    Rng r = rng;
    NoGradScope ng;
    ref = make_soft_masks(agent, agent.logits(), s.views(), tau, &r);
  }
  const auto params = agent.parameters();
  zero_grads(params);
  double value = 0.0;
  {
    Rng r = rng;
    Tape tape;
    TapeScope scope(tape);
    const PruneStep step = pruning_objective(s.views(), agent, s.tables, s.partition, &s.batch, t_d, tau, s.sched, r);
    value = step.objective.item();
    tape.backward(step.objective);
  }
  ObjectiveCheck c;
  c.value_gap = std::fabs(frozen_rounding_objective(s, agent, ref, t_d, tau, rng) - value);
  c.fd = fd_check(params, [&] { return frozen_rounding_objective(s, agent, ref, t_d, tau, rng); });
  return c;
}

}  // namespace diffprune::testing
