#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "diffprune/denoiser.hpp"
#include "diffprune/ops.hpp"
#include "diffprune/rng.hpp"

namespace diffprune {

// Per expert: width logits per slot and depth logits. For the ERA both are in
// rank order (entry e belongs to the e-th most important unit); for the naive
// agent they are in physical order.
struct ArchitectureLogits {
  std::vector<std::vector<Tensor>> width;
  std::vector<Tensor> depth;
};

// Unit counts of one expert as seen by an agent.
struct ExpertShape {
  std::vector<std::size_t> width_units;
  std::size_t depth_units = 0;

  static ExpertShape of(const ExpertModel& m) { return {m.unit_counts(), m.depth_slots().size()}; }
};

class RoutingAgent {
 public:
  virtual ~RoutingAgent() = default;
  virtual ArchitectureLogits logits() const = 0;
  virtual std::vector<Parameter*> parameters() = 0;
  // True when logits follow the importance order (rank-indexed).
  virtual bool rank_ordered() const = 0;
  virtual std::string kind() const = 0;

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (auto* p : const_cast<RoutingAgent*>(this)->parameters()) out.push_back(p);
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.size();
    return n;
  }
};

// softmax -> tail-inclusive cumulative sum -> clamp -> inverse sigmoid.
inline Tensor width_logits(const Tensor& o, double eps = 1e-4) {
  require(o.rank() == 1 && o.size() >= 1, "width_logits: expected a non-empty vector");
  const Tensor p = ops::clamp(ops::cumsum(ops::softmax(o), true), eps, 1.0 - eps);
  return ops::sub(ops::log(p), ops::log(ops::add_scalar(ops::scale(p, -1.0), 1.0)));
}

// Same construction; entry e is assigned to depth unit ranking[e].
inline Tensor depth_logits(const Tensor& o, const std::vector<std::size_t>& ranking, double eps = 1e-4) {
  require(ranking.size() == o.size(), "depth_logits: ranking size mismatch");
  std::vector<std::size_t> inverse(ranking.size(), ranking.size());
  for (std::size_t e = 0; e < ranking.size(); ++e) {
    require(ranking[e] < ranking.size() && inverse[ranking[e]] == ranking.size(), "depth_logits: ranking is not a permutation");
    inverse[ranking[e]] = e;
  }
  return ops::gather(width_logits(o, eps), inverse);
}

// sigmoid((logit + n) / tau) with n the difference of two Gumbel(0, 1) draws,
// so that P(value > 1/2) = sigmoid(logit). Noise-free when rng is null.
inline Tensor gumbel_sigmoid(const Tensor& logit, double tau, Rng* rng) {
  require(tau > 0.0, "gumbel_sigmoid: tau must be positive");
  Tensor x = logit;
  if (rng != nullptr) {
    std::vector<double> n(logit.size());
    for (auto& v : n) {
      const double g1 = rng->gumbel();
      v = g1 - rng->gumbel();
    }
    x = ops::add(x, Tensor(logit.shape(), std::move(n)));
  }
  return ops::sigmoid(ops::scale(x, 1.0 / tau));
}

namespace detail {

inline Parameter normal_param(std::string name, Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Parameter{std::move(name), Tensor(std::move(shape), std::move(v)), {}, true};
}

// Weight-normalized dense layer: direction v [out, in], gain g [out].
struct WnDense {
  Parameter v, g, b;

  static WnDense make(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    WnDense d;
    d.v = uniform_param(name + ".v", {out, in}, in, rng);
    std::vector<double> g(out, 0.0);
    for (std::size_t r = 0; r < out; ++r) {
      for (std::size_t c = 0; c < in; ++c) g[r] += d.v.value[r * in + c] * d.v.value[r * in + c];
      g[r] = std::sqrt(g[r]);
    }
    d.g = Parameter{name + ".g", Tensor::from(std::move(g)), {}, true};
    d.b = const_param(name + ".b", {out}, 0.0);
    return d;
  }
  Tensor operator()(const Tensor& x) const { return ops::linear(x, ops::weight_norm(v.use(), g.use()), b.use()); }
};

}  // namespace detail

// Fixed inputs z (one per expert and head) -> one shared single-step GRU
// cell (zero initial state, weight-normalized) -> ReLU -> weight-normalized
// dense head per expert and head. Heads 1..L emit width outputs, head L+1 the
// depth output.
class EraAgent : public RoutingAgent {
 public:
  EraAgent(const std::vector<ExpertShape>& experts, std::vector<std::vector<std::size_t>> depth_rankings, Rng& rng,
           std::size_t input_dim = 128, std::size_t hidden_dim = 256)
      : experts_(experts), rankings_(std::move(depth_rankings)), input_dim_(input_dim), hidden_dim_(hidden_dim) {
    require(!experts_.empty(), "era: need at least one expert");
    require(rankings_.size() == experts_.size(), "era: one depth ranking per expert expected");
    std::size_t rows = 0;
    for (const auto& e : experts_) rows += e.width_units.size() + 1;
    z_ = detail::normal_param("era.z", {rows, input_dim}, rng).value;
    input_ = detail::WnDense::make("era.gru.input", input_dim, 3 * hidden_dim, rng);
    recurrent_ = detail::WnDense::make("era.gru.recurrent", hidden_dim, 3 * hidden_dim, rng);
    for (std::size_t i = 0; i < experts_.size(); ++i) {
      const auto& e = experts_[i];
      require(rankings_[i].size() == e.depth_units, "era: depth ranking size mismatch");
      std::vector<detail::WnDense> heads;
      for (std::size_t k = 0; k <= e.width_units.size(); ++k) {
        const std::size_t out = k < e.width_units.size() ? e.width_units[k] : e.depth_units;
        require(out >= 1, "era: every head needs at least one output");
        heads.push_back(detail::WnDense::make("era.head." + std::to_string(i) + "." + std::to_string(k), hidden_dim,
                                              out, rng));
      }
      heads_.push_back(std::move(heads));
    }
  }

  const Tensor& inputs() const { return z_; }
  void set_inputs(const Tensor& z) {
    require(z.shape() == z_.shape(), "era: input shape mismatch");
    z_ = z.detach();
  }

  // Raw head outputs o_k per expert.
  std::vector<std::vector<Tensor>> outputs() const {
    const std::size_t rows = z_.dim(0), H = hidden_dim_;
    const Tensor gi = input_(z_);
    const Tensor gh = recurrent_(Tensor({rows, H}));
    const Tensor r = ops::sigmoid(ops::add(ops::slice(gi, 1, 0, H), ops::slice(gh, 1, 0, H)));
    const Tensor u = ops::sigmoid(ops::add(ops::slice(gi, 1, H, 2 * H), ops::slice(gh, 1, H, 2 * H)));
    const Tensor n = ops::tanh(ops::add(ops::slice(gi, 1, 2 * H, 3 * H), ops::mul(r, ops::slice(gh, 1, 2 * H, 3 * H))));
    // h' = (1 - u) n + u h0 with h0 = 0.
    const Tensor h = ops::relu(ops::mul(ops::add_scalar(ops::scale(u, -1.0), 1.0), n));
    std::vector<std::vector<Tensor>> out;
    std::size_t row = 0;
    for (const auto& heads : heads_) {
      std::vector<Tensor> o;
      for (const auto& head : heads) {
        const Tensor y = head(ops::slice(h, 0, row, row + 1));
        o.push_back(ops::reshape(y, {y.size()}));
        ++row;
      }
      out.push_back(std::move(o));
    }
    return out;
  }

  ArchitectureLogits logits() const override {
    ArchitectureLogits l;
    const auto o = outputs();
    for (std::size_t i = 0; i < o.size(); ++i) {
      std::vector<Tensor> w;
      for (std::size_t k = 0; k + 1 < o[i].size(); ++k) w.push_back(width_logits(o[i][k]));
      l.width.push_back(std::move(w));
      l.depth.push_back(depth_logits(o[i].back(), rankings_[i]));
    }
    return l;
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> p{&input_.v, &input_.g, &input_.b, &recurrent_.v, &recurrent_.g, &recurrent_.b};
    for (auto& heads : heads_) {
      for (auto& h : heads) {
        p.push_back(&h.v);
        p.push_back(&h.g);
        p.push_back(&h.b);
      }
    }
    return p;
  }

  bool rank_ordered() const override { return true; }
  std::string kind() const override { return "era"; }
  const std::vector<std::vector<std::size_t>>& depth_rankings() const { return rankings_; }

 private:
  std::vector<ExpertShape> experts_;
  std::vector<std::vector<std::size_t>> rankings_;
  std::size_t input_dim_, hidden_dim_;
  Tensor z_;
  detail::WnDense input_, recurrent_;
  std::vector<std::vector<detail::WnDense>> heads_;
};

// One free parameter per unit: logit = -beta.
class NaiveAgent : public RoutingAgent {
 public:
  explicit NaiveAgent(const std::vector<ExpertShape>& experts, double initial_beta = 0.0) {
    for (std::size_t i = 0; i < experts.size(); ++i) {
      std::vector<Parameter> w;
      for (std::size_t k = 0; k < experts[i].width_units.size(); ++k) {
        w.push_back(detail::const_param("naive." + std::to_string(i) + ".width." + std::to_string(k),
                                        {experts[i].width_units[k]}, initial_beta));
      }
      width_.push_back(std::move(w));
      depth_.push_back(detail::const_param("naive." + std::to_string(i) + ".depth", {experts[i].depth_units}, initial_beta));
    }
  }

  ArchitectureLogits logits() const override {
    ArchitectureLogits l;
    for (std::size_t i = 0; i < width_.size(); ++i) {
      std::vector<Tensor> w;
      for (const auto& p : width_[i]) w.push_back(ops::scale(p.use(), -1.0));
      l.width.push_back(std::move(w));
      l.depth.push_back(ops::scale(depth_[i].use(), -1.0));
    }
    return l;
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> p;
    for (std::size_t i = 0; i < width_.size(); ++i) {
      for (auto& w : width_[i]) p.push_back(&w);
      p.push_back(&depth_[i]);
    }
    return p;
  }

  bool rank_ordered() const override { return false; }
  std::string kind() const override { return "naive"; }

 private:
  std::vector<std::vector<Parameter>> width_;
  std::vector<Parameter> depth_;
};

// Relaxed masks per expert in physical unit order. With rank-ordered logits
// the mask of physical unit importance[e] is the e-th relaxed value.
inline std::vector<SoftMasks> make_soft_masks(const RoutingAgent& agent, const ArchitectureLogits& logits,
                                              const std::vector<const ExpertModel*>& experts, double tau, Rng* rng) {
  require(logits.width.size() == experts.size(), "soft masks: one expert per logit set expected");
  std::vector<SoftMasks> out;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const ExpertModel& m = *experts[i];
    const auto slots = m.width_slots();
    require(logits.width[i].size() == slots.size(), "soft masks: width head count mismatch");
    SoftMasks s;
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const std::size_t units = m.width_units(slots[k]);
      require(logits.width[i][k].size() == units, "soft masks: width head size mismatch");
      Tensor v = gumbel_sigmoid(logits.width[i][k], tau, rng);
      if (agent.rank_ordered()) {
        std::vector<std::size_t> inverse(units);
        for (std::size_t e = 0; e < units; ++e) inverse[m.importance[k][e]] = e;
        v = ops::gather(v, inverse);
      }
      s.width.push_back(v);
    }
    require(logits.depth[i].size() == m.depth_slots().size(), "soft masks: depth head size mismatch");
    s.depth = gumbel_sigmoid(logits.depth[i], tau, rng);
    out.push_back(std::move(s));
  }
  return out;
}

// Noise-free decisions. Rank-ordered agents keep the importance prefix whose
// length is the number of units with keep probability above 0.5 (at least
// one); the naive agent keeps exactly the units above 0.5 (at least the
// highest-scoring one). Depth units are kept when above 0.5.
inline Architecture final_architecture(const RoutingAgent& agent, const ArchitectureLogits& logits, std::size_t expert,
                                       const ExpertModel& m) {
  Architecture a;
  const auto slots = m.width_slots();
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const Tensor& l = logits.width[expert][k];
    std::size_t count = 0;
    std::vector<std::size_t> above;
    for (std::size_t e = 0; e < l.size(); ++e) {
      if (l[e] > 0.0) {
        ++count;
        above.push_back(e);
      }
    }
    if (agent.rank_ordered()) {
      a.width_kept.push_back(importance_prefix(m.importance[k], std::max<std::size_t>(count, 1)));
    } else {
      if (above.empty() && l.size() > 0) {
        above.push_back(static_cast<std::size_t>(std::max_element(l.values().begin(), l.values().end()) - l.values().begin()));
      }
      a.width_kept.push_back(above);
    }
  }
  const Tensor& d = logits.depth[expert];
  for (std::size_t j = 0; j < d.size(); ++j) a.depth_kept.push_back(d[j] > 0.0);
  return a;
}

}  // namespace diffprune
