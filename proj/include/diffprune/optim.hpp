#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "diffprune/tensor.hpp"

namespace diffprune {

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with decoupled weight decay. One state slot per parameter tensor.
class AdamW {
 public:
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t steps = 0;
  };

  AdamW() = default;
  explicit AdamW(AdamWOptions options) : options_(options) {}

  const AdamWOptions& options() const { return options_; }
  AdamWOptions& options() { return options_; }
  const std::vector<Slot>& state() const { return slots_; }

  // Applies one update in place. The first call sizes the state; later calls
  // must pass the same parameter list. Non-finite gradients or parameters
  // raise NumericalError (the once-per-step finiteness check).
  void step(const std::vector<Parameter*>& params) {
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        slots_[i].m.assign(params[i]->value.size(), 0.0);
        slots_[i].v.assign(params[i]->value.size(), 0.0);
      }
    }
    if (slots_.size() != params.size()) {
      throw ValidationError("adamw: state holds " + std::to_string(slots_.size()) + " slots for " +
                            std::to_string(params.size()) + " parameters");
    }
    const auto& o = options_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      Slot& s = slots_[i];
      if (s.m.size() != p.value.size()) throw ValidationError("adamw: parameter " + p.name + " changed size");
      if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
      require_finite(p.grad, "gradient");
      ++s.steps;
      const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.steps));
      const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.steps));
      std::vector<double> next(p.value.vec());
      for (std::size_t k = 0; k < next.size(); ++k) {
        const double g = p.grad[k];
        s.m[k] = o.beta1 * s.m[k] + (1.0 - o.beta1) * g;
        s.v[k] = o.beta2 * s.v[k] + (1.0 - o.beta2) * g * g;
        const double mhat = s.m[k] / c1;
        const double vhat = s.v[k] / c2;
        next[k] *= 1.0 - o.lr * o.weight_decay;
        next[k] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
      }
      require_finite(next, "parameter update");
      p.value = Tensor(p.value.shape(), std::move(next));
    }
  }

 private:
  AdamWOptions options_;
  std::vector<Slot> slots_;
};

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace diffprune
