#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "diffprune/error.hpp"

namespace diffprune {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

// Dense row-major array of doubles. Values are immutable once constructed and
// shared between copies; a tensor produced while a Tape is active also carries
// a handle to the node that produced it.
class Tensor {
 public:
  Tensor() : data_(std::make_shared<std::vector<double>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_size(shape_), 0.0)) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (data_->size() != shape_size(shape_)) {
      throw ValidationError("tensor: " + std::to_string(data_->size()) +
                            " values do not fill shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor full(Shape shape, double v) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor from(std::vector<double> values) {
    const Shape shape{values.size()};
    return Tensor(shape, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_->size(); }
  bool empty() const { return data_->empty(); }

  std::span<const double> values() const { return *data_; }
  const std::vector<double>& vec() const { return *data_; }
  const double* data() const { return data_->data(); }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const {
    if (size() != 1) throw ValidationError("item: tensor has " + std::to_string(size()) + " values");
    return (*data_)[0];
  }

  std::uint64_t tape_id() const { return tape_id_; }
  std::size_t node() const { return node_; }

  // Same values, no differentiation history.
  Tensor detach() const {
    Tensor t = *this;
    t.tape_id_ = 0;
    t.node_ = 0;
    return t;
  }

  // Same storage, new shape. Callers that need the node preserved go through
  // ops::reshape instead.
  Tensor reshaped_value(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ValidationError("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::uint64_t tape_id_ = 0;  // 0: not recorded
  std::size_t node_ = 0;
};

inline void require_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value in ") + where);
  }
}

// Ordered record of primitive operations. Nodes are appended in execution
// order, so parents always precede children and a single reverse sweep
// visits each node exactly once.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> upstream, Tape& tape)>;

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  bool tracks(const Tensor& t) const { return t.tape_id_ == id_; }

  Tensor record(Tensor out, BackwardFn fn) {
    nodes_.push_back(Node{out.size(), std::move(fn), nullptr, {}});
    out.tape_id_ = id_;
    out.node_ = nodes_.size() - 1;
    return out;
  }

  // A leaf whose gradient is added into `sink` during backward.
  Tensor leaf(Tensor value, std::vector<double>* sink) {
    nodes_.push_back(Node{value.size(), nullptr, sink, {}});
    value.tape_id_ = id_;
    value.node_ = nodes_.size() - 1;
    return value;
  }

  void accumulate(const Tensor& target, std::span<const double> g) {
    if (!tracks(target)) return;
    auto& node = nodes_[target.node_];
    if (node.grad.empty()) node.grad.assign(node.size, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
  }

  // Gradient buffer of a tracked tensor after backward (empty if unreached).
  std::span<const double> grad(const Tensor& t) const {
    if (!tracks(t)) return {};
    return nodes_[t.node_].grad;
  }

  void backward(const Tensor& loss) {
    if (!tracks(loss)) throw ValidationError("backward: loss is not recorded on this tape");
    if (loss.size() != 1) throw ValidationError("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad.clear();
    nodes_[loss.node_].grad.assign(1, 1.0);
    for (std::size_t i = loss.node_ + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.grad.empty()) continue;
      if (node.backward) node.backward(node.grad, *this);
      if (node.sink) {
        auto& sink = *node.sink;
        if (sink.size() != node.grad.size()) sink.assign(node.grad.size(), 0.0);
        for (std::size_t k = 0; k < sink.size(); ++k) sink[k] += node.grad[k];
      }
      if (!node.sink) std::vector<double>().swap(node.grad);
    }
  }

 private:
  struct Node {
    std::size_t size;
    BackwardFn backward;
    std::vector<double>* sink;
    std::vector<double> grad;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// Installs a tape as the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the current thread.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
  ~NoGradScope() { detail::active_tape_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Trainable tensor with a gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  mutable std::vector<double> grad;
  bool requires_grad = true;

  // The value as seen by the active tape: a gradient leaf when recording and
  // trainable, a constant otherwise.
  Tensor use() const {
    Tape* tape = active_tape();
    if (tape == nullptr || !requires_grad) return value;
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return tape->leaf(value, &grad);
  }

  void zero_grad() { grad.assign(value.size(), 0.0); }
};

}  // namespace diffprune
