#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cohff {

namespace detail {

inline size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<size_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace detail

struct TensorData {
  std::vector<size_t> shape;
  std::vector<double> v;
  std::vector<double> g;  // empty until first touched
  bool requires_grad = false;

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), 0.0);
  }
};

// Value-semantic handle over shared storage: copies alias the same data, so a
// parameter held by a module and by the optimizer is one buffer.
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData>()) {}

  explicit Tensor(std::vector<size_t> shape, double fill = 0.0)
      : d_(std::make_shared<TensorData>()) {
    d_->shape = std::move(shape);
    d_->v.assign(detail::shape_numel(d_->shape), fill);
  }

  static Tensor scalar(double value) {
    Tensor t({1});
    t.d_->v[0] = value;
    return t;
  }

  static Tensor from(std::vector<size_t> shape, std::vector<double> values) {
    if (detail::shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor::from: values length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + detail::shape_str(shape));
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->v = std::move(values);
    return t;
  }

  const std::vector<size_t>& shape() const { return d_->shape; }
  size_t ndim() const { return d_->shape.size(); }
  size_t dim(size_t i) const { return d_->shape.at(i); }
  size_t numel() const { return d_->v.size(); }

  std::vector<double>& values() { return d_->v; }
  const std::vector<double>& values() const { return d_->v; }
  double& at(size_t i) { return d_->v[i]; }
  double at(size_t i) const { return d_->v[i]; }

  double item() const {
    if (numel() != 1)
      throw std::invalid_argument("Tensor::item: tensor has " +
                                  std::to_string(numel()) + " elements, expected 1");
    return d_->v[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    d_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return d_->g.size() == d_->v.size(); }
  std::vector<double>& grad() {
    d_->ensure_grad();
    return d_->g;
  }
  void zero_grad() {
    if (!d_->g.empty()) d_->g.assign(d_->v.size(), 0.0);
  }

  std::shared_ptr<TensorData> data() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape: ops append backward closures in execution order; the
// sweep runs them once, in reverse. Op-output grads are scratch and reset per
// sweep; leaf grads accumulate across sweeps.
class Tape {
 public:
  void record(std::function<void()> fn, std::shared_ptr<TensorData> out) {
    nodes_.push_back({std::move(fn), std::move(out)});
  }
  size_t size() const { return nodes_.size(); }
  void reset_intermediate_grads() {
    for (auto& n : nodes_) n.out->g.clear();
  }
  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::function<void()> fn;
    std::shared_ptr<TensorData> out;
  };
  std::vector<Node> nodes_;
};

namespace detail {
inline Tape*& tape_slot() {
  thread_local Tape* slot = nullptr;
  return slot;
}
}  // namespace detail

inline Tape* active_tape() { return detail::tape_slot(); }

// RAII: installs a tape for the current thread; nests and restores.
class TapeScope {
 public:
  TapeScope() : prev_(detail::tape_slot()) { detail::tape_slot() = &tape_; }
  ~TapeScope() { detail::tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

// Disables recording (forward evaluation only) while alive.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::tape_slot()) { detail::tape_slot() = nullptr; }
  ~NoGradScope() { detail::tape_slot() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// Marks out as an op result and queues its backward closure, but only when a
// tape is active and some input carried grad.
inline void record_op(bool inputs_need_grad, Tensor& out, std::function<void()> fn) {
  Tape* t = active_tape();
  if (!t || !inputs_need_grad) return;
  out.set_requires_grad(true);
  t->record(std::move(fn), out.data());
}

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                detail::shape_str(loss.shape()));
  Tape* t = active_tape();
  if (!t) throw std::logic_error("backward: no active tape");
  if (!loss.requires_grad())
    throw std::invalid_argument("backward: loss is not connected to any gradient");
  t->reset_intermediate_grads();
  loss.data()->ensure_grad();
  loss.data()->g[0] += 1.0;
  t->run_backward();
}

// Central finite differences against the analytic gradient of param.
// Returns the max relative error (|a-n|)/(|a|+|n|+1e-12) over all elements
// (or over max_elems evenly spaced elements when the tensor is larger).
inline double finite_diff_check(const std::function<Tensor()>& f, Tensor param,
                                double h = 1e-5, size_t max_elems = SIZE_MAX) {
  param.set_requires_grad(true);
  param.zero_grad();
  std::vector<double> analytic;
  {
    TapeScope scope;
    Tensor loss = f();
    backward(loss);
    param.data()->ensure_grad();
    analytic = param.data()->g;
  }
  double max_rel = 0.0;
  NoGradScope off;
  std::vector<double>& v = param.values();
  const size_t n = v.size();
  const size_t step = (max_elems >= n) ? 1 : (n + max_elems - 1) / max_elems;
  for (size_t i = 0; i < n; i += step) {
    const double keep = v[i];
    v[i] = keep + h;
    const double fp = f().item();
    v[i] = keep - h;
    const double fm = f().item();
    v[i] = keep;
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel = std::abs(analytic[i] - numeric) /
                       (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
    if (rel > max_rel) max_rel = rel;
  }
  param.zero_grad();
  return max_rel;
}

}  // namespace cohff
