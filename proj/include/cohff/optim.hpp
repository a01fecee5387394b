#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/tensor.hpp"

namespace cohff {

struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> momentum;  // sized on first sgd_step
};

// Named parameter registry; tensors handed out alias the stored buffers, so
// optimizer updates are visible wherever the tensor is used.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t) {
    if (index_.count(name))
      throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back(std::make_shared<Parameter>(Parameter{name, t, {}}));
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return *params_[it->second];
  }

  const std::vector<std::shared_ptr<Parameter>>& all() const { return params_; }

  size_t total_values() const {
    size_t n = 0;
    for (const auto& p : params_) n += p->tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p->tensor.zero_grad();
  }

  double grad_norm() const {
    double acc = 0;
    for (const auto& p : params_) {
      if (!p->tensor.has_grad()) continue;
      for (double g : p->tensor.data()->g) acc += g * g;
    }
    return std::sqrt(acc);
  }

 private:
  std::vector<std::shared_ptr<Parameter>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// v <- mu*v + g;  p <- p - lr*v
inline void sgd_step(ParamStore& params, double lr, double mu) {
  for (auto& p : params.all()) {
    Tensor& t = p->tensor;
    if (p->momentum.size() != t.numel()) p->momentum.assign(t.numel(), 0.0);
    const bool has_grad = t.has_grad();
    for (size_t i = 0; i < t.numel(); ++i) {
      const double gi = has_grad ? t.data()->g[i] : 0.0;
      p->momentum[i] = mu * p->momentum[i] + gi;
      t.at(i) -= lr * p->momentum[i];
    }
  }
}

inline void xavier_uniform(Tensor& t, size_t fan_in, size_t fan_out, Rng& rng) {
  if (fan_in + fan_out == 0) throw std::invalid_argument("xavier_uniform: zero fans");
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
}

// Convenience builders used by the task nets.
inline Tensor make_linear_weight(ParamStore& ps, const std::string& name, size_t in,
                                 size_t out, Rng& rng) {
  Tensor W({in, out});
  xavier_uniform(W, in, out, rng);
  return ps.add(name, W);
}

inline Tensor make_zeros(ParamStore& ps, const std::string& name,
                         std::vector<size_t> shape) {
  return ps.add(name, Tensor(std::move(shape)));
}

}  // namespace cohff
