#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cohff/tensor.hpp"

namespace cohff {

constexpr double kProbEps = 1e-7;

// Binary focal loss on probabilities: mean over all elements of
// -alpha * (1 - p_t)^gamma * ln(p_t), with p_t = p for y=1 and 1-p for y=0,
// p_t clamped to [eps, 1-eps]. gamma=0, alpha=1 reduces to BCE.
inline Tensor focal_loss(const Tensor& p, const std::vector<uint8_t>& targets,
                         double alpha = 0.25, double gamma = 2.0) {
  if (targets.size() != p.numel())
    throw std::invalid_argument("focal_loss: targets length " +
                                std::to_string(targets.size()) + " != numel " +
                                std::to_string(p.numel()));
  if (p.numel() == 0) throw std::invalid_argument("focal_loss: empty input");
  const size_t n = p.numel();
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor out({1});
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    const double pt = targets[i] ? p.at(i) : 1.0 - p.at(i);
    const double ptc = std::clamp(pt, kProbEps, 1.0 - kProbEps);
    acc += -alpha * std::pow(1.0 - ptc, gamma) * std::log(ptc);
  }
  out.at(0) = acc * inv_n;
  auto pd = p.data(), od = out.data();
  record_op(p.requires_grad(), out, [pd, od, targets, alpha, gamma, inv_n] {
    if (od->g.empty()) return;
    pd->ensure_grad();
    const double gy = od->g[0] * inv_n;
    for (size_t i = 0; i < targets.size(); ++i) {
      const double pt = targets[i] ? pd->v[i] : 1.0 - pd->v[i];
      if (pt <= kProbEps || pt >= 1.0 - kProbEps) continue;  // clamped: flat
      const double one_m = 1.0 - pt;
      const double pow_term = (gamma == 0.0) ? 0.0
                                             : gamma * std::pow(one_m, gamma - 1.0) *
                                                   std::log(pt);
      const double dl_dpt = -alpha * (-pow_term + std::pow(one_m, gamma) / pt);
      pd->g[i] += gy * (targets[i] ? dl_dpt : -dl_dpt);
    }
  });
  return out;
}

// Softmax cross-entropy with per-class weights: mean over rows of
// w[label] * (-ln softmax(logits)[label]).
inline Tensor weighted_cross_entropy(const Tensor& logits,
                                     const std::vector<uint8_t>& labels,
                                     const std::vector<double>& class_weights) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("weighted_cross_entropy: logits must be [N,C], got " +
                                detail::shape_str(logits.shape()));
  const size_t N = logits.dim(0), C = logits.dim(1);
  if (labels.size() != N)
    throw std::invalid_argument("weighted_cross_entropy: labels length mismatch");
  if (class_weights.size() != C)
    throw std::invalid_argument("weighted_cross_entropy: weights length mismatch");
  for (uint8_t y : labels)
    if (y >= C)
      throw std::invalid_argument("weighted_cross_entropy: label " +
                                  std::to_string(int(y)) + " out of range C=" +
                                  std::to_string(C));
  if (N == 0) throw std::invalid_argument("weighted_cross_entropy: empty batch");

  // softmax rows saved for the backward pass
  auto probs = std::make_shared<std::vector<double>>(N * C);
  const double inv_n = 1.0 / static_cast<double>(N);
  Tensor out({1});
  double acc = 0;
  for (size_t r = 0; r < N; ++r) {
    double mx = logits.at(r * C);
    for (size_t c = 1; c < C; ++c) mx = std::max(mx, logits.at(r * C + c));
    double denom = 0;
    for (size_t c = 0; c < C; ++c) {
      const double e = std::exp(logits.at(r * C + c) - mx);
      (*probs)[r * C + c] = e;
      denom += e;
    }
    for (size_t c = 0; c < C; ++c) (*probs)[r * C + c] /= denom;
    const double py = std::max((*probs)[r * C + labels[r]], kProbEps);
    acc += class_weights[labels[r]] * (-std::log(py));
  }
  out.at(0) = acc * inv_n;
  auto ld = logits.data(), od = out.data();
  record_op(logits.requires_grad(), out,
            [ld, od, probs, labels, class_weights, N, C, inv_n] {
              if (od->g.empty()) return;
              ld->ensure_grad();
              const double gy = od->g[0] * inv_n;
              for (size_t r = 0; r < N; ++r) {
                const double w = class_weights[labels[r]];
                for (size_t c = 0; c < C; ++c) {
                  const double delta = (c == labels[r]) ? 1.0 : 0.0;
                  ld->g[r * C + c] += gy * w * ((*probs)[r * C + c] - delta);
                }
              }
            });
  return out;
}

// Inverse-frequency class weights over the labels present, normalized so the
// present classes average to 1; absent classes get weight 1.
inline std::vector<double> inverse_frequency_weights(const std::vector<uint8_t>& labels,
                                                     size_t num_classes) {
  std::vector<size_t> count(num_classes, 0);
  for (uint8_t y : labels) {
    if (y >= num_classes)
      throw std::invalid_argument("inverse_frequency_weights: label out of range");
    ++count[y];
  }
  std::vector<double> w(num_classes, 1.0);
  double sum_present = 0;
  size_t present = 0;
  for (size_t c = 0; c < num_classes; ++c) {
    if (count[c] == 0) continue;
    w[c] = 1.0 / static_cast<double>(count[c]);
    sum_present += w[c];
    ++present;
  }
  if (present == 0) return w;
  const double norm = static_cast<double>(present) / sum_present;
  for (size_t c = 0; c < num_classes; ++c)
    if (count[c] > 0) w[c] *= norm;
  return w;
}

}  // namespace cohff
