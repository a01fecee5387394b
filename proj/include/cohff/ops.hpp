#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohff/tensor.hpp"

namespace cohff {

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// outer x axis x inner factorization for axis-wise ops
struct AxisSplit {
  size_t outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_axis(const std::vector<size_t>& shape, size_t axis) {
  if (axis >= shape.size())
    throw std::invalid_argument("axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(shape));
  AxisSplit s;
  for (size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.axis = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  Tensor out(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  auto ad = a.data(), bd = b.data(), od = out.data();
  record_op(a.requires_grad() || b.requires_grad(), out, [ad, bd, od] {
    if (od->g.empty()) return;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i];
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (size_t i = 0; i < od->g.size(); ++i) bd->g[i] += od->g[i];
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  Tensor out(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  auto ad = a.data(), bd = b.data(), od = out.data();
  record_op(a.requires_grad() || b.requires_grad(), out, [ad, bd, od] {
    if (od->g.empty()) return;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i];
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (size_t i = 0; i < od->g.size(); ++i) bd->g[i] -= od->g[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  Tensor out(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  auto ad = a.data(), bd = b.data(), od = out.data();
  record_op(a.requires_grad() || b.requires_grad(), out, [ad, bd, od] {
    if (od->g.empty()) return;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i] * bd->v[i];
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (size_t i = 0; i < od->g.size(); ++i) bd->g[i] += od->g[i] * ad->v[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
  auto ad = a.data(), od = out.data();
  record_op(a.requires_grad(), out, [ad, od, c] {
    if (od->g.empty()) return;
    ad->ensure_grad();
    for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i] * c;
  });
  return out;
}

inline Tensor sum(const Tensor& a) {
  Tensor out({1});
  double acc = 0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a.at(i);
  out.at(0) = acc;
  auto ad = a.data(), od = out.data();
  record_op(a.requires_grad(), out, [ad, od] {
    if (od->g.empty()) return;
    ad->ensure_grad();
    for (size_t i = 0; i < ad->g.size(); ++i) ad->g[i] += od->g[0];
  });
  return out;
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = sum(a);
  return scale(out, inv);
}

// y = x W + b over the last axis of x; b may be empty (no bias).
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
  if (W.ndim() != 2)
    throw std::invalid_argument("linear: W must be 2-d, got " +
                                detail::shape_str(W.shape()));
  const size_t in = W.dim(0), out_dim = W.dim(1);
  if (x.ndim() < 1 || x.shape().back() != in)
    throw std::invalid_argument("linear: x " + detail::shape_str(x.shape()) +
                                " does not match W " + detail::shape_str(W.shape()));
  const bool use_bias = b.numel() != 0;
  if (use_bias && (b.ndim() != 1 || b.dim(0) != out_dim))
    throw std::invalid_argument("linear: b " + detail::shape_str(b.shape()) +
                                " does not match W " + detail::shape_str(W.shape()));
  const size_t rows = x.numel() / in;
  std::vector<size_t> out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * in;
    double* yr = out.values().data() + r * out_dim;
    if (use_bias)
      for (size_t j = 0; j < out_dim; ++j) yr[j] = b.at(j);
    for (size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      if (xi == 0.0) continue;
      const double* wrow = W.values().data() + i * out_dim;
      for (size_t j = 0; j < out_dim; ++j) yr[j] += xi * wrow[j];
    }
  }
  auto xd = x.data(), Wd = W.data(), bd = b.data(), od = out.data();
  record_op(x.requires_grad() || W.requires_grad() || b.requires_grad(), out,
            [xd, Wd, bd, od, rows, in, out_dim, use_bias] {
              if (od->g.empty()) return;
              for (size_t r = 0; r < rows; ++r) {
                const double* gy = od->g.data() + r * out_dim;
                if (xd->requires_grad) {
                  xd->ensure_grad();
                  double* gx = xd->g.data() + r * in;
                  for (size_t i = 0; i < in; ++i) {
                    const double* wrow = Wd->v.data() + i * out_dim;
                    double acc = 0;
                    for (size_t j = 0; j < out_dim; ++j) acc += gy[j] * wrow[j];
                    gx[i] += acc;
                  }
                }
                if (Wd->requires_grad) {
                  Wd->ensure_grad();
                  const double* xr = xd->v.data() + r * in;
                  for (size_t i = 0; i < in; ++i) {
                    const double xi = xr[i];
                    if (xi == 0.0) continue;
                    double* gw = Wd->g.data() + i * out_dim;
                    for (size_t j = 0; j < out_dim; ++j) gw[j] += xi * gy[j];
                  }
                }
                if (use_bias && bd->requires_grad) {
                  bd->ensure_grad();
                  for (size_t j = 0; j < out_dim; ++j) bd->g[j] += gy[j];
                }
              }
            });
  return out;
}

inline Tensor linear(const Tensor& x, const Tensor& W) { return linear(x, W, Tensor({0})); }

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (size_t i = 0; i < x.numel(); ++i) out.at(i) = x.at(i) > 0 ? x.at(i) : 0.0;
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    for (size_t i = 0; i < od->g.size(); ++i)
      if (xd->v[i] > 0) xd->g[i] += od->g[i];
  });
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (size_t i = 0; i < x.numel(); ++i) {
    const double v = x.at(i);
    out.at(i) = v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                       : std::exp(v) / (1.0 + std::exp(v));
  }
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    for (size_t i = 0; i < od->g.size(); ++i) {
      const double y = od->v[i];
      xd->g[i] += od->g[i] * y * (1.0 - y);
    }
  });
  return out;
}

// Max-subtracted softmax along axis.
inline Tensor softmax(const Tensor& x, size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor out(x.shape());
  for (size_t o = 0; o < sp.outer; ++o) {
    for (size_t in = 0; in < sp.inner; ++in) {
      const size_t base = o * sp.axis * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t k = 0; k < sp.axis; ++k) mx = std::max(mx, x.at(base + k * sp.inner));
      double denom = 0;
      for (size_t k = 0; k < sp.axis; ++k) {
        const double e = std::exp(x.at(base + k * sp.inner) - mx);
        out.at(base + k * sp.inner) = e;
        denom += e;
      }
      for (size_t k = 0; k < sp.axis; ++k) out.at(base + k * sp.inner) /= denom;
    }
  }
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od, sp] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    for (size_t o = 0; o < sp.outer; ++o) {
      for (size_t in = 0; in < sp.inner; ++in) {
        const size_t base = o * sp.axis * sp.inner + in;
        double dot = 0;
        for (size_t k = 0; k < sp.axis; ++k) {
          const size_t i = base + k * sp.inner;
          dot += od->g[i] * od->v[i];
        }
        for (size_t k = 0; k < sp.axis; ++k) {
          const size_t i = base + k * sp.inner;
          xd->g[i] += od->v[i] * (od->g[i] - dot);
        }
      }
    }
  });
  return out;
}

// Softmax over the valid entries only (mask 1=valid); groups with no valid
// entry come out all-zero.
inline Tensor masked_softmax(const Tensor& x, const std::vector<uint8_t>& mask,
                             size_t axis) {
  if (mask.size() != x.numel())
    throw std::invalid_argument("masked_softmax: mask length " +
                                std::to_string(mask.size()) + " != numel " +
                                std::to_string(x.numel()));
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor out(x.shape());
  for (size_t o = 0; o < sp.outer; ++o) {
    for (size_t in = 0; in < sp.inner; ++in) {
      const size_t base = o * sp.axis * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t k = 0; k < sp.axis; ++k)
        if (mask[base + k * sp.inner]) mx = std::max(mx, x.at(base + k * sp.inner));
      if (!std::isfinite(mx)) continue;  // no valid entries: leave zeros
      double denom = 0;
      for (size_t k = 0; k < sp.axis; ++k) {
        const size_t i = base + k * sp.inner;
        if (!mask[i]) continue;
        const double e = std::exp(x.at(i) - mx);
        out.at(i) = e;
        denom += e;
      }
      for (size_t k = 0; k < sp.axis; ++k) {
        const size_t i = base + k * sp.inner;
        if (mask[i]) out.at(i) /= denom;
      }
    }
  }
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od, sp] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    // invalid entries have y = 0, so the usual formula zeroes them out
    for (size_t o = 0; o < sp.outer; ++o) {
      for (size_t in = 0; in < sp.inner; ++in) {
        const size_t base = o * sp.axis * sp.inner + in;
        double dot = 0;
        for (size_t k = 0; k < sp.axis; ++k) {
          const size_t i = base + k * sp.inner;
          dot += od->g[i] * od->v[i];
        }
        for (size_t k = 0; k < sp.axis; ++k) {
          const size_t i = base + k * sp.inner;
          xd->g[i] += od->v[i] * (od->g[i] - dot);
        }
      }
    }
  });
  return out;
}

inline Tensor reshape(const Tensor& x, std::vector<size_t> new_shape) {
  if (detail::shape_numel(new_shape) != x.numel())
    throw std::invalid_argument("reshape: cannot view " + detail::shape_str(x.shape()) +
                                " as " + detail::shape_str(new_shape));
  Tensor out;
  out.data()->shape = std::move(new_shape);
  out.data()->v = x.values();
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    for (size_t i = 0; i < od->g.size(); ++i) xd->g[i] += od->g[i];
  });
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const auto& first = parts[0].shape();
  std::vector<size_t> out_shape = first;
  size_t total_axis = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != first.size())
      throw std::invalid_argument("concat: rank mismatch");
    for (size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.shape()[i] != first[i])
        throw std::invalid_argument("concat: shape mismatch at dim " + std::to_string(i));
    total_axis += p.shape()[axis];
  }
  out_shape[axis] = total_axis;
  Tensor out(out_shape);
  const auto osp = detail::split_axis(out_shape, axis);
  bool need = false;
  size_t axis_off = 0;
  for (const Tensor& p : parts) {
    need = need || p.requires_grad();
    const auto psp = detail::split_axis(p.shape(), axis);
    for (size_t o = 0; o < psp.outer; ++o)
      for (size_t k = 0; k < psp.axis; ++k)
        std::copy_n(p.values().data() + (o * psp.axis + k) * psp.inner, psp.inner,
                    out.values().data() + (o * osp.axis + axis_off + k) * osp.inner);
    axis_off += psp.axis;
  }
  std::vector<std::shared_ptr<TensorData>> pds;
  for (const Tensor& p : parts) pds.push_back(p.data());
  auto od = out.data();
  record_op(need, out, [pds, od, osp, axis] {
    if (od->g.empty()) return;
    size_t off = 0;
    for (auto& pd : pds) {
      const auto psp = detail::split_axis(pd->shape, axis);
      if (pd->requires_grad) {
        pd->ensure_grad();
        for (size_t o = 0; o < psp.outer; ++o)
          for (size_t k = 0; k < psp.axis; ++k) {
            const double* src = od->g.data() + (o * osp.axis + off + k) * osp.inner;
            double* dst = pd->g.data() + (o * psp.axis + k) * psp.inner;
            for (size_t i = 0; i < psp.inner; ++i) dst[i] += src[i];
          }
      }
      off += psp.axis;
    }
  });
  return out;
}

// Contiguous row range [start, start+count) of the leading axis.
inline Tensor slice_rows(const Tensor& x, size_t start, size_t count) {
  if (x.ndim() < 1 || start + count > x.dim(0))
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") out of " +
                                detail::shape_str(x.shape()));
  std::vector<size_t> out_shape = x.shape();
  out_shape[0] = count;
  const size_t row = x.numel() / x.dim(0);
  Tensor out(out_shape);
  std::copy_n(x.values().data() + start * row, count * row, out.values().data());
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od, start, row, count] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    for (size_t i = 0; i < count * row; ++i) xd->g[start * row + i] += od->g[i];
  });
  return out;
}

// out[..., j] = x[..., index[j]] (constant index map; scatter-add backward).
inline Tensor gather_last(const Tensor& x, const std::vector<size_t>& index) {
  if (x.ndim() < 1) throw std::invalid_argument("gather_last: scalar input");
  const size_t last = x.shape().back();
  for (size_t j : index)
    if (j >= last) throw std::invalid_argument("gather_last: index out of range");
  std::vector<size_t> out_shape = x.shape();
  out_shape.back() = index.size();
  const size_t rows = x.numel() / last;
  const size_t m = index.size();
  Tensor out(out_shape);
  for (size_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < m; ++j)
      out.at(r * m + j) = x.at(r * last + index[j]);
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od, index, rows, m, last] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    for (size_t r = 0; r < rows; ++r)
      for (size_t j = 0; j < m; ++j)
        xd->g[r * last + index[j]] += od->g[r * m + j];
  });
  return out;
}

// out[i] = x[rows[i]] over the leading axis.
inline Tensor gather_rows(const Tensor& x, const std::vector<size_t>& rows) {
  if (x.ndim() < 1) throw std::invalid_argument("gather_rows: scalar input");
  const size_t n = x.dim(0);
  for (size_t r : rows)
    if (r >= n) throw std::invalid_argument("gather_rows: index out of range");
  const size_t stride = x.numel() / n;
  std::vector<size_t> out_shape = x.shape();
  out_shape[0] = rows.size();
  Tensor out(out_shape);
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.values().data() + rows[i] * stride, stride,
                out.values().data() + i * stride);
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od, rows, stride] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    for (size_t i = 0; i < rows.size(); ++i)
      for (size_t k = 0; k < stride; ++k)
        xd->g[rows[i] * stride + k] += od->g[i * stride + k];
  });
  return out;
}

// Per-row constant gate: out[r, ...] = x[r, ...] * s[r].
inline Tensor row_scale(const Tensor& x, const std::vector<double>& s) {
  if (x.ndim() < 1 || x.dim(0) != s.size())
    throw std::invalid_argument("row_scale: gate length " + std::to_string(s.size()) +
                                " vs " + detail::shape_str(x.shape()));
  const size_t stride = x.numel() / x.dim(0);
  Tensor out(x.shape());
  for (size_t r = 0; r < s.size(); ++r)
    for (size_t k = 0; k < stride; ++k)
      out.at(r * stride + k) = x.at(r * stride + k) * s[r];
  auto xd = x.data(), od = out.data();
  record_op(x.requires_grad(), out, [xd, od, s, stride] {
    if (od->g.empty()) return;
    xd->ensure_grad();
    for (size_t r = 0; r < s.size(); ++r)
      for (size_t k = 0; k < stride; ++k)
        xd->g[r * stride + k] += od->g[r * stride + k] * s[r];
  });
  return out;
}

// Plane gating: out[h,w,f] = plane[h,w,f] * gate[h,w]; grads to both.
inline Tensor scale_cells(const Tensor& plane, const Tensor& gate) {
  if (plane.ndim() != 3 || gate.ndim() != 2 || plane.dim(0) != gate.dim(0) ||
      plane.dim(1) != gate.dim(1))
    throw std::invalid_argument("scale_cells: plane " + detail::shape_str(plane.shape()) +
                                " vs gate " + detail::shape_str(gate.shape()));
  const size_t cells = gate.numel(), F = plane.dim(2);
  Tensor out(plane.shape());
  for (size_t c = 0; c < cells; ++c)
    for (size_t f = 0; f < F; ++f)
      out.at(c * F + f) = plane.at(c * F + f) * gate.at(c);
  auto pd = plane.data(), gd = gate.data(), od = out.data();
  record_op(plane.requires_grad() || gate.requires_grad(), out, [pd, gd, od, cells, F] {
    if (od->g.empty()) return;
    if (pd->requires_grad) {
      pd->ensure_grad();
      for (size_t c = 0; c < cells; ++c)
        for (size_t f = 0; f < F; ++f)
          pd->g[c * F + f] += od->g[c * F + f] * gd->v[c];
    }
    if (gd->requires_grad) {
      gd->ensure_grad();
      for (size_t c = 0; c < cells; ++c) {
        double acc = 0;
        for (size_t f = 0; f < F; ++f) acc += od->g[c * F + f] * pd->v[c * F + f];
        gd->g[c] += acc;
      }
    }
  });
  return out;
}

// Channel gating: out[..., f] = x[..., f] * g[f]; grads to both.
inline Tensor scale_channels(const Tensor& x, const Tensor& g) {
  if (g.ndim() != 1 || x.ndim() < 1 || x.shape().back() != g.dim(0))
    throw std::invalid_argument("scale_channels: x " + detail::shape_str(x.shape()) +
                                " vs g " + detail::shape_str(g.shape()));
  const size_t F = g.dim(0);
  const size_t rows = x.numel() / F;
  Tensor out(x.shape());
  for (size_t r = 0; r < rows; ++r)
    for (size_t f = 0; f < F; ++f)
      out.at(r * F + f) = x.at(r * F + f) * g.at(f);
  auto xd = x.data(), gd = g.data(), od = out.data();
  record_op(x.requires_grad() || g.requires_grad(), out, [xd, gd, od, rows, F] {
    if (od->g.empty()) return;
    if (xd->requires_grad) {
      xd->ensure_grad();
      for (size_t r = 0; r < rows; ++r)
        for (size_t f = 0; f < F; ++f)
          xd->g[r * F + f] += od->g[r * F + f] * gd->v[f];
    }
    if (gd->requires_grad) {
      gd->ensure_grad();
      for (size_t r = 0; r < rows; ++r)
        for (size_t f = 0; f < F; ++f)
          gd->g[f] += od->g[r * F + f] * xd->v[r * F + f];
    }
  });
  return out;
}

// Bilinear interpolation on plane[H,W,F] at continuous coords[N,2] (row, col
// in cell units). Samples fully outside [0,H-1]x[0,W-1] return zeros; within
// the one-cell border band the footprint clamps to edge cells. Differentiable
// w.r.t. both plane and coords.
inline Tensor bilinear_sample2d(const Tensor& plane, const Tensor& coords) {
  if (plane.ndim() != 3)
    throw std::invalid_argument("bilinear_sample2d: plane must be [H,W,F], got " +
                                detail::shape_str(plane.shape()));
  if (coords.ndim() != 2 || coords.dim(1) != 2)
    throw std::invalid_argument("bilinear_sample2d: coords must be [N,2], got " +
                                detail::shape_str(coords.shape()));
  const size_t H = plane.dim(0), W = plane.dim(1), F = plane.dim(2);
  const size_t N = coords.dim(0);
  Tensor out({N, F});
  auto pd = plane.data(), cd = coords.data(), od = out.data();

  auto taps = [H, W](double u, double v, size_t idx[4], double w[4], double dwu[4],
                     double dwv[4]) -> bool {
    if (u <= -1.0 || u >= static_cast<double>(H) || v <= -1.0 ||
        v >= static_cast<double>(W))
      return false;
    const double fi = std::floor(u), fj = std::floor(v);
    const double fu = u - fi, fv = v - fj;
    auto clampi = [](double a, size_t n) {
      return static_cast<size_t>(std::clamp(a, 0.0, static_cast<double>(n - 1)));
    };
    const size_t i0 = clampi(fi, H), i1 = clampi(fi + 1, H);
    const size_t j0 = clampi(fj, W), j1 = clampi(fj + 1, W);
    idx[0] = i0 * W + j0;
    idx[1] = i0 * W + j1;
    idx[2] = i1 * W + j0;
    idx[3] = i1 * W + j1;
    w[0] = (1 - fu) * (1 - fv);
    w[1] = (1 - fu) * fv;
    w[2] = fu * (1 - fv);
    w[3] = fu * fv;
    dwu[0] = -(1 - fv); dwu[1] = -fv; dwu[2] = (1 - fv); dwu[3] = fv;
    dwv[0] = -(1 - fu); dwv[1] = (1 - fu); dwv[2] = -fu; dwv[3] = fu;
    return true;
  };

  for (size_t n = 0; n < N; ++n) {
    size_t idx[4];
    double w[4], dwu[4], dwv[4];
    if (!taps(coords.at(n * 2), coords.at(n * 2 + 1), idx, w, dwu, dwv)) continue;
    for (size_t f = 0; f < F; ++f) {
      double acc = 0;
      for (int t = 0; t < 4; ++t) acc += w[t] * plane.at(idx[t] * F + f);
      out.at(n * F + f) = acc;
    }
  }
  record_op(plane.requires_grad() || coords.requires_grad(), out,
            [pd, cd, od, taps, N, F] {
              if (od->g.empty()) return;
              for (size_t n = 0; n < N; ++n) {
                size_t idx[4];
                double w[4], dwu[4], dwv[4];
                if (!taps(cd->v[n * 2], cd->v[n * 2 + 1], idx, w, dwu, dwv)) continue;
                double gu = 0, gv = 0;
                for (size_t f = 0; f < F; ++f) {
                  const double gy = od->g[n * F + f];
                  if (gy == 0.0) continue;
                  for (int t = 0; t < 4; ++t) {
                    const double pv = pd->v[idx[t] * F + f];
                    if (pd->requires_grad) {
                      pd->ensure_grad();
                      pd->g[idx[t] * F + f] += gy * w[t];
                    }
                    gu += gy * dwu[t] * pv;
                    gv += gy * dwv[t] * pv;
                  }
                }
                if (cd->requires_grad) {
                  cd->ensure_grad();
                  cd->g[n * 2] += gu;
                  cd->g[n * 2 + 1] += gv;
                }
              }
            });
  return out;
}

// Per-channel 3D convolution with zero "same" padding; kernel dims odd.
inline Tensor depthwise_conv3d(const Tensor& vol, const Tensor& ker) {
  if (vol.ndim() != 4)
    throw std::invalid_argument("depthwise_conv3d: vol must be [X,Y,Z,F], got " +
                                detail::shape_str(vol.shape()));
  if (ker.ndim() != 4)
    throw std::invalid_argument("depthwise_conv3d: kernels must be [k,k,k,F], got " +
                                detail::shape_str(ker.shape()));
  const size_t X = vol.dim(0), Y = vol.dim(1), Z = vol.dim(2), F = vol.dim(3);
  const size_t k0 = ker.dim(0), k1 = ker.dim(1), k2 = ker.dim(2);
  if (ker.dim(3) != F)
    throw std::invalid_argument("depthwise_conv3d: channel mismatch");
  if (k0 % 2 == 0 || k1 % 2 == 0 || k2 % 2 == 0)
    throw std::invalid_argument("depthwise_conv3d: kernel dims must be odd, got " +
                                detail::shape_str(ker.shape()));
  const int r0 = static_cast<int>(k0 / 2), r1 = static_cast<int>(k1 / 2),
            r2 = static_cast<int>(k2 / 2);
  Tensor out(vol.shape());
  auto vidx = [Y, Z, F](size_t x, size_t y, size_t z, size_t f) {
    return ((x * Y + y) * Z + z) * F + f;
  };
  auto kidx = [k1, k2, F](size_t a, size_t b, size_t c, size_t f) {
    return ((a * k1 + b) * k2 + c) * F + f;
  };
  for (size_t x = 0; x < X; ++x)
    for (size_t y = 0; y < Y; ++y)
      for (size_t z = 0; z < Z; ++z)
        for (size_t f = 0; f < F; ++f) {
          double acc = 0;
          for (size_t a = 0; a < k0; ++a) {
            const int sx = static_cast<int>(x) + static_cast<int>(a) - r0;
            if (sx < 0 || sx >= static_cast<int>(X)) continue;
            for (size_t b = 0; b < k1; ++b) {
              const int sy = static_cast<int>(y) + static_cast<int>(b) - r1;
              if (sy < 0 || sy >= static_cast<int>(Y)) continue;
              for (size_t c = 0; c < k2; ++c) {
                const int sz = static_cast<int>(z) + static_cast<int>(c) - r2;
                if (sz < 0 || sz >= static_cast<int>(Z)) continue;
                acc += vol.at(vidx(sx, sy, sz, f)) * ker.at(kidx(a, b, c, f));
              }
            }
          }
          out.at(vidx(x, y, z, f)) = acc;
        }
  auto vd = vol.data(), kd = ker.data(), od = out.data();
  record_op(vol.requires_grad() || ker.requires_grad(), out,
            [vd, kd, od, X, Y, Z, F, k0, k1, k2, r0, r1, r2, vidx, kidx] {
              if (od->g.empty()) return;
              if (vd->requires_grad) vd->ensure_grad();
              if (kd->requires_grad) kd->ensure_grad();
              for (size_t x = 0; x < X; ++x)
                for (size_t y = 0; y < Y; ++y)
                  for (size_t z = 0; z < Z; ++z)
                    for (size_t f = 0; f < F; ++f) {
                      const double gy = od->g[vidx(x, y, z, f)];
                      if (gy == 0.0) continue;
                      for (size_t a = 0; a < k0; ++a) {
                        const int sx = static_cast<int>(x) + static_cast<int>(a) - r0;
                        if (sx < 0 || sx >= static_cast<int>(X)) continue;
                        for (size_t b = 0; b < k1; ++b) {
                          const int sy = static_cast<int>(y) + static_cast<int>(b) - r1;
                          if (sy < 0 || sy >= static_cast<int>(Y)) continue;
                          for (size_t c = 0; c < k2; ++c) {
                            const int sz = static_cast<int>(z) + static_cast<int>(c) - r2;
                            if (sz < 0 || sz >= static_cast<int>(Z)) continue;
                            if (vd->requires_grad)
                              vd->g[vidx(sx, sy, sz, f)] += gy * kd->v[kidx(a, b, c, f)];
                            if (kd->requires_grad)
                              kd->g[kidx(a, b, c, f)] += gy * vd->v[vidx(sx, sy, sz, f)];
                          }
                        }
                      }
                    }
            });
  return out;
}

// 2D convolution with zero "same" padding: img[H,W,Cin] * ker[k,k,Cin,Cout]
// + bias[Cout] (empty bias = none); kernel spatial dims odd.
inline Tensor conv2d(const Tensor& img, const Tensor& ker, const Tensor& bias) {
  if (img.ndim() != 3)
    throw std::invalid_argument("conv2d: img must be [H,W,Cin], got " +
                                detail::shape_str(img.shape()));
  if (ker.ndim() != 4)
    throw std::invalid_argument("conv2d: ker must be [k,k,Cin,Cout], got " +
                                detail::shape_str(ker.shape()));
  const size_t H = img.dim(0), W = img.dim(1), Cin = img.dim(2);
  const size_t k0 = ker.dim(0), k1 = ker.dim(1), Cout = ker.dim(3);
  if (ker.dim(2) != Cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (k0 % 2 == 0 || k1 % 2 == 0)
    throw std::invalid_argument("conv2d: kernel dims must be odd, got " +
                                detail::shape_str(ker.shape()));
  const bool use_bias = bias.numel() != 0;
  if (use_bias && (bias.ndim() != 1 || bias.dim(0) != Cout))
    throw std::invalid_argument("conv2d: bias " + detail::shape_str(bias.shape()) +
                                " does not match Cout");
  const int r0 = static_cast<int>(k0 / 2), r1 = static_cast<int>(k1 / 2);
  Tensor out({H, W, Cout});
  auto iidx = [W, Cin](size_t y, size_t x, size_t c) { return (y * W + x) * Cin + c; };
  auto kidx = [k1, Cin, Cout](size_t a, size_t b, size_t ci, size_t co) {
    return ((a * k1 + b) * Cin + ci) * Cout + co;
  };
  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < W; ++x) {
      double* orow = out.values().data() + (y * W + x) * Cout;
      if (use_bias)
        for (size_t co = 0; co < Cout; ++co) orow[co] = bias.at(co);
      for (size_t a = 0; a < k0; ++a) {
        const int sy = static_cast<int>(y) + static_cast<int>(a) - r0;
        if (sy < 0 || sy >= static_cast<int>(H)) continue;
        for (size_t b = 0; b < k1; ++b) {
          const int sx = static_cast<int>(x) + static_cast<int>(b) - r1;
          if (sx < 0 || sx >= static_cast<int>(W)) continue;
          for (size_t ci = 0; ci < Cin; ++ci) {
            const double v = img.at(iidx(sy, sx, ci));
            if (v == 0.0) continue;
            const double* krow = ker.values().data() + kidx(a, b, ci, 0);
            for (size_t co = 0; co < Cout; ++co) orow[co] += v * krow[co];
          }
        }
      }
    }
  auto id = img.data(), kd = ker.data(), bd = bias.data(), od = out.data();
  record_op(img.requires_grad() || ker.requires_grad() || bias.requires_grad(), out,
            [id, kd, bd, od, H, W, Cin, Cout, k0, k1, r0, r1, iidx, kidx, use_bias] {
              if (od->g.empty()) return;
              if (id->requires_grad) id->ensure_grad();
              if (kd->requires_grad) kd->ensure_grad();
              if (use_bias && bd->requires_grad) bd->ensure_grad();
              for (size_t y = 0; y < H; ++y)
                for (size_t x = 0; x < W; ++x) {
                  const double* gy = od->g.data() + (y * W + x) * Cout;
                  if (use_bias && bd->requires_grad)
                    for (size_t co = 0; co < Cout; ++co) bd->g[co] += gy[co];
                  for (size_t a = 0; a < k0; ++a) {
                    const int sy = static_cast<int>(y) + static_cast<int>(a) - r0;
                    if (sy < 0 || sy >= static_cast<int>(H)) continue;
                    for (size_t b = 0; b < k1; ++b) {
                      const int sx = static_cast<int>(x) + static_cast<int>(b) - r1;
                      if (sx < 0 || sx >= static_cast<int>(W)) continue;
                      for (size_t ci = 0; ci < Cin; ++ci) {
                        const size_t ii = iidx(sy, sx, ci);
                        const double* krow = kd->v.data() + kidx(a, b, ci, 0);
                        double gacc = 0;
                        for (size_t co = 0; co < Cout; ++co) {
                          gacc += gy[co] * krow[co];
                          if (kd->requires_grad)
                            kd->g[kidx(a, b, ci, co)] += gy[co] * id->v[ii];
                        }
                        if (id->requires_grad) id->g[ii] += gacc;
                      }
                    }
                  }
                }
            });
  return out;
}

inline Tensor conv2d(const Tensor& img, const Tensor& ker) {
  return conv2d(img, ker, Tensor({0}));
}

// Attention pooling over sample slots: out[n,f] = sum_m w[n,m] * v[n,m,f],
// restricted to slots whose head owns channel f (head h owns the contiguous
// channel block of width F/heads).
inline Tensor slot_attend(const Tensor& values, const Tensor& weights,
                          const std::vector<int>& head_of_slot, int heads) {
  if (values.ndim() != 3 || weights.ndim() != 2 ||
      values.dim(0) != weights.dim(0) || values.dim(1) != weights.dim(1))
    throw std::invalid_argument("slot_attend: values " + detail::shape_str(values.shape()) +
                                " vs weights " + detail::shape_str(weights.shape()));
  const size_t N = values.dim(0), M = values.dim(1), F = values.dim(2);
  if (head_of_slot.size() != M)
    throw std::invalid_argument("slot_attend: head map length mismatch");
  if (heads < 1 || F % static_cast<size_t>(heads) != 0)
    throw std::invalid_argument("slot_attend: F must be divisible by heads");
  const size_t hw = F / static_cast<size_t>(heads);
  Tensor out({N, F});
  for (size_t n = 0; n < N; ++n)
    for (size_t m = 0; m < M; ++m) {
      const double w = weights.at(n * M + m);
      if (w == 0.0) continue;
      const size_t f0 = static_cast<size_t>(head_of_slot[m]) * hw;
      for (size_t f = f0; f < f0 + hw; ++f)
        out.at(n * F + f) += w * values.at((n * M + m) * F + f);
    }
  auto vd = values.data(), wd = weights.data(), od = out.data();
  record_op(values.requires_grad() || weights.requires_grad(), out,
            [vd, wd, od, head_of_slot, N, M, F, hw] {
              if (od->g.empty()) return;
              if (vd->requires_grad) vd->ensure_grad();
              if (wd->requires_grad) wd->ensure_grad();
              for (size_t n = 0; n < N; ++n)
                for (size_t m = 0; m < M; ++m) {
                  const size_t f0 = static_cast<size_t>(head_of_slot[m]) * hw;
                  double gw = 0;
                  for (size_t f = f0; f < f0 + hw; ++f) {
                    const double gy = od->g[n * F + f];
                    if (vd->requires_grad)
                      vd->g[(n * M + m) * F + f] += gy * wd->v[n * M + m];
                    gw += gy * vd->v[(n * M + m) * F + f];
                  }
                  if (wd->requires_grad) wd->g[n * M + m] += gw;
                }
            });
  return out;
}

// Tri-plane lift: out[x,y,z,f] = xy[x,y,f] + xz[x,z,f] + yz[y,z,f].
inline Tensor triplane_expand(const Tensor& xy, const Tensor& xz, const Tensor& yz) {
  if (xy.ndim() != 3 || xz.ndim() != 3 || yz.ndim() != 3)
    throw std::invalid_argument("triplane_expand: planes must be rank 3");
  const size_t X = xy.dim(0), Y = xy.dim(1), F = xy.dim(2);
  const size_t Z = xz.dim(1);
  if (xz.dim(0) != X || yz.dim(0) != Y || yz.dim(1) != Z || xz.dim(2) != F ||
      yz.dim(2) != F)
    throw std::invalid_argument("triplane_expand: inconsistent plane dims " +
                                detail::shape_str(xy.shape()) + " " +
                                detail::shape_str(xz.shape()) + " " +
                                detail::shape_str(yz.shape()));
  Tensor out({X, Y, Z, F});
  for (size_t x = 0; x < X; ++x)
    for (size_t y = 0; y < Y; ++y)
      for (size_t z = 0; z < Z; ++z)
        for (size_t f = 0; f < F; ++f)
          out.at((((x * Y) + y) * Z + z) * F + f) =
              xy.at((x * Y + y) * F + f) + xz.at((x * Z + z) * F + f) +
              yz.at((y * Z + z) * F + f);
  auto ad = xy.data(), bd = xz.data(), cd = yz.data(), od = out.data();
  record_op(xy.requires_grad() || xz.requires_grad() || yz.requires_grad(), out,
            [ad, bd, cd, od, X, Y, Z, F] {
              if (od->g.empty()) return;
              if (ad->requires_grad) ad->ensure_grad();
              if (bd->requires_grad) bd->ensure_grad();
              if (cd->requires_grad) cd->ensure_grad();
              for (size_t x = 0; x < X; ++x)
                for (size_t y = 0; y < Y; ++y)
                  for (size_t z = 0; z < Z; ++z)
                    for (size_t f = 0; f < F; ++f) {
                      const double gy = od->g[(((x * Y) + y) * Z + z) * F + f];
                      if (gy == 0.0) continue;
                      if (ad->requires_grad) ad->g[(x * Y + y) * F + f] += gy;
                      if (bd->requires_grad) bd->g[(x * Z + z) * F + f] += gy;
                      if (cd->requires_grad) cd->g[(y * Z + z) * F + f] += gy;
                    }
            });
  return out;
}

}  // namespace cohff
