#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/grid.hpp"
#include "cohff/ops.hpp"
#include "cohff/optim.hpp"
#include "cohff/planes.hpp"
#include "cohff/pose.hpp"
#include "cohff/tensor.hpp"

namespace cohff {

// Learnable per-cell keep-priority logits for the two shared planes. Only xz
// and yz ever cross the wire; the xy plane stays local to its agent.
struct PlaneMask {
  Tensor xz, yz;  // [X,Z], [Y,Z]

  static PlaneMask create(ParamStore& ps, const std::string& prefix,
                          const GridSpec& grid) {
    grid.validate();
    PlaneMask m;
    const auto dxz = plane_dims(PlaneAxis::XZ, grid);
    const auto dyz = plane_dims(PlaneAxis::YZ, grid);
    m.xz = make_zeros(ps, prefix + ".xz", {dxz[0], dxz[1]});
    m.yz = make_zeros(ps, prefix + ".yz", {dyz[0], dyz[1]});
    return m;
  }
};

// Wire view of one sparsified plane: dims, kept cell indices (row-major,
// strictly increasing) and their feature vectors narrowed to f32.
struct SparsePlanePayload {
  PlaneAxis axis = PlaneAxis::XZ;
  uint16_t rows = 0, cols = 0, feat = 0;
  std::vector<uint32_t> indices;
  std::vector<float> values;  // indices.size() * feat
};

// Sparsified plane with the differentiable in-process view alongside the wire
// payload. `dense` is gate-scaled and zeroed outside the kept set; `ranked`
// lists every cell by descending keep priority for later budget cuts.
struct SparsifiedPlane {
  SparsePlanePayload payload;
  Tensor dense;  // [H,W,F]
  std::vector<uint32_t> ranked;
};

// cells kept at a sparsification rate: ceil((1-r)*HW), with a tiny bias so
// exactly-integer products are not pushed up by representation error
inline size_t kept_cells(size_t hw, double rate) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("kept_cells: rate must be in [0,1)");
  return static_cast<size_t>(
      std::ceil((1.0 - rate) * static_cast<double>(hw) - 1e-9));
}

// Gate the plane by sigmoid(mask), rank cells by gate (ties to the lower
// index), keep the top ceil((1-r)HW) and zero the rest. The gate
// multiplication is differentiable; the keep set acts as a constant filter.
inline SparsifiedPlane apply_mask_and_sparsify(const Tensor& plane, PlaneAxis axis,
                                               const Tensor& mask, double rate) {
  if (plane.ndim() != 3 || mask.ndim() != 2 || plane.dim(0) != mask.dim(0) ||
      plane.dim(1) != mask.dim(1))
    throw std::invalid_argument("apply_mask_and_sparsify: shape mismatch");
  const size_t H = plane.dim(0), W = plane.dim(1), F = plane.dim(2);
  if (H * W > 0xFFFFFFFFull || H > 0xFFFF || W > 0xFFFF || F > 0xFFFF)
    throw std::invalid_argument("apply_mask_and_sparsify: dims exceed wire limits");

  const Tensor gate = sigmoid(mask);
  const Tensor gated = scale_cells(plane, gate);

  SparsifiedPlane out;
  out.ranked.resize(H * W);
  std::iota(out.ranked.begin(), out.ranked.end(), 0u);
  std::stable_sort(out.ranked.begin(), out.ranked.end(),
                   [&](uint32_t a, uint32_t b) { return gate.at(a) > gate.at(b); });

  const size_t keep_n = kept_cells(H * W, rate);
  std::vector<uint32_t> kept(out.ranked.begin(), out.ranked.begin() + keep_n);
  std::sort(kept.begin(), kept.end());

  Tensor keep01({H, W});
  for (uint32_t c : kept) keep01.at(c) = 1.0;
  out.dense = scale_cells(gated, keep01);

  out.payload.axis = axis;
  out.payload.rows = static_cast<uint16_t>(H);
  out.payload.cols = static_cast<uint16_t>(W);
  out.payload.feat = static_cast<uint16_t>(F);
  out.payload.indices = std::move(kept);
  out.payload.values.reserve(keep_n * F);
  for (uint32_t c : out.payload.indices)
    for (size_t f = 0; f < F; ++f)
      out.payload.values.push_back(static_cast<float>(gated.at(c * F + f)));
  return out;
}

// Receiver-side inverse: zero-filled plane with the kept vectors scattered
// back. Throws on structurally corrupt payloads.
inline Tensor densify(const SparsePlanePayload& p) {
  const size_t hw = static_cast<size_t>(p.rows) * p.cols;
  if (p.values.size() != p.indices.size() * p.feat)
    throw std::invalid_argument("densify: value count mismatch");
  uint32_t prev = 0;
  for (size_t i = 0; i < p.indices.size(); ++i) {
    if (p.indices[i] >= hw || (i > 0 && p.indices[i] <= prev))
      throw std::invalid_argument("densify: corrupt indices");
    prev = p.indices[i];
  }
  Tensor out({static_cast<size_t>(p.rows), static_cast<size_t>(p.cols),
              static_cast<size_t>(p.feat)});
  for (size_t i = 0; i < p.indices.size(); ++i)
    for (size_t f = 0; f < p.feat; ++f)
      out.at(p.indices[i] * p.feat + f) = p.values[i * p.feat + f];
  return out;
}

// --- Message and volume accounting -------------------------------------------

inline constexpr uint16_t kWireVersion = 1;
inline constexpr uint64_t kMessageHeaderBytes = 4 + 2 + 4 + 16 + 1;
inline constexpr uint64_t kPlaneHeaderBytes = 1 + 2 + 2 + 2 + 4;

struct V2XMessage {
  uint32_t sender = 0;
  Pose pose;  // sender pose, world frame
  SparsePlanePayload xz, yz;
};

inline V2XMessage make_message(uint32_t sender, const Pose& pose,
                               const SparsifiedPlane& xz, const SparsifiedPlane& yz) {
  if (xz.payload.axis != PlaneAxis::XZ || yz.payload.axis != PlaneAxis::YZ)
    throw std::invalid_argument("make_message: planes must be xz and yz");
  V2XMessage m;
  m.sender = sender;
  m.pose = pose;
  m.xz = xz.payload;
  m.yz = yz.payload;
  return m;
}

// payload feature bytes only; the paper's volume figures scale linearly with
// the kept-cell count, which excludes index and header overhead
inline uint64_t payload_bytes(const SparsePlanePayload& p) {
  return static_cast<uint64_t>(p.indices.size()) * p.feat * 4;
}

inline uint64_t communication_volume(const std::vector<SparsePlanePayload>& ps) {
  uint64_t sum = 0;
  for (const auto& p : ps) sum += payload_bytes(p);
  return sum;
}

inline uint64_t message_cv(const V2XMessage& m) {
  return payload_bytes(m.xz) + payload_bytes(m.yz);
}

// index and header bytes, reported separately from CV
inline uint64_t message_overhead(const V2XMessage& m) {
  return kMessageHeaderBytes + 2 * kPlaneHeaderBytes +
         4 * (static_cast<uint64_t>(m.xz.indices.size()) + m.yz.indices.size());
}

inline double bytes_to_mb(uint64_t bytes) {
  return static_cast<double>(bytes) / (1024.0 * 1024.0);
}

// --- Budget enforcement -------------------------------------------------------

struct CommBudget {
  uint64_t bytes = 0;
};

// One sender's contribution to a receiver, still in cuttable form.
struct AgentShare {
  uint32_t sender = 0;
  Pose pose;
  SparsifiedPlane xz, yz;
};

namespace detail {

inline void cut_plane(SparsifiedPlane& sp, size_t keep_n) {
  if (keep_n >= sp.payload.indices.size()) return;
  std::vector<uint32_t> kept(sp.ranked.begin(), sp.ranked.begin() + keep_n);
  std::sort(kept.begin(), kept.end());
  const size_t H = sp.dense.dim(0), W = sp.dense.dim(1), F = sp.dense.dim(2);
  Tensor keep01({H, W});
  for (uint32_t c : kept) keep01.at(c) = 1.0;
  sp.dense = scale_cells(sp.dense, keep01);
  sp.payload.values.clear();
  sp.payload.values.reserve(kept.size() * F);
  for (uint32_t c : kept)
    for (size_t f = 0; f < F; ++f)
      sp.payload.values.push_back(static_cast<float>(sp.dense.at(c * F + f)));
  sp.payload.indices = std::move(kept);
}

}  // namespace detail

// Enforces sum(CV) <= budget over every share bound for one receiver. If the
// current volume fits, shares are untouched and 0 is returned. Otherwise the
// smallest uniform rate on a 1e-3 grid that fits is applied (planes already
// sparser than the uniform rate are never densified) and that rate returned.
// If even the sparsest grid point does not fit, all payloads empty out.
inline double enforce_budget(std::vector<AgentShare>& shares, CommBudget budget) {
  auto plane_list = [&]() {
    std::vector<SparsifiedPlane*> ps;
    for (auto& s : shares) {
      ps.push_back(&s.xz);
      ps.push_back(&s.yz);
    }
    return ps;
  };
  const auto planes = plane_list();
  uint64_t current = 0;
  for (const auto* p : planes) current += payload_bytes(p->payload);
  if (current <= budget.bytes) return 0.0;

  for (int k = 1; k < 1000; ++k) {
    const double r = k / 1000.0;
    uint64_t predicted = 0;
    for (const auto* p : planes) {
      const size_t hw = static_cast<size_t>(p->payload.rows) * p->payload.cols;
      const size_t keep = std::min(p->payload.indices.size(), kept_cells(hw, r));
      predicted += static_cast<uint64_t>(keep) * p->payload.feat * 4;
    }
    if (predicted <= budget.bytes) {
      for (auto* p : planes) {
        const size_t hw = static_cast<size_t>(p->payload.rows) * p->payload.cols;
        detail::cut_plane(*p, kept_cells(hw, r));
      }
      return r;
    }
  }
  for (auto* p : planes) detail::cut_plane(*p, 0);
  return 1.0;
}

// --- Pose-aware conditioning ---------------------------------------------------

inline constexpr size_t kPoseHidden = 16;

// Small MLP from the relative pose to a per-channel gate in (0,1). Everything
// after the first layer starts at zero, so the initial gate is exactly 0.5.
struct PoseConditioner {
  Tensor w1, b1, w2, b2;

  static PoseConditioner create(ParamStore& ps, const std::string& prefix,
                                size_t feat, Rng& rng) {
    PoseConditioner c;
    c.w1 = make_linear_weight(ps, prefix + ".w1", 4, kPoseHidden, rng);
    c.b1 = make_zeros(ps, prefix + ".b1", {kPoseHidden});
    c.w2 = make_zeros(ps, prefix + ".w2", {kPoseHidden, feat});
    c.b2 = make_zeros(ps, prefix + ".b2", {feat});
    return c;
  }

  Tensor gate(const Pose& rel) const {
    Tensor in({1, 4});
    in.at(0) = rel.x;
    in.at(1) = rel.y;
    in.at(2) = rel.z;
    in.at(3) = rel.yaw;
    const Tensor h = relu(linear(in, w1, b1));
    return reshape(sigmoid(linear(h, w2, b2)), {w2.dim(1)});
  }
};

// channel-wise gating of a sender's shared planes by its relative pose
inline std::pair<Tensor, Tensor> pose_aware_condition(const Tensor& xz,
                                                      const Tensor& yz,
                                                      const PoseConditioner& mlp,
                                                      const Pose& rel) {
  const Tensor g = mlp.gate(rel);
  return {scale_channels(xz, g), scale_channels(yz, g)};
}

// Reference-point translation for plane attention: a sender plane's row axis
// is displaced from ego rows by the relative offset in cells. Content of
// sender cell i sits at ego coordinate i + rel/voxel, so the plane's
// cell-vs-ego shift is the negative of that. The z (column) axis and yaw are
// not geometrically compensated; conditioning and learned offsets absorb them.
struct ReferenceShift {
  double xz_row = 0.0, yz_row = 0.0;
};

inline ReferenceShift plane_reference_shift(const Pose& rel, double voxel) {
  if (voxel <= 0.0) throw std::invalid_argument("plane_reference_shift: bad voxel");
  return {-rel.x / voxel, -rel.y / voxel};
}

}  // namespace cohff
