#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/ops.hpp"
#include "cohff/optim.hpp"
#include "cohff/tensor.hpp"

namespace cohff {

struct DeformAttnConfig {
  int heads = 2;
  int points = 4;       // K offset samples per reference
  int pillar_refs = 4;  // 3D reference points per plane query (cross-attention)

  void validate(size_t feat) const {
    if (heads < 1 || points < 1 || pillar_refs < 1)
      throw std::invalid_argument("DeformAttnConfig: counts must be >= 1");
    if (feat % static_cast<size_t>(heads) != 0)
      throw std::invalid_argument("DeformAttnConfig: F must be divisible by heads");
  }
};

// One sampling target for a batch of N queries: a feature map plus per-query
// base coordinates (row, col in cell units) and validity. param_slot selects
// which parameter slice drives this target's offsets and weights, so several
// targets (e.g. the same pillar point seen by different cameras) can share
// parameters and keep the attention permutation-consistent over targets.
struct AttnTarget {
  Tensor map;                  // [H,W,Fv]
  std::vector<double> u, v;    // [N]
  std::vector<uint8_t> valid;  // [N]
  size_t param_slot = 0;
};

// Parameters of one deformable attention block. Offsets and the output
// projection start at zero: sampling begins exactly at the reference points
// and the block is an identity residual until w_out moves.
struct DeformAttnParams {
  size_t slots = 0;  // S parameter slices
  int heads = 0, points = 0;
  Tensor w_off, b_off;  // [Fq, S*H*K*2], [S*H*K*2]
  Tensor w_wt, b_wt;    // [Fq, S*H*K],  [S*H*K]
  Tensor w_out;         // [Fv, Fq]

  static DeformAttnParams create(ParamStore& ps, const std::string& prefix,
                                 size_t fq, size_t fv, size_t slots, int heads,
                                 int points, Rng& rng) {
    if (slots < 1 || heads < 1 || points < 1)
      throw std::invalid_argument("DeformAttnParams: counts must be >= 1");
    if (fv % static_cast<size_t>(heads) != 0)
      throw std::invalid_argument("DeformAttnParams: Fv must be divisible by heads");
    DeformAttnParams p;
    p.slots = slots;
    p.heads = heads;
    p.points = points;
    const size_t shk = slots * static_cast<size_t>(heads) * points;
    p.w_off = make_zeros(ps, prefix + ".w_off", {fq, shk * 2});
    p.b_off = make_zeros(ps, prefix + ".b_off", {shk * 2});
    p.w_wt = make_linear_weight(ps, prefix + ".w_wt", fq, shk, rng);
    p.b_wt = make_zeros(ps, prefix + ".b_wt", {shk});
    p.w_out = make_zeros(ps, prefix + ".w_out", {fv, fq});
    return p;
  }
};

// Deformable attention over a set of targets. For each query: one reference
// per target, K learned offset samples per reference per head; per-head
// softmax across all (target, point) slots restricted to valid targets;
// output = linear projection of the attention-pooled bilinear samples.
// Returns the residual delta [N,Fq]; rows with no valid target are zero.
inline Tensor deform_attend(const Tensor& queries,
                            const std::vector<AttnTarget>& targets,
                            const DeformAttnParams& p) {
  if (queries.ndim() != 2)
    throw std::invalid_argument("deform_attend: queries must be [N,Fq]");
  const size_t N = queries.dim(0), Fq = queries.dim(1);
  if (p.w_off.dim(0) != Fq)
    throw std::invalid_argument("deform_attend: query width mismatch");
  const size_t H = static_cast<size_t>(p.heads), K = static_cast<size_t>(p.points);
  const size_t S = p.slots, T = targets.size();
  const size_t Fv = p.w_out.dim(0);
  if (T == 0) return Tensor({N, Fq});
  for (const AttnTarget& t : targets) {
    if (t.map.ndim() != 3 || t.map.dim(2) != Fv)
      throw std::invalid_argument("deform_attend: target map must be [H,W,Fv]");
    if (t.u.size() != N || t.v.size() != N || t.valid.size() != N)
      throw std::invalid_argument("deform_attend: per-query coord size mismatch");
    if (t.param_slot >= S)
      throw std::invalid_argument("deform_attend: param_slot out of range");
  }

  const Tensor offsets = linear(queries, p.w_off, p.b_off);  // [N, S*H*K*2]
  const Tensor logits = linear(queries, p.w_wt, p.b_wt);     // [N, S*H*K]

  // expand parameter slices to targets in (h,t,k) order and mask invalid ones
  std::vector<size_t> expand(H * T * K);
  std::vector<uint8_t> mask(N * H * T * K);
  for (size_t h = 0; h < H; ++h)
    for (size_t t = 0; t < T; ++t)
      for (size_t k = 0; k < K; ++k)
        expand[(h * T + t) * K + k] = (targets[t].param_slot * H + h) * K + k;
  for (size_t n = 0; n < N; ++n)
    for (size_t h = 0; h < H; ++h)
      for (size_t t = 0; t < T; ++t)
        for (size_t k = 0; k < K; ++k)
          mask[((n * H + h) * T + t) * K + k] = targets[t].valid[n];

  Tensor attn = gather_last(logits, expand);                // [N, H*T*K]
  attn = reshape(attn, {N * H, T * K});
  attn = masked_softmax(attn, mask, 1);
  attn = reshape(attn, {N, H * T * K});
  // reorder softmaxed weights from (h,t,k) to the value order (t,h,k)
  std::vector<size_t> to_value(T * H * K);
  for (size_t t = 0; t < T; ++t)
    for (size_t h = 0; h < H; ++h)
      for (size_t k = 0; k < K; ++k)
        to_value[(t * H + h) * K + k] = (h * T + t) * K + k;
  attn = gather_last(attn, to_value);  // [N, T*H*K]

  std::vector<Tensor> samples;
  samples.reserve(T);
  for (size_t t = 0; t < T; ++t) {
    std::vector<size_t> oidx(H * K * 2);
    for (size_t h = 0; h < H; ++h)
      for (size_t k = 0; k < K; ++k)
        for (size_t c = 0; c < 2; ++c)
          oidx[(h * K + k) * 2 + c] = ((targets[t].param_slot * H + h) * K + k) * 2 + c;
    Tensor off_t = gather_last(offsets, oidx);        // [N, H*K*2]
    off_t = reshape(off_t, {N * H * K, 2});
    Tensor base({N * H * K, 2});
    for (size_t n = 0; n < N; ++n) {
      const double bu = targets[t].valid[n] ? targets[t].u[n] : 0.0;
      const double bv = targets[t].valid[n] ? targets[t].v[n] : 0.0;
      for (size_t hk = 0; hk < H * K; ++hk) {
        base.at((n * H * K + hk) * 2) = bu;
        base.at((n * H * K + hk) * 2 + 1) = bv;
      }
    }
    Tensor coords = add(base, off_t);
    Tensor s = bilinear_sample2d(targets[t].map, coords);  // [N*H*K, Fv]
    samples.push_back(reshape(s, {N, H * K, Fv}));
  }
  Tensor values = T == 1 ? samples[0] : concat(samples, 1);  // [N, T*H*K, Fv]

  std::vector<int> head_of(T * H * K);
  for (size_t m = 0; m < head_of.size(); ++m)
    head_of[m] = static_cast<int>((m / K) % H);
  Tensor attended = slot_attend(values, attn, head_of, p.heads);  // [N, Fv]
  Tensor delta = linear(attended, p.w_out);                       // [N, Fq]

  std::vector<double> any(N, 0.0);
  for (size_t n = 0; n < N; ++n)
    for (const AttnTarget& t : targets)
      if (t.valid[n]) {
        any[n] = 1.0;
        break;
      }
  return row_scale(delta, any);
}

// --- Plane self-attention over the five plane roles -------------------------

// Fixed parameter slots: the three ego planes plus the (per-axis aggregated)
// remote planes. Absent roles are masked out, so the same parameters serve
// both the intra-agent update (roles 0..2) and the fused update (all five).
enum class PlaneRole : size_t {
  EgoXY = 0,
  EgoXZ = 1,
  EgoYZ = 2,
  RemoteXZ = 3,
  RemoteYZ = 4,
};
inline constexpr size_t kPsaSlots = 5;

// Row/col axis names per role; axes are 0=x, 1=y, 2=z.
inline std::array<int, 2> plane_axes(PlaneRole role) {
  switch (role) {
    case PlaneRole::EgoXY: return {0, 1};
    case PlaneRole::EgoXZ:
    case PlaneRole::RemoteXZ: return {0, 2};
    default: return {1, 2};
  }
}

struct PsaPlane {
  Tensor data;  // [H,W,F]
  // offset of this plane's cell coordinates relative to ego coordinates along
  // (row, col); nonzero only for remote planes (pose-aware reference shift)
  double row_shift = 0.0, col_shift = 0.0;
};

struct PsaPlaneSet {
  std::array<std::optional<PsaPlane>, kPsaSlots> slot;

  PsaPlane& at(PlaneRole r) { return *slot[static_cast<size_t>(r)]; }
  const PsaPlane& at(PlaneRole r) const { return *slot[static_cast<size_t>(r)]; }
  bool has(PlaneRole r) const { return slot[static_cast<size_t>(r)].has_value(); }
  void set(PlaneRole r, PsaPlane p) { slot[static_cast<size_t>(r)] = std::move(p); }
};

namespace detail {

inline void validate_plane_set(const PsaPlaneSet& set) {
  std::array<size_t, 3> axis_dim{0, 0, 0};
  size_t feat = 0;
  bool any = false;
  for (size_t s = 0; s < kPsaSlots; ++s) {
    if (!set.slot[s]) continue;
    any = true;
    const PsaPlane& p = *set.slot[s];
    if (p.data.ndim() != 3)
      throw std::invalid_argument("plane_self_attention: planes must be [H,W,F]");
    if (feat == 0) feat = p.data.dim(2);
    if (p.data.dim(2) != feat)
      throw std::invalid_argument("plane_self_attention: feature width mismatch");
    const auto axes = plane_axes(static_cast<PlaneRole>(s));
    for (int d = 0; d < 2; ++d) {
      const size_t have = p.data.dim(d);
      size_t& want = axis_dim[axes[d]];
      if (want == 0) want = have;
      if (want != have)
        throw std::invalid_argument("plane_self_attention: axis dim mismatch");
    }
  }
  if (!any) throw std::invalid_argument("plane_self_attention: empty plane set");
}

}  // namespace detail

// One Jacobi round of deformable self-attention across all present planes:
// every cell of every plane queries all planes, with references built by
// copying the shared axis coordinate (missing axis -> target midpoint) and
// applying the remote reference shifts; every plane is updated residually
// from the pre-update values.
inline PsaPlaneSet plane_self_attention(const PsaPlaneSet& set,
                                        const DeformAttnParams& params) {
  detail::validate_plane_set(set);
  if (params.slots != kPsaSlots)
    throw std::invalid_argument("plane_self_attention: params must have 5 slots");
  PsaPlaneSet out;
  for (size_t qs = 0; qs < kPsaSlots; ++qs) {
    if (!set.slot[qs]) continue;
    const PsaPlane& qp = *set.slot[qs];
    const size_t Hq = qp.data.dim(0), Wq = qp.data.dim(1), F = qp.data.dim(2);
    const size_t N = Hq * Wq;
    const auto q_axes = plane_axes(static_cast<PlaneRole>(qs));
    Tensor queries = reshape(qp.data, {N, F});

    std::vector<AttnTarget> targets;
    targets.reserve(kPsaSlots);
    for (size_t ts = 0; ts < kPsaSlots; ++ts) {
      AttnTarget t;
      t.param_slot = ts;
      t.u.assign(N, 0.0);
      t.v.assign(N, 0.0);
      if (!set.slot[ts]) {
        t.map = Tensor({1, 1, F});
        t.valid.assign(N, 0);
        targets.push_back(std::move(t));
        continue;
      }
      const PsaPlane& tp = *set.slot[ts];
      t.map = tp.data;
      t.valid.assign(N, 1);
      const auto t_axes = plane_axes(static_cast<PlaneRole>(ts));
      const double mid_u = (tp.data.dim(0) - 1) / 2.0;
      const double mid_v = (tp.data.dim(1) - 1) / 2.0;
      for (size_t i = 0; i < Hq; ++i) {
        for (size_t j = 0; j < Wq; ++j) {
          const size_t n = i * Wq + j;
          // ego-frame coordinates along the query plane's two axes
          const double ego_row = static_cast<double>(i) - qp.row_shift;
          const double ego_col = static_cast<double>(j) - qp.col_shift;
          double u = mid_u, v = mid_v;
          if (t_axes[0] == q_axes[0]) u = ego_row + tp.row_shift;
          else if (t_axes[0] == q_axes[1]) u = ego_col + tp.row_shift;
          if (t_axes[1] == q_axes[0]) v = ego_row + tp.col_shift;
          else if (t_axes[1] == q_axes[1]) v = ego_col + tp.col_shift;
          t.u[n] = u;
          t.v[n] = v;
        }
      }
      targets.push_back(std::move(t));
    }

    Tensor delta = deform_attend(queries, targets, params);
    PsaPlane up;
    up.row_shift = qp.row_shift;
    up.col_shift = qp.col_shift;
    up.data = reshape(add(queries, delta), {Hq, Wq, F});
    out.slot[qs] = std::move(up);
  }
  return out;
}

// The intra-agent update is the same operation restricted to the three ego
// planes; remote roles are simply absent.
inline PsaPlaneSet intra_agent_plane_self_attention(const Tensor& xy, const Tensor& xz,
                                                    const Tensor& yz,
                                                    const DeformAttnParams& params) {
  PsaPlaneSet set;
  set.set(PlaneRole::EgoXY, {xy, 0.0, 0.0});
  set.set(PlaneRole::EgoXZ, {xz, 0.0, 0.0});
  set.set(PlaneRole::EgoYZ, {yz, 0.0, 0.0});
  return plane_self_attention(set, params);
}

}  // namespace cohff
