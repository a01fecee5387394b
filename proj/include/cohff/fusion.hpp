#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/deform_attn.hpp"
#include "cohff/grid.hpp"
#include "cohff/occupancy_net.hpp"
#include "cohff/ops.hpp"
#include "cohff/optim.hpp"
#include "cohff/planes.hpp"
#include "cohff/pose.hpp"
#include "cohff/raycast.hpp"
#include "cohff/scene.hpp"
#include "cohff/segmentation_net.hpp"
#include "cohff/tensor.hpp"
#include "cohff/v2x.hpp"

namespace cohff {

// --- Plane set across agents ----------------------------------------------

// Vertical planes shared by one neighbour, pose-conditioned; the reference
// shifts relocate its cell coordinates into the ego frame during attention.
struct SenderPlanes {
  uint32_t sender = 0;
  PsaPlane xz, yz;
};

// The ego tri-plane plus the shared planes of every heard neighbour.
struct PlaneSet {
  PsaPlane xy, xz, yz;
  std::vector<SenderPlanes> remote;
};

namespace detail {

struct RolePlane {
  const PsaPlane* plane;
  PlaneRole role;
};

inline std::vector<RolePlane> role_planes(const PlaneSet& set) {
  std::vector<RolePlane> out;
  out.reserve(3 + 2 * set.remote.size());
  out.push_back({&set.xy, PlaneRole::EgoXY});
  out.push_back({&set.xz, PlaneRole::EgoXZ});
  out.push_back({&set.yz, PlaneRole::EgoYZ});
  for (const SenderPlanes& s : set.remote) {
    out.push_back({&s.xz, PlaneRole::RemoteXZ});
    out.push_back({&s.yz, PlaneRole::RemoteYZ});
  }
  return out;
}

inline void validate_plane_set(const std::vector<RolePlane>& entries) {
  std::array<size_t, 3> axis_dim{0, 0, 0};
  size_t feat = 0;
  for (const RolePlane& e : entries) {
    const Tensor& d = e.plane->data;
    if (d.ndim() != 3)
      throw std::invalid_argument("PlaneSet: planes must be [H,W,F]");
    if (feat == 0) feat = d.dim(2);
    if (d.dim(2) != feat)
      throw std::invalid_argument("PlaneSet: feature width mismatch");
    const auto axes = plane_axes(e.role);
    for (int k = 0; k < 2; ++k) {
      size_t& want = axis_dim[axes[k]];
      if (want == 0) want = d.dim(k);
      if (want != d.dim(k))
        throw std::invalid_argument("PlaneSet: axis dim mismatch");
    }
  }
}

}  // namespace detail

// One Jacobi round over the whole set: every cell of every plane (the three
// ego planes and each sender's two) queries all planes. Senders share the two
// remote parameter slots, so the update cannot prefer any sender ordering.
inline PlaneSet plane_self_attention(const PlaneSet& set,
                                     const DeformAttnParams& params) {
  const auto entries = detail::role_planes(set);
  detail::validate_plane_set(entries);
  if (params.slots != kPsaSlots)
    throw std::invalid_argument("plane_self_attention: params must have 5 slots");

  auto update = [&](const PsaPlane& qp, PlaneRole q_role) {
    const size_t Hq = qp.data.dim(0), Wq = qp.data.dim(1), F = qp.data.dim(2);
    const size_t N = Hq * Wq;
    const auto q_axes = plane_axes(q_role);
    Tensor queries = reshape(qp.data, {N, F});

    std::vector<AttnTarget> targets;
    targets.reserve(entries.size());
    for (const detail::RolePlane& e : entries) {
      const PsaPlane& tp = *e.plane;
      AttnTarget t;
      t.param_slot = static_cast<size_t>(e.role);
      t.map = tp.data;
      t.u.assign(N, 0.0);
      t.v.assign(N, 0.0);
      t.valid.assign(N, 1);
      const auto t_axes = plane_axes(e.role);
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
    return up;
  };

  PlaneSet out;
  out.xy = update(set.xy, PlaneRole::EgoXY);
  out.xz = update(set.xz, PlaneRole::EgoXZ);
  out.yz = update(set.yz, PlaneRole::EgoYZ);
  out.remote.reserve(set.remote.size());
  for (const SenderPlanes& s : set.remote)
    out.remote.push_back({s.sender, update(s.xz, PlaneRole::RemoteXZ),
                          update(s.yz, PlaneRole::RemoteYZ)});
  return out;
}

// --- Volume reconstruction -------------------------------------------------

struct SegVolume {
  Tensor data;  // [X,Y,Z,F]
};

// Per-voxel sum of the projected plane features: the ego BEV plane plus the
// vertical planes, with multi-sender contributions entering as per-axis means
// so magnitude does not grow with the neighbour count. include_ego_verticals
// keeps the ego xz/yz planes in the sum (default); off leaves only the shared
// verticals, which drops all single-vehicle side information.
inline SegVolume reconstruct_seg_volume(const PlaneSet& set, const GridSpec& spec,
                                        bool include_ego_verticals = true) {
  spec.validate();
  detail::validate_plane_set(detail::role_planes(set));
  const size_t X = spec.dims[0], Y = spec.dims[1], Z = spec.dims[2];
  if (set.xy.data.dim(0) != X || set.xy.data.dim(1) != Y || set.xz.data.dim(1) != Z)
    throw std::invalid_argument("reconstruct_seg_volume: planes do not match grid");
  const size_t F = set.xy.data.dim(2);

  std::optional<Tensor> mxz, myz;
  if (!set.remote.empty()) {
    Tensor axz = set.remote[0].xz.data, ayz = set.remote[0].yz.data;
    for (size_t s = 1; s < set.remote.size(); ++s) {
      axz = add(axz, set.remote[s].xz.data);
      ayz = add(ayz, set.remote[s].yz.data);
    }
    const double inv = 1.0 / static_cast<double>(set.remote.size());
    mxz = scale(axz, inv);
    myz = scale(ayz, inv);
  }

  Tensor xz_term, yz_term;
  if (include_ego_verticals) {
    xz_term = mxz ? add(set.xz.data, *mxz) : set.xz.data;
    yz_term = myz ? add(set.yz.data, *myz) : set.yz.data;
  } else {
    xz_term = mxz ? *mxz : Tensor({X, Z, F});
    yz_term = myz ? *myz : Tensor({Y, Z, F});
  }
  return {triplane_expand(set.xy.data, xz_term, yz_term)};
}

// --- Task feature fusion -----------------------------------------------------

// Mixes the concatenated occupancy + segmentation channels with a
// pointwise/depthwise conv stack, then classifies each voxel. The classifier
// starts at zero, so initial logits are uniform.
struct TaskFusionHead {
  OccupancyEncoder trunk;
  Tensor cls_w, cls_b;  // [C, kNumClasses], [kNumClasses]

  static TaskFusionHead create(ParamStore& ps, const std::string& prefix,
                               size_t in_ch, int blocks, int kernel, Rng& rng) {
    TaskFusionHead h;
    h.trunk = OccupancyEncoder::create(ps, prefix + ".trunk", in_ch, in_ch,
                                       blocks, kernel, rng);
    h.cls_w = make_zeros(ps, prefix + ".cls_w",
                         {in_ch, static_cast<size_t>(kNumClasses)});
    h.cls_b = make_zeros(ps, prefix + ".cls_b", {static_cast<size_t>(kNumClasses)});
    return h;
  }
};

struct SemanticOccupancyPrediction {
  Tensor logits;             // [X,Y,Z,kNumClasses]
  SemanticVoxelGrid labels;  // per-voxel argmax, ties to the lower class id
};

inline SemanticOccupancyPrediction make_prediction(const Tensor& logits,
                                                   const GridSpec& spec) {
  const size_t C = kNumClasses;
  if (logits.ndim() != 4 || logits.dim(0) != static_cast<size_t>(spec.dims[0]) ||
      logits.dim(1) != static_cast<size_t>(spec.dims[1]) ||
      logits.dim(2) != static_cast<size_t>(spec.dims[2]) || logits.dim(3) != C)
    throw std::invalid_argument("make_prediction: logits do not match grid");
  SemanticVoxelGrid labels(spec);
  const size_t n = logits.numel() / C;
  for (size_t i = 0; i < n; ++i) {
    double best = logits.at(i * C);
    uint8_t cls = 0;
    for (size_t c = 1; c < C; ++c) {
      const double v = logits.at(i * C + c);
      if (v > best) {
        best = v;
        cls = static_cast<uint8_t>(c);
      }
    }
    labels.labels[i] = cls;
  }
  return {logits, std::move(labels)};
}

inline SemanticOccupancyPrediction task_feature_fusion(const Tensor& occ_feat,
                                                       const SegVolume& seg,
                                                       const TaskFusionHead& head,
                                                       const GridSpec& spec) {
  if (occ_feat.ndim() != 4 || seg.data.ndim() != 4)
    throw std::invalid_argument("task_feature_fusion: volumes must be [X,Y,Z,F]");
  for (int d = 0; d < 3; ++d)
    if (occ_feat.dim(d) != static_cast<size_t>(spec.dims[d]) ||
        seg.data.dim(d) != static_cast<size_t>(spec.dims[d]))
      throw std::invalid_argument("task_feature_fusion: grid mismatch");
  if (occ_feat.dim(3) + seg.data.dim(3) != head.trunk.pw_w[0].dim(0))
    throw std::invalid_argument("task_feature_fusion: channel width mismatch");
  const Tensor cat = concat({occ_feat, seg.data}, 3);
  const Tensor logits = linear(head.trunk.forward(cat), head.cls_w, head.cls_b);
  return make_prediction(logits, spec);
}

// --- Full model --------------------------------------------------------------

struct CohffConfig {
  SegmentationNetConfig seg;
  OccupancyNetConfig occ;
  int fusion_blocks = 2;            // conv blocks in the fused head
  int fusion_kernel = 3;
  double keep_rate = 0.0;           // shared-plane sparsification rate in [0,1)
  int plane_rounds = 1;             // fused plane-attention rounds
  bool include_ego_verticals = true;
  RaycastConfig raycast;            // sensing lattice for both task networks
  double depth_noise_sigma = 0.0;
  uint64_t depth_noise_seed = 0;

  void validate() const {
    seg.validate();
    raycast.validate();
    if (occ.feat < 1 || occ.blocks < 1)
      throw std::invalid_argument("CohffConfig: bad occupancy net shape");
    if (fusion_blocks < 1 || fusion_kernel < 1 || fusion_kernel % 2 == 0)
      throw std::invalid_argument("CohffConfig: bad fused head shape");
    if (keep_rate < 0.0 || keep_rate >= 1.0)
      throw std::invalid_argument("CohffConfig: keep_rate must be in [0,1)");
    if (plane_rounds < 0)
      throw std::invalid_argument("CohffConfig: plane_rounds must be >= 0");
    if (depth_noise_sigma < 0.0)
      throw std::invalid_argument("CohffConfig: negative depth noise");
  }
};

struct CohffModel {
  CohffConfig cfg;
  GridSpec grid;
  SegmentationNet seg;
  OccupancyNet occ;
  PlaneMask mask;
  PoseConditioner cond;
  DeformAttnParams fuse_attn;
  TaskFusionHead head;

  static CohffModel create(ParamStore& ps, const std::string& prefix,
                           const GridSpec& grid, const CohffConfig& cfg, Rng& rng) {
    cfg.validate();
    grid.validate();
    CohffModel m;
    m.cfg = cfg;
    m.grid = grid;
    m.seg = SegmentationNet::create(ps, prefix + ".seg", grid, cfg.seg, rng);
    m.occ = OccupancyNet::create(ps, prefix + ".occ", cfg.occ, rng);
    m.mask = PlaneMask::create(ps, prefix + ".mask", grid);
    m.cond = PoseConditioner::create(ps, prefix + ".cond", cfg.seg.feat, rng);
    m.fuse_attn =
        DeformAttnParams::create(ps, prefix + ".fuse", cfg.seg.feat, cfg.seg.feat,
                                 kPsaSlots, cfg.seg.attn.heads, cfg.seg.attn.points, rng);
    m.head = TaskFusionHead::create(
        ps, prefix + ".head", static_cast<size_t>(cfg.occ.feat) + cfg.seg.feat,
        cfg.fusion_blocks, cfg.fusion_kernel, rng);
    return m;
  }
};

// --- Agent step --------------------------------------------------------------

// Everything one agent computes before the message exchange: occupancy
// features, the intra-updated tri-plane, and the masked share for broadcast.
struct AgentStep {
  int agent_id = 0;
  Pose pose;
  Tensor occ_features;   // [X,Y,Z,F_occ]
  Tensor pxy, pxz, pyz;  // ego planes [H,W,F]
  SparsifiedPlane sxz, syz;
  V2XMessage msg;
};

inline AgentStep cohff_phase_a(const CohffModel& m, const Scenario& scene,
                               const Agent& me) {
  AgentStep a;
  a.agent_id = me.id;
  a.pose = me.pose;
  const SensorRig rig = SensorRig::camera_quad();
  const SensorScan scan =
      cast_semantic_rays(rig, me.pose, scene, me.body_instance, m.cfg.raycast);
  const std::vector<CameraView> cams =
      m.seg.encode(scan, rig, m.cfg.raycast.angular_res_deg);
  const auto planes = m.seg.planes(cams);
  a.pxy = planes[0].data;
  a.pxz = planes[1].data;
  a.pyz = planes[2].data;

  DepthOracleConfig dcfg;
  dcfg.raycast = m.cfg.raycast;
  dcfg.noise_sigma = m.cfg.depth_noise_sigma;
  dcfg.noise_seed = m.cfg.depth_noise_seed + static_cast<uint64_t>(me.id);
  const std::vector<DepthMap> maps = depth_maps(scene, me, rig, dcfg);
  std::vector<Pose> cam_poses;
  cam_poses.reserve(rig.mounts.size());
  for (const RigMount& mt : rig.mounts) cam_poses.push_back(mt.offset);
  a.occ_features = m.occ.features(embed_depth_to_voxels(maps, cam_poses, m.grid));

  a.sxz = apply_mask_and_sparsify(a.pxz, PlaneAxis::XZ, m.mask.xz, m.cfg.keep_rate);
  a.syz = apply_mask_and_sparsify(a.pyz, PlaneAxis::YZ, m.mask.yz, m.cfg.keep_rate);
  a.msg = make_message(static_cast<uint32_t>(me.id), me.pose, a.sxz, a.syz);
  return a;
}

inline AgentShare to_share(const AgentStep& a) {
  return {static_cast<uint32_t>(a.agent_id), a.pose, a.sxz, a.syz};
}

// A neighbour's shared planes as dense tensors. The in-process path keeps the
// sender's differentiable view; the wire path densifies the decoded payload.
struct InboundPlanes {
  uint32_t sender = 0;
  Pose pose;
  Tensor xz, yz;
};

inline InboundPlanes inbound_from_share(const AgentShare& s) {
  return {s.sender, s.pose, s.xz.dense, s.yz.dense};
}

inline InboundPlanes inbound_from_message(const V2XMessage& msg) {
  return {msg.sender, msg.pose, densify(msg.xz), densify(msg.yz)};
}

struct StepTrace {
  PlaneSet planes;    // plane set after the fused attention rounds
  Tensor seg_volume;  // [X,Y,Z,F]
};

inline SemanticOccupancyPrediction cohff_phase_b(
    const CohffModel& m, const Agent& me, const AgentStep& a,
    const std::vector<InboundPlanes>& inbox, StepTrace* trace = nullptr) {
  PlaneSet set;
  set.xy = {a.pxy, 0.0, 0.0};
  set.xz = {a.pxz, 0.0, 0.0};
  set.yz = {a.pyz, 0.0, 0.0};
  const auto dxz = plane_dims(PlaneAxis::XZ, m.grid);
  const auto dyz = plane_dims(PlaneAxis::YZ, m.grid);
  for (const InboundPlanes& in : inbox) {
    if (in.xz.ndim() != 3 || in.yz.ndim() != 3 || in.xz.dim(0) != dxz[0] ||
        in.xz.dim(1) != dxz[1] || in.yz.dim(0) != dyz[0] ||
        in.yz.dim(1) != dyz[1] || in.xz.dim(2) != m.cfg.seg.feat ||
        in.yz.dim(2) != m.cfg.seg.feat)
      throw std::invalid_argument("cohff_phase_b: inbound plane shape mismatch");
    const Pose rel = relative_pose(in.pose, me.pose);
    auto cond = pose_aware_condition(in.xz, in.yz, m.cond, rel);
    const ReferenceShift sh = plane_reference_shift(rel, m.grid.voxel_size);
    SenderPlanes sp;
    sp.sender = in.sender;
    sp.xz = {std::move(cond.first), sh.xz_row, 0.0};
    sp.yz = {std::move(cond.second), sh.yz_row, 0.0};
    set.remote.push_back(std::move(sp));
  }
  for (int r = 0; r < m.cfg.plane_rounds; ++r)
    set = plane_self_attention(set, m.fuse_attn);
  const SegVolume seg =
      reconstruct_seg_volume(set, m.grid, m.cfg.include_ego_verticals);
  SemanticOccupancyPrediction pred =
      task_feature_fusion(a.occ_features, seg, m.head, m.grid);
  if (trace) {
    trace->planes = set;
    trace->seg_volume = seg.data;
  }
  return pred;
}

// One full agent step: local task networks, message construction, and fusion
// of whatever neighbour messages arrived. An empty inbox degenerates to the
// single-vehicle pipeline.
inline SemanticOccupancyPrediction run_cohff_step(
    const CohffModel& m, const Scenario& scene, const Agent& me,
    const std::vector<V2XMessage>& inbox, StepTrace* trace = nullptr) {
  const AgentStep a = cohff_phase_a(m, scene, me);
  std::vector<InboundPlanes> in;
  in.reserve(inbox.size());
  for (const V2XMessage& msg : inbox) in.push_back(inbound_from_message(msg));
  return cohff_phase_b(m, me, a, in, trace);
}

// --- Information-level diagnostics -------------------------------------------

// Class-presence projection of a labeled grid: channel c marks cells whose
// projection column contains at least one voxel of class c; the empty class
// stays zero.
inline Tensor class_presence_plane(const SemanticVoxelGrid& g, PlaneAxis axis) {
  g.spec.validate();
  const auto d = plane_dims(axis, g.spec);
  Tensor out({d[0], d[1], static_cast<size_t>(kNumClasses)});
  for (int x = 0; x < g.spec.dims[0]; ++x)
    for (int y = 0; y < g.spec.dims[1]; ++y)
      for (int z = 0; z < g.spec.dims[2]; ++z) {
        const uint8_t cls = g.label(x, y, z);
        if (cls == kEmpty) continue;
        size_t i = static_cast<size_t>(x), j = static_cast<size_t>(y);
        if (axis == PlaneAxis::XZ) j = static_cast<size_t>(z);
        if (axis == PlaneAxis::YZ) {
          i = static_cast<size_t>(y);
          j = static_cast<size_t>(z);
        }
        out.at((i * d[1] + j) * kNumClasses + cls) = 1.0;
      }
  return out;
}

// Learning-free probe of what plane sharing alone can recover: presence
// planes fused by volume reconstruction, prediction by per-voxel class vote.
// `remote` holds what each sender observed, expressed in the same grid as
// `own`. With include_ego_verticals off the ego side contributes only its BEV
// plane, isolating what the shared verticals add.
inline SemanticOccupancyPrediction presence_vote_prediction(
    const SemanticVoxelGrid& own, const std::vector<const SemanticVoxelGrid*>& remote,
    bool include_ego_verticals = true) {
  NoGradScope off;
  PlaneSet set;
  set.xy = {class_presence_plane(own, PlaneAxis::XY), 0.0, 0.0};
  set.xz = {class_presence_plane(own, PlaneAxis::XZ), 0.0, 0.0};
  set.yz = {class_presence_plane(own, PlaneAxis::YZ), 0.0, 0.0};
  uint32_t id = 0;
  for (const SemanticVoxelGrid* g : remote) {
    if (!(g->spec == own.spec))
      throw std::invalid_argument("presence_vote_prediction: grid spec mismatch");
    SenderPlanes sp;
    sp.sender = id++;
    sp.xz = {class_presence_plane(*g, PlaneAxis::XZ), 0.0, 0.0};
    sp.yz = {class_presence_plane(*g, PlaneAxis::YZ), 0.0, 0.0};
    set.remote.push_back(std::move(sp));
  }
  const SegVolume v = reconstruct_seg_volume(set, own.spec, include_ego_verticals);
  return make_prediction(v.data, own.spec);
}

}  // namespace cohff
