#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
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
#include "cohff/tensor.hpp"

namespace cohff {

// --- Synthetic camera observation ----------------------------------------

// channels: one-hot class of the hit surface (misses read as empty) plus a
// normalized depth-bin channel (misses saturate at 1)
inline constexpr size_t kObsChannels = static_cast<size_t>(kNumClasses) + 1;

// Per-mount observation tensors [rows, cols, kObsChannels] from a scan.
inline std::vector<Tensor> render_observations(const SensorScan& scan) {
  std::vector<Tensor> out;
  out.reserve(scan.mount_count);
  size_t base = 0;
  for (int mi = 0; mi < scan.mount_count; ++mi) {
    const size_t rows = scan.rows_per_mount[mi], cols = scan.cols_per_mount[mi];
    Tensor obs({rows, cols, kObsChannels});
    for (size_t i = 0; i < rows * cols; ++i) {
      const SensorSample& s = scan.samples[base + i];
      const uint8_t cls = s.hit ? s.cls : kEmpty;
      const uint16_t bin = s.hit ? depth_to_bin(s.range) : kDepthMissBin;
      obs.at(i * kObsChannels + cls) = 1.0;
      obs.at(i * kObsChannels + kNumClasses) =
          static_cast<double>(bin) / kDepthBins;
    }
    out.push_back(std::move(obs));
    base += rows * cols;
  }
  return out;
}

// --- Image backbone --------------------------------------------------------

// Two 3x3 convolutions with relu; biases start at zero so a zero observation
// maps to zero features.
struct ImageBackbone {
  Tensor k1, b1, k2, b2;

  static ImageBackbone create(ParamStore& ps, const std::string& prefix,
                              size_t in_ch, size_t out_ch, Rng& rng) {
    ImageBackbone bb;
    Tensor k1({3, 3, in_ch, out_ch});
    xavier_uniform(k1, 9 * in_ch, out_ch, rng);
    bb.k1 = ps.add(prefix + ".k1", std::move(k1));
    bb.b1 = make_zeros(ps, prefix + ".b1", {out_ch});
    Tensor k2({3, 3, out_ch, out_ch});
    xavier_uniform(k2, 9 * out_ch, out_ch, rng);
    bb.k2 = ps.add(prefix + ".k2", std::move(k2));
    bb.b2 = make_zeros(ps, prefix + ".b2", {out_ch});
    return bb;
  }

  Tensor forward(const Tensor& obs) const {
    return relu(conv2d(relu(conv2d(obs, k1, b1)), k2, b2));
  }
};

// --- Camera-to-plane lifting ------------------------------------------------

// One camera's encoded features plus the geometry needed to project grid
// points into its pixel lattice. pose is the mount pose in the grid frame.
struct CameraView {
  Tensor features;  // [rows, cols, F_img]
  Pose pose;
  RigMount mount;
  double res_deg = 1.0;
};

struct PixelRef {
  double row = 0, col = 0;
  bool valid = false;
};

// Inverse of the scan ray convention: a grid-frame point lands on the pixel
// whose center ray passes through it.
inline PixelRef project_to_camera(const Vec3& p, const CameraView& cam) {
  const Vec3 local = inverse_transform_point(p, cam.pose);
  const double range = std::sqrt(local[0] * local[0] + local[1] * local[1] +
                                 local[2] * local[2]);
  PixelRef ref;
  if (range <= 1e-6 || range > cam.mount.max_range) return ref;
  const double az = std::atan2(local[1], local[0]);
  const double el = std::atan2(local[2], std::hypot(local[0], local[1]));
  const double az_hi = deg2rad(cam.mount.h_fov_deg) / 2.0;
  const double el_hi = deg2rad(cam.mount.v_fov_hi_deg);
  const double el_lo = deg2rad(cam.mount.v_fov_lo_deg);
  if (std::abs(az) > az_hi || el < el_lo || el > el_hi) return ref;
  const double res = deg2rad(cam.res_deg);
  ref.row = (el_hi - el) / res - 0.5;
  ref.col = (az_hi - az) / res - 0.5;
  ref.valid = true;
  return ref;
}

// Fractional cell coordinates of the r-th of R pillar points spread uniformly
// along an axis with `cells` cells.
inline double pillar_cell_coord(int r, int refs, size_t cells) {
  return (r + 0.5) * static_cast<double>(cells) / refs - 0.5;
}

// Lifts plane queries into the camera features: every plane cell spawns
// pillar_refs 3D points along its orthogonal axis, each projected into every
// camera. Parameter slices are indexed by pillar point only, so camera order
// cannot matter. Queries whose points miss every camera pass through.
inline std::array<FeaturePlane, 3> deformable_cross_attention(
    const std::array<FeaturePlane, 3>& planes, const std::vector<CameraView>& cams,
    const GridSpec& grid, const DeformAttnParams& params) {
  grid.validate();
  const int refs = static_cast<int>(params.slots);
  std::array<FeaturePlane, 3> out;
  for (size_t pi = 0; pi < 3; ++pi) {
    const FeaturePlane& plane = planes[pi];
    const auto dims = plane_dims(plane.axis, grid);
    if (plane.data.ndim() != 3 || plane.data.dim(0) != dims[0] ||
        plane.data.dim(1) != dims[1])
      throw std::invalid_argument("deformable_cross_attention: plane shape mismatch");
    const size_t H = dims[0], W = dims[1], F = plane.data.dim(2);
    const size_t N = H * W;
    Tensor queries = reshape(plane.data, {N, F});

    std::vector<AttnTarget> targets;
    targets.reserve(refs * cams.size());
    const size_t ortho_cells =
        plane.axis == PlaneAxis::XY ? grid.dims[2]
        : plane.axis == PlaneAxis::XZ ? grid.dims[1]
                                      : grid.dims[0];
    for (int r = 0; r < refs; ++r) {
      const double ortho = pillar_cell_coord(r, refs, ortho_cells);
      for (const CameraView& cam : cams) {
        AttnTarget t;
        t.map = cam.features;
        t.param_slot = static_cast<size_t>(r);
        t.u.assign(N, 0.0);
        t.v.assign(N, 0.0);
        t.valid.assign(N, 0);
        for (size_t i = 0; i < H; ++i) {
          for (size_t j = 0; j < W; ++j) {
            double cx, cy, cz;
            if (plane.axis == PlaneAxis::XY) {
              cx = static_cast<double>(i); cy = static_cast<double>(j); cz = ortho;
            } else if (plane.axis == PlaneAxis::XZ) {
              cx = static_cast<double>(i); cy = ortho; cz = static_cast<double>(j);
            } else {
              cx = ortho; cy = static_cast<double>(i); cz = static_cast<double>(j);
            }
            const Vec3 p{grid.origin[0] + grid.voxel_size * (cx + 0.5),
                         grid.origin[1] + grid.voxel_size * (cy + 0.5),
                         grid.origin[2] + grid.voxel_size * (cz + 0.5)};
            const PixelRef ref = project_to_camera(p, cam);
            if (!ref.valid) continue;
            const size_t n = i * W + j;
            t.u[n] = ref.row;
            t.v[n] = ref.col;
            t.valid[n] = 1;
          }
        }
        targets.push_back(std::move(t));
      }
    }
    Tensor delta = deform_attend(queries, targets, params);
    out[pi].axis = plane.axis;
    out[pi].data = reshape(add(queries, delta), {H, W, F});
  }
  return out;
}

// --- Task net ----------------------------------------------------------------

struct SegmentationNetConfig {
  size_t feat = 8;      // plane feature width
  size_t feat_img = 8;  // image feature width
  DeformAttnConfig attn;

  void validate() const {
    if (feat == 0 || feat_img == 0)
      throw std::invalid_argument("SegmentationNetConfig: zero feature width");
    attn.validate(feat);
    if (feat_img % static_cast<size_t>(attn.heads) != 0)
      throw std::invalid_argument("SegmentationNetConfig: feat_img not divisible by heads");
  }
};

// Camera observations -> backbone features -> plane queries lifted by
// deformable cross-attention -> one round of intra-agent plane self-attention.
struct SegmentationNet {
  SegmentationNetConfig cfg;
  GridSpec grid;
  ImageBackbone backbone;
  Tensor q_xy, q_xz, q_yz;  // learnable initial plane queries
  DeformAttnParams cross;   // slots = pillar refs, values = image features
  DeformAttnParams intra;   // the five-role plane attention, remotes absent

  static SegmentationNet create(ParamStore& ps, const std::string& prefix,
                                const GridSpec& grid, const SegmentationNetConfig& cfg,
                                Rng& rng) {
    cfg.validate();
    grid.validate();
    SegmentationNet net;
    net.cfg = cfg;
    net.grid = grid;
    net.backbone = ImageBackbone::create(ps, prefix + ".bb", kObsChannels,
                                         cfg.feat_img, rng);
    auto make_query = [&](const std::string& name, PlaneAxis axis) {
      const auto d = plane_dims(axis, grid);
      Tensor q({d[0], d[1], cfg.feat});
      xavier_uniform(q, cfg.feat, cfg.feat, rng);
      return ps.add(prefix + name, std::move(q));
    };
    net.q_xy = make_query(".q_xy", PlaneAxis::XY);
    net.q_xz = make_query(".q_xz", PlaneAxis::XZ);
    net.q_yz = make_query(".q_yz", PlaneAxis::YZ);
    net.cross = DeformAttnParams::create(ps, prefix + ".cross", cfg.feat,
                                         cfg.feat_img, cfg.attn.pillar_refs,
                                         cfg.attn.heads, cfg.attn.points, rng);
    net.intra = DeformAttnParams::create(ps, prefix + ".intra", cfg.feat, cfg.feat,
                                         kPsaSlots, cfg.attn.heads, cfg.attn.points,
                                         rng);
    return net;
  }

  // scan -> per-camera CameraView with encoded features, poses in the grid frame
  std::vector<CameraView> encode(const SensorScan& scan, const SensorRig& rig,
                                 double res_deg) const {
    const std::vector<Tensor> obs = render_observations(scan);
    if (obs.size() != rig.mounts.size())
      throw std::invalid_argument("SegmentationNet::encode: mount count mismatch");
    std::vector<CameraView> views(obs.size());
    for (size_t i = 0; i < obs.size(); ++i) {
      views[i].features = backbone.forward(obs[i]);
      views[i].pose = rig.mounts[i].offset;
      views[i].mount = rig.mounts[i];
      views[i].res_deg = res_deg;
    }
    return views;
  }

  // cross-attention lift followed by the intra-agent plane update
  std::array<FeaturePlane, 3> planes(const std::vector<CameraView>& cams) const {
    std::array<FeaturePlane, 3> init{FeaturePlane{PlaneAxis::XY, q_xy},
                                     FeaturePlane{PlaneAxis::XZ, q_xz},
                                     FeaturePlane{PlaneAxis::YZ, q_yz}};
    std::array<FeaturePlane, 3> lifted =
        deformable_cross_attention(init, cams, grid, cross);
    PsaPlaneSet updated = intra_agent_plane_self_attention(
        lifted[0].data, lifted[1].data, lifted[2].data, intra);
    return {FeaturePlane{PlaneAxis::XY, updated.at(PlaneRole::EgoXY).data},
            FeaturePlane{PlaneAxis::XZ, updated.at(PlaneRole::EgoXZ).data},
            FeaturePlane{PlaneAxis::YZ, updated.at(PlaneRole::EgoYZ).data}};
  }
};

}  // namespace cohff
