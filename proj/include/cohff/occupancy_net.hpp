#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/grid.hpp"
#include "cohff/ops.hpp"
#include "cohff/optim.hpp"
#include "cohff/pose.hpp"
#include "cohff/raycast.hpp"
#include "cohff/scene.hpp"
#include "cohff/tensor.hpp"

namespace cohff {

// Depth discretization: 50 uniform bins over [0, 40) m plus one out-of-range
// category (bin 50) for misses and hits at or beyond 40 m.
inline constexpr int kDepthBins = 50;
inline constexpr int kDepthMissBin = kDepthBins;
inline constexpr double kDepthMaxRange = 40.0;
inline constexpr double kDepthBinWidth = kDepthMaxRange / kDepthBins;

struct DepthMap {
  int camera = 0;  // mount index within the rig
  int rows = 0, cols = 0;
  RigMount mount;         // lattice geometry needed for back-projection
  double res_deg = 1.0;
  std::vector<uint16_t> bins;  // row-major, values 0..50

  uint16_t bin(int r, int c) const { return bins[static_cast<size_t>(r) * cols + c]; }
};

struct DepthOracleConfig {
  RaycastConfig raycast;
  double noise_sigma = 0.0;  // meters of Gaussian noise on hit distances
  uint64_t noise_seed = 0;
};

inline uint16_t depth_to_bin(double d) {
  if (!(d < kDepthMaxRange)) return kDepthMissBin;
  if (d < 0.0) d = 0.0;
  return static_cast<uint16_t>(std::floor(d / kDepthBinWidth));
}

// Ray-cast depth for every camera of the rig in one scan pass.
inline std::vector<DepthMap> depth_maps(const Scenario& scene, const Agent& agent,
                                        const SensorRig& rig,
                                        const DepthOracleConfig& cfg = {}) {
  const SensorScan scan =
      cast_semantic_rays(rig, agent.pose, scene, agent.body_instance, cfg.raycast);
  Rng noise(cfg.noise_seed);
  std::vector<DepthMap> maps(rig.mounts.size());
  for (size_t mi = 0; mi < rig.mounts.size(); ++mi) {
    DepthMap& m = maps[mi];
    m.camera = static_cast<int>(mi);
    m.rows = scan.rows_per_mount[mi];
    m.cols = scan.cols_per_mount[mi];
    m.mount = rig.mounts[mi];
    m.res_deg = cfg.raycast.angular_res_deg;
    m.bins.assign(static_cast<size_t>(m.rows) * m.cols, kDepthMissBin);
  }
  for (const SensorSample& s : scan.samples) {
    if (!s.hit) continue;
    double d = s.range;
    if (cfg.noise_sigma > 0.0) d += cfg.noise_sigma * noise.gaussian();
    maps[s.mount].bins[static_cast<size_t>(s.row) * maps[s.mount].cols + s.col] =
        depth_to_bin(d);
  }
  return maps;
}

inline DepthMap depth_oracle(const Scenario& scene, const Agent& agent,
                             const SensorRig& rig, int camera,
                             const DepthOracleConfig& cfg = {}) {
  if (camera < 0 || camera >= static_cast<int>(rig.mounts.size()))
    throw std::invalid_argument("depth_oracle: camera " + std::to_string(camera) +
                                " not in rig");
  return depth_maps(scene, agent, rig, cfg)[camera];
}

// Back-projects every in-range pixel to the center of its depth bin along the
// pixel's ray and accumulates hit counts per voxel; counts are normalized by
// the maximum so the volume lies in [0,1]. cam_poses[i] is the sensor pose of
// maps[i] expressed in the grid frame.
inline Tensor embed_depth_to_voxels(const std::vector<DepthMap>& maps,
                                    const std::vector<Pose>& cam_poses,
                                    const GridSpec& grid) {
  if (maps.size() != cam_poses.size())
    throw std::invalid_argument("embed_depth_to_voxels: pose count mismatch");
  grid.validate();
  const size_t X = grid.dims[0], Y = grid.dims[1], Z = grid.dims[2];
  std::vector<double> counts(X * Y * Z, 0.0);
  for (size_t i = 0; i < maps.size(); ++i) {
    const DepthMap& m = maps[i];
    const Pose& cam = cam_poses[i];
    const double res = deg2rad(m.res_deg);
    const double az_hi = deg2rad(m.mount.h_fov_deg) / 2.0;
    const double el_hi = deg2rad(m.mount.v_fov_hi_deg);
    for (int row = 0; row < m.rows; ++row) {
      const double el = el_hi - (row + 0.5) * res;
      for (int col = 0; col < m.cols; ++col) {
        const uint16_t b = m.bin(row, col);
        if (b >= kDepthMissBin) continue;
        const double d = (b + 0.5) * kDepthBinWidth;
        const double az = az_hi - (col + 0.5) * res;
        const double yaw = cam.yaw + az;
        const double ce = std::cos(el);
        const Vec3 p{cam.x + d * ce * std::cos(yaw), cam.y + d * ce * std::sin(yaw),
                     cam.z + d * std::sin(el)};
        const auto c = grid.cell_of(p);
        if (grid.contains(c)) counts[grid.flat_index(c[0], c[1], c[2])] += 1.0;
      }
    }
  }
  const double mx = *std::max_element(counts.begin(), counts.end());
  Tensor out({X, Y, Z, 1});
  if (mx > 0.0)
    for (size_t i = 0; i < counts.size(); ++i) out.at(i) = counts[i] / mx;
  return out;
}

// Stack of pointwise + depthwise-conv3d + relu blocks lifting Cin -> F.
// Depthwise kernels start as identity (center tap 1) so the initial blocks
// reduce to relu(pointwise(x)).
struct OccupancyEncoder {
  int blocks = 2;
  int kernel = 3;
  std::vector<Tensor> pw_w, pw_b;  // pointwise [Cin,F]/[F,F] + bias
  std::vector<Tensor> dw_k;        // depthwise [k,k,k,F]

  static OccupancyEncoder create(ParamStore& ps, const std::string& prefix,
                                 size_t in_ch, size_t feat, int blocks, int kernel,
                                 Rng& rng) {
    if (blocks < 1) throw std::invalid_argument("OccupancyEncoder: blocks >= 1");
    if (kernel < 1 || kernel % 2 == 0)
      throw std::invalid_argument("OccupancyEncoder: kernel must be odd");
    OccupancyEncoder e;
    e.blocks = blocks;
    e.kernel = kernel;
    const size_t k = static_cast<size_t>(kernel);
    for (int b = 0; b < blocks; ++b) {
      const size_t cin = b == 0 ? in_ch : feat;
      const std::string tag = prefix + ".block" + std::to_string(b);
      e.pw_w.push_back(make_linear_weight(ps, tag + ".pw_w", cin, feat, rng));
      e.pw_b.push_back(make_zeros(ps, tag + ".pw_b", {feat}));
      Tensor ker({k, k, k, feat});
      const size_t mid = ((k / 2 * k + k / 2) * k + k / 2) * feat;
      for (size_t f = 0; f < feat; ++f) ker.at(mid + f) = 1.0;
      e.dw_k.push_back(ps.add(tag + ".dw_k", ker));
    }
    return e;
  }

  // [X,Y,Z,Cin] -> [X,Y,Z,F]
  Tensor forward(const Tensor& vol) const {
    Tensor h = vol;
    for (int b = 0; b < blocks; ++b)
      h = relu(depthwise_conv3d(linear(h, pw_w[b], pw_b[b]), dw_k[b]));
    return h;
  }
};

// Pointwise F -> 1 + sigmoid, yielding per-voxel occupancy probability.
struct OccupancyHead {
  Tensor w, b;  // [F,1], [1]

  static OccupancyHead create(ParamStore& ps, const std::string& prefix, size_t feat,
                              Rng& rng) {
    OccupancyHead h;
    h.w = make_linear_weight(ps, prefix + ".w", feat, 1, rng);
    h.b = make_zeros(ps, prefix + ".b", {1});
    return h;
  }

  // [X,Y,Z,F] -> [X,Y,Z]
  Tensor forward(const Tensor& feats) const {
    const auto& s = feats.shape();
    Tensor p = sigmoid(linear(feats, w, b));
    return reshape(p, {s[0], s[1], s[2]});
  }
};

struct OccupancyNetConfig {
  int feat = 8;
  int blocks = 2;
  int kernel = 3;
};

struct OccupancyNet {
  OccupancyNetConfig cfg;
  OccupancyEncoder encoder;
  OccupancyHead head;

  static OccupancyNet create(ParamStore& ps, const std::string& prefix,
                             const OccupancyNetConfig& cfg, Rng& rng) {
    OccupancyNet net;
    net.cfg = cfg;
    net.encoder = OccupancyEncoder::create(ps, prefix + ".enc", 1, cfg.feat,
                                           cfg.blocks, cfg.kernel, rng);
    net.head = OccupancyHead::create(ps, prefix + ".head", cfg.feat, rng);
    return net;
  }

  Tensor features(const Tensor& embedded) const { return encoder.forward(embedded); }
  Tensor probabilities(const Tensor& feats) const { return head.forward(feats); }
};

// Binary occupancy target (1 = occupied) from a labeled grid, shaped [X,Y,Z].
inline std::vector<uint8_t> occupancy_targets(const SemanticVoxelGrid& grid) {
  std::vector<uint8_t> t(grid.labels.size(), 0);
  for (size_t i = 0; i < grid.labels.size(); ++i) t[i] = grid.labels[i] != kEmpty;
  return t;
}

}  // namespace cohff
