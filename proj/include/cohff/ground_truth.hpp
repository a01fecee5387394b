#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "cohff/grid.hpp"
#include "cohff/raycast.hpp"
#include "cohff/scene.hpp"

namespace cohff {

// Supervision tiers for one agent, all in that agent's frame.
//   ego:           what the agent's own near-field sensing can see
//   collaborative: ego plus every connected agent's near-field sensing
//   complete:      collaborative plus the agent's wide-coverage sweep
struct GtTiers {
  SemanticVoxelGrid ego;
  SemanticVoxelGrid collaborative;
  SemanticVoxelGrid complete;
};

struct GtConfig {
  RaycastConfig raycast;
};

namespace detail {

struct TaggedScan {
  int agent_id = 0;
  Pose pose;           // sensing agent's pose (world)
  SensorScan scan;
};

// Nearest-observer merge: each cell takes the label of the closest sensing
// agent that hit it; distance is from that agent's pose to the cell center in
// the receiver frame. Ties go to the lower class id, then lower instance.
inline SemanticVoxelGrid merge_nearest_observer(const std::vector<TaggedScan>& scans,
                                                const Pose& receiver,
                                                const GridSpec& spec) {
  SemanticVoxelGrid out(spec);
  const size_t n = spec.num_cells();
  std::vector<double> best_dist(n, std::numeric_limits<double>::infinity());
  std::vector<uint8_t> best_cls(n, 0);
  std::vector<int32_t> best_inst(n, 0);

  for (const auto& ts : scans) {
    // Voxelize this sender's hits in the receiver frame, then compete per cell.
    std::vector<SemanticPoint> pts;
    for (const auto& s : ts.scan.samples) {
      if (!s.hit) continue;
      const Vec3 local = inverse_transform_point(s.point, receiver);
      pts.push_back({local[0], local[1], local[2], s.cls, s.instance});
    }
    const VoxelizeResult vr = voxelize_points(pts, spec);
    const Vec3 sender_local = inverse_transform_point({ts.pose.x, ts.pose.y, ts.pose.z},
                                                      receiver);
    for (int x = 0; x < spec.dims[0]; ++x) {
      for (int y = 0; y < spec.dims[1]; ++y) {
        for (int z = 0; z < spec.dims[2]; ++z) {
          const uint8_t cls = vr.grid.label(x, y, z);
          if (cls == kEmpty) continue;
          const size_t idx = spec.flat_index(x, y, z);
          const Vec3 c = spec.cell_center(x, y, z);
          const double dx = c[0] - sender_local[0];
          const double dy = c[1] - sender_local[1];
          const double dz = c[2] - sender_local[2];
          const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
          const int32_t inst = vr.grid.instance(x, y, z);
          const bool better =
              d < best_dist[idx] ||
              (d == best_dist[idx] &&
               (cls < best_cls[idx] ||
                (cls == best_cls[idx] && inst < best_inst[idx])));
          if (better) {
            best_dist[idx] = d;
            best_cls[idx] = cls;
            best_inst[idx] = inst;
          }
        }
      }
    }
  }
  for (size_t i = 0; i < n; ++i) {
    out.labels[i] = best_cls[i];
    out.instances[i] = best_inst[i];
  }
  return out;
}

}  // namespace detail

// Builds the three supervision tiers for agent_id. The complete tier is the
// union of the wide sweep and the collaborative tier (collaborative cells win
// on conflict, sweep fills the rest), which makes the containment chain
// ego <= collaborative <= complete hold by construction.
inline GtTiers build_gt_tiers(const Scenario& scene, int agent_id,
                              const GtConfig& cfg = {}) {
  const Agent* me = nullptr;
  for (const auto& a : scene.agents)
    if (a.id == agent_id) me = &a;
  if (!me) throw std::invalid_argument("build_gt_tiers: unknown agent id");

  const SensorRig quad = SensorRig::lidar_quad();
  const SensorRig wide = SensorRig::lidar_18();

  std::vector<detail::TaggedScan> near_scans;
  near_scans.push_back({me->id, me->pose,
                        cast_semantic_rays(quad, me->pose, scene, me->body_instance,
                                           cfg.raycast)});
  for (int nb : scene.neighbors(agent_id)) {
    for (const auto& a : scene.agents) {
      if (a.id != nb) continue;
      near_scans.push_back({a.id, a.pose,
                            cast_semantic_rays(quad, a.pose, scene, a.body_instance,
                                               cfg.raycast)});
    }
  }

  GtTiers tiers;
  // Ego tier: own quad only, straight voxelization in the agent frame.
  tiers.ego = voxelize_points(scan_points_in_frame(near_scans[0].scan, me->pose),
                              scene.grid)
                  .grid;
  tiers.collaborative = detail::merge_nearest_observer(near_scans, me->pose, scene.grid);

  const SensorScan sweep = cast_semantic_rays(wide, me->pose, scene,
                                              me->body_instance, cfg.raycast);
  SemanticVoxelGrid sweep_grid =
      voxelize_points(scan_points_in_frame(sweep, me->pose), scene.grid).grid;
  tiers.complete = sweep_grid;
  for (size_t i = 0; i < tiers.collaborative.labels.size(); ++i) {
    if (tiers.collaborative.labels[i] != kEmpty) {
      tiers.complete.labels[i] = tiers.collaborative.labels[i];
      tiers.complete.instances[i] = tiers.collaborative.instances[i];
    }
  }
  return tiers;
}

// Containment check used by tests and the harness: every occupied cell of the
// smaller tier must be occupied in the larger one.
inline bool tier_contains(const SemanticVoxelGrid& big, const SemanticVoxelGrid& small) {
  if (big.labels.size() != small.labels.size()) return false;
  for (size_t i = 0; i < small.labels.size(); ++i)
    if (small.labels[i] != kEmpty && big.labels[i] == kEmpty) return false;
  return true;
}

}  // namespace cohff
