#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/pose.hpp"
#include "cohff/scene.hpp"

namespace cohff {

struct Ray {
  Vec3 origin{0, 0, 0};
  Vec3 dir{1, 0, 0};  // unit length
};

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  uint8_t cls = 0;
  int32_t instance = 0;
};

constexpr double kRayEps = 1e-9;

// Slab test in the object frame (yaw about z only).
inline std::optional<double> intersect_box(const Ray& ray, const SceneObject& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double px = ray.origin[0] - box.center[0];
  const double py = ray.origin[1] - box.center[1];
  const double pz = ray.origin[2] - box.center[2];
  const double ox = c * px + s * py;
  const double oy = -s * px + c * py;
  const double dx = c * ray.dir[0] + s * ray.dir[1];
  const double dy = -s * ray.dir[0] + c * ray.dir[1];
  const double o[3] = {ox, oy, pz};
  const double d[3] = {dx, dy, ray.dir[2]};

  double t_lo = -std::numeric_limits<double>::infinity();
  double t_hi = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    const double e = box.extents[i];
    if (std::abs(d[i]) < 1e-15) {
      if (o[i] < -e || o[i] > e) return std::nullopt;
      continue;
    }
    double t0 = (-e - o[i]) / d[i];
    double t1 = (e - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    t_lo = std::max(t_lo, t0);
    t_hi = std::min(t_hi, t1);
    if (t_lo > t_hi) return std::nullopt;
  }
  // first boundary crossing ahead of the origin (exit face if starting inside)
  if (t_lo > kRayEps) return t_lo;
  if (t_hi > kRayEps) return t_hi;
  return std::nullopt;
}

// Vertical cylinder: quadratic against the lateral surface plus the two caps.
inline std::optional<double> intersect_cylinder(const Ray& ray, const SceneObject& cyl) {
  const double r = cyl.extents[0];
  const double hh = cyl.extents[2];
  const double ox = ray.origin[0] - cyl.center[0];
  const double oy = ray.origin[1] - cyl.center[1];
  const double oz = ray.origin[2] - cyl.center[2];
  const double dx = ray.dir[0], dy = ray.dir[1], dz = ray.dir[2];

  double best = std::numeric_limits<double>::infinity();

  const double a = dx * dx + dy * dy;
  if (a > 1e-15) {
    const double b = 2.0 * (ox * dx + oy * dy);
    const double cc = ox * ox + oy * oy - r * r;
    const double disc = b * b - 4.0 * a * cc;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      for (const double t : {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}) {
        if (t > kRayEps && t < best) {
          const double z = oz + t * dz;
          if (z >= -hh && z <= hh) best = t;
        }
      }
    }
  }
  if (std::abs(dz) > 1e-15) {
    for (const double zcap : {-hh, hh}) {
      const double t = (zcap - oz) / dz;
      if (t > kRayEps && t < best) {
        const double x = ox + t * dx;
        const double y = oy + t * dy;
        if (x * x + y * y <= r * r) best = t;
      }
    }
  }
  if (std::isinf(best)) return std::nullopt;
  return best;
}

inline std::optional<double> intersect_ground(const Ray& ray, const GroundPlane& g) {
  if (std::abs(ray.dir[2]) < 1e-15) return std::nullopt;
  const double t = (g.z - ray.origin[2]) / ray.dir[2];
  if (t <= kRayEps) return std::nullopt;
  return t;
}

// Nearest hit across the scene. skip_instance removes the casting agent's own
// body so a vehicle does not shadow itself.
inline RayHit cast_ray(const Ray& ray, const Scenario& scene,
                       int32_t skip_instance = -1) {
  RayHit hit;
  for (const auto& obj : scene.objects) {
    if (obj.instance == skip_instance && skip_instance >= 0) continue;
    std::optional<double> t = (obj.kind == ShapeKind::Box)
                                  ? intersect_box(ray, obj)
                                  : intersect_cylinder(ray, obj);
    if (t && *t < hit.t) {
      hit.t = *t;
      hit.cls = obj.cls;
      hit.instance = obj.instance;
    }
  }
  if (scene.ground) {
    if (auto t = intersect_ground(ray, *scene.ground); t && *t < hit.t) {
      hit.t = *t;
      hit.cls = scene.ground->cls;
      hit.instance = 0;
    }
  }
  return hit;
}

struct RaycastConfig {
  double angular_res_deg = 1.0;  // lattice step for both azimuth and elevation

  void validate() const {
    if (angular_res_deg <= 0 || angular_res_deg > 90)
      throw std::invalid_argument("RaycastConfig: angular_res_deg out of range");
  }
};

// One sensor sample: lattice position, ray geometry, and the hit (if any).
struct SensorSample {
  int mount = 0;
  int row = 0;  // elevation index, top row first
  int col = 0;  // azimuth index, left (positive az) first
  double az = 0, el = 0;  // in the mount frame, radians
  Vec3 origin{0, 0, 0};   // world
  Vec3 dir{0, 0, 0};
  bool hit = false;
  double range = 0;
  uint8_t cls = 0;
  int32_t instance = 0;
  Vec3 point{0, 0, 0};  // world hit point
};

struct SensorScan {
  int mount_count = 0;
  std::vector<int> rows_per_mount;
  std::vector<int> cols_per_mount;
  std::vector<SensorSample> samples;
};

inline int lattice_steps(double span_deg, double res_deg) {
  return std::max(1, static_cast<int>(std::floor(span_deg / res_deg + 1e-9)));
}

// Casts the full az/el lattice of every mount of a rig placed at vehicle_pose.
// Rays step at the configured resolution with samples at cell centers, so FoV
// boundary angles are never sampled exactly.
inline SensorScan cast_semantic_rays(const SensorRig& rig, const Pose& vehicle_pose,
                                     const Scenario& scene, int32_t skip_instance,
                                     const RaycastConfig& cfg = {}) {
  cfg.validate();
  SensorScan scan;
  scan.mount_count = static_cast<int>(rig.mounts.size());
  for (int mi = 0; mi < scan.mount_count; ++mi) {
    const RigMount& m = rig.mounts[mi];
    const Pose sensor = transform_pose(m.offset, vehicle_pose);
    const double res = deg2rad(cfg.angular_res_deg);
    const int cols = lattice_steps(m.h_fov_deg, cfg.angular_res_deg);
    const int rows = lattice_steps(m.v_fov_hi_deg - m.v_fov_lo_deg, cfg.angular_res_deg);
    scan.rows_per_mount.push_back(rows);
    scan.cols_per_mount.push_back(cols);
    const double az_hi = deg2rad(m.h_fov_deg) / 2.0;
    const double el_hi = deg2rad(m.v_fov_hi_deg);

    for (int row = 0; row < rows; ++row) {
      const double el = el_hi - (row + 0.5) * res;
      for (int col = 0; col < cols; ++col) {
        const double az = az_hi - (col + 0.5) * res;
        SensorSample sm;
        sm.mount = mi;
        sm.row = row;
        sm.col = col;
        sm.az = az;
        sm.el = el;
        const double yaw = sensor.yaw + az;
        const double ce = std::cos(el);
        Ray ray;
        ray.origin = {sensor.x, sensor.y, sensor.z};
        ray.dir = {ce * std::cos(yaw), ce * std::sin(yaw), std::sin(el)};
        sm.origin = ray.origin;
        sm.dir = ray.dir;
        const RayHit h = cast_ray(ray, scene, skip_instance);
        if (std::isfinite(h.t) && h.t <= m.max_range) {
          sm.hit = true;
          sm.range = h.t;
          sm.cls = h.cls;
          sm.instance = h.instance;
          sm.point = {ray.origin[0] + h.t * ray.dir[0],
                      ray.origin[1] + h.t * ray.dir[1],
                      ray.origin[2] + h.t * ray.dir[2]};
        }
        scan.samples.push_back(sm);
      }
    }
  }
  return scan;
}

inline std::vector<SemanticPoint> scan_points(const SensorScan& scan) {
  std::vector<SemanticPoint> pts;
  for (const auto& s : scan.samples) {
    if (!s.hit) continue;
    pts.push_back({s.point[0], s.point[1], s.point[2], s.cls, s.instance});
  }
  return pts;
}

// Points re-expressed in a target frame (for voxelizing into an agent grid).
inline std::vector<SemanticPoint> scan_points_in_frame(const SensorScan& scan,
                                                       const Pose& frame) {
  std::vector<SemanticPoint> pts;
  for (const auto& s : scan.samples) {
    if (!s.hit) continue;
    const Vec3 local = inverse_transform_point(s.point, frame);
    pts.push_back({local[0], local[1], local[2], s.cls, s.instance});
  }
  return pts;
}

}  // namespace cohff
