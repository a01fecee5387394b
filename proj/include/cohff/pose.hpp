#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include "cohff/common.hpp"

namespace cohff {

// Planar pose plus height: translation (x, y, z) and heading yaw in radians,
// normalized to (-pi, pi].
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double yaw = 0.0;

  Pose() = default;
  Pose(double px, double py, double pz, double pyaw)
      : x(px), y(py), z(pz), yaw(normalize_angle(pyaw)) {}

  bool operator==(const Pose& o) const {
    return x == o.x && y == o.y && z == o.z && yaw == o.yaw;
  }
};

using Vec3 = std::array<double, 3>;

// Maps a point given in the pose's local frame to the parent frame.
inline Vec3 transform_point(const Vec3& p, const Pose& frame) {
  const double c = std::cos(frame.yaw), s = std::sin(frame.yaw);
  return {frame.x + c * p[0] - s * p[1], frame.y + s * p[0] + c * p[1],
          frame.z + p[2]};
}

// Maps a parent-frame point into the pose's local frame.
inline Vec3 inverse_transform_point(const Vec3& p, const Pose& frame) {
  const double c = std::cos(frame.yaw), s = std::sin(frame.yaw);
  const double dx = p[0] - frame.x, dy = p[1] - frame.y;
  return {c * dx + s * dy, -s * dx + c * dy, p[2] - frame.z};
}

// Composes a child pose (expressed in the parent frame) with the parent,
// yielding the child in the parent's parent frame.
inline Pose transform_pose(const Pose& child, const Pose& parent) {
  const double c = std::cos(parent.yaw), s = std::sin(parent.yaw);
  return Pose(parent.x + c * child.x - s * child.y,
              parent.y + s * child.x + c * child.y, parent.z + child.z,
              parent.yaw + child.yaw);
}

// Expresses pose a in the frame of pose b. relative_pose(a, a) is identity and
// transform_pose(relative_pose(a, b), b) == a.
inline Pose relative_pose(const Pose& a, const Pose& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = a.x - b.x, dy = a.y - b.y;
  return Pose(c * dx + s * dy, -s * dx + c * dy, a.z - b.z, a.yaw - b.yaw);
}

// Adds i.i.d. Gaussian noise with standard deviation sigma to x and y only.
inline Pose perturb_pose_gps(const Pose& p, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("perturb_pose_gps: sigma must be >= 0");
  if (sigma == 0.0) return p;
  return Pose(p.x + rng.gaussian(0.0, sigma), p.y + rng.gaussian(0.0, sigma),
              p.z, p.yaw);
}

inline Pose perturb_pose_gps(const Pose& p, double sigma, uint64_t seed) {
  Rng rng(seed);
  return perturb_pose_gps(p, sigma, rng);
}

}  // namespace cohff
