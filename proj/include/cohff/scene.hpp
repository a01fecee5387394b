#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/grid.hpp"
#include "cohff/pose.hpp"

namespace cohff {

enum class ShapeKind : uint8_t { Box = 0, Cylinder = 1 };

// Procedural scene primitive. extents are half-extents; for cylinders
// extents[0] is the radius and extents[2] the half-height (extents[1] unused,
// kept equal to the radius).
struct SceneObject {
  uint8_t cls = 0;
  ShapeKind kind = ShapeKind::Box;
  Vec3 center{0, 0, 0};
  Vec3 extents{1, 1, 1};
  double yaw = 0.0;
  int32_t instance = 0;

  void validate() const {
    if (extents[0] <= 0 || extents[1] <= 0 || extents[2] <= 0)
      throw std::invalid_argument("SceneObject: extents must be positive");
  }
};

// Infinite horizontal catch-all plane below the strip geometry.
struct GroundPlane {
  double z = 0.0;
  uint8_t cls = static_cast<uint8_t>(SemanticClass::Terrain);
};

enum class RigKind : uint8_t { CameraQuad = 0, LidarQuad = 1, Lidar18 = 2 };

struct RigMount {
  Pose offset;              // relative to the vehicle pose
  double v_fov_lo_deg = 0;  // vertical field of view bounds
  double v_fov_hi_deg = 0;
  double h_fov_deg = 0;     // horizontal field of view, centered on mount yaw
  double max_range = 40.0;
};

struct SensorRig {
  RigKind kind = RigKind::CameraQuad;
  std::vector<RigMount> mounts;

  // Four sensors at 90 degree spacing, matching the camera ring.
  static SensorRig camera_quad() {
    SensorRig rig;
    rig.kind = RigKind::CameraQuad;
    for (int i = 0; i < 4; ++i) {
      RigMount m;
      m.offset = Pose(0.0, 0.0, 1.9, i * kPi / 2.0);
      m.v_fov_lo_deg = -30.0;
      m.v_fov_hi_deg = 10.0;
      m.h_fov_deg = 100.0;
      m.max_range = 40.0;
      rig.mounts.push_back(m);
    }
    return rig;
  }

  static SensorRig lidar_quad() {
    SensorRig rig = camera_quad();
    rig.kind = RigKind::LidarQuad;
    return rig;
  }

  // Nine positions on a 3x3 grid spaced 30 m, two sensors each covering
  // vertical FoVs [-90, -20] and [-20, 0] over 360 degrees.
  static SensorRig lidar_18() {
    SensorRig rig;
    rig.kind = RigKind::Lidar18;
    for (int gx = -1; gx <= 1; ++gx) {
      for (int gy = -1; gy <= 1; ++gy) {
        for (int s = 0; s < 2; ++s) {
          RigMount m;
          m.offset = Pose(30.0 * gx, 30.0 * gy, 8.0, 0.0);
          m.v_fov_lo_deg = (s == 0) ? -90.0 : -20.0;
          m.v_fov_hi_deg = (s == 0) ? -20.0 : 0.0;
          m.h_fov_deg = 360.0;
          m.max_range = 120.0;
          rig.mounts.push_back(m);
        }
      }
    }
    return rig;
  }
};

struct Agent {
  int id = 0;
  Pose pose;
  int32_t body_instance = 0;  // instance id of this agent's own vehicle box
};

// Immutable multi-agent scene: geometry, agents, and the communication graph.
struct Scenario {
  int format_version = 1;
  uint64_t seed = 0;
  std::string template_name = "random";
  GridSpec grid;
  std::optional<GroundPlane> ground;
  std::vector<SceneObject> objects;
  std::vector<Agent> agents;
  std::vector<std::pair<int, int>> edges;
  double comm_range = 100.0;

  std::vector<int> neighbors(int agent_id) const {
    std::vector<int> out;
    for (const auto& [a, b] : edges) {
      if (a == agent_id) out.push_back(b);
      if (b == agent_id) out.push_back(a);
    }
    return out;
  }
};

struct ScenarioConfig {
  uint64_t seed = 1;
  std::string template_name = "random";  // random | occlusion | junction | highway
  int agents = 2;
  double extent = 40.0;  // side length of the populated square, meters
  int objects = 12;      // random objects beyond the ground strips
  double comm_range = 100.0;
  GridSpec grid;

  void validate() const {
    if (agents < 1) throw std::invalid_argument("ScenarioConfig: agents must be >= 1");
    if (extent <= 0) throw std::invalid_argument("ScenarioConfig: extent must be > 0");
    if (objects < 0) throw std::invalid_argument("ScenarioConfig: objects must be >= 0");
    grid.validate();
    if (template_name != "random" && template_name != "occlusion" &&
        template_name != "junction" && template_name != "highway") {
      throw std::invalid_argument("ScenarioConfig: unknown template '" + template_name + "'");
    }
  }
};

namespace detail {

inline SceneObject make_box(uint8_t cls, Vec3 center, Vec3 half_extents,
                            double yaw = 0.0, int32_t instance = 0) {
  SceneObject o;
  o.cls = cls;
  o.kind = ShapeKind::Box;
  o.center = center;
  o.extents = half_extents;
  o.yaw = yaw;
  o.instance = instance;
  return o;
}

inline SceneObject make_cylinder(uint8_t cls, Vec3 center, double radius,
                                 double half_height, int32_t instance = 0) {
  SceneObject o;
  o.cls = cls;
  o.kind = ShapeKind::Cylinder;
  o.center = center;
  o.extents = {radius, radius, half_height};
  o.instance = instance;
  return o;
}

// Vehicle body: ~4.4 x 1.9 x 1.3 m, floating 0.45 m above ground so the body
// cells sit above the ground voxel layer.
inline SceneObject make_vehicle(Vec3 center_xy, double yaw, int32_t instance) {
  return make_box(kVehicles, {center_xy[0], center_xy[1], 1.1}, {2.2, 0.95, 0.65},
                  yaw, instance);
}

// Ground strips: an east-west road with sidewalks, terrain filling the rest.
inline void add_ground_strips(Scenario& s, double half) {
  const uint8_t road = static_cast<uint8_t>(SemanticClass::Road);
  const uint8_t walk = static_cast<uint8_t>(SemanticClass::SideWalk);
  const uint8_t terr = static_cast<uint8_t>(SemanticClass::Terrain);
  const double top = 0.06;  // strip half-height; tops stay in voxel layer 0
  s.objects.push_back(make_box(road, {0, 0, top}, {half, 3.5, top}));
  s.objects.push_back(make_box(walk, {0, 4.5, top}, {half, 1.0, top}));
  s.objects.push_back(make_box(walk, {0, -4.5, top}, {half, 1.0, top}));
  const double terr_half = (half - 5.5) / 2.0;
  if (terr_half > 0) {
    s.objects.push_back(make_box(terr, {0, 5.5 + terr_half, top}, {half, terr_half, top}));
    s.objects.push_back(make_box(terr, {0, -5.5 - terr_half, top}, {half, terr_half, top}));
  }
}

inline void add_agent(Scenario& s, int id, const Pose& pose) {
  Agent a;
  a.id = id;
  a.pose = pose;
  a.body_instance = 1000 + id;
  s.agents.push_back(a);
  s.objects.push_back(make_vehicle({pose.x, pose.y}, pose.yaw, a.body_instance));
}

inline void build_edges(Scenario& s) {
  for (size_t i = 0; i < s.agents.size(); ++i) {
    for (size_t j = i + 1; j < s.agents.size(); ++j) {
      const auto& a = s.agents[i].pose;
      const auto& b = s.agents[j].pose;
      const double d = std::hypot(a.x - b.x, a.y - b.y);
      if (d <= s.comm_range)
        s.edges.emplace_back(s.agents[i].id, s.agents[j].id);
    }
  }
}

inline void build_random(Scenario& s, const ScenarioConfig& cfg, Rng& rng) {
  const double half = cfg.extent / 2.0;
  add_ground_strips(s, half);

  // Agents on the road, spaced along x.
  for (int i = 0; i < cfg.agents; ++i) {
    const double x = -half + (i + 0.5) * cfg.extent / cfg.agents +
                     rng.uniform(-1.0, 1.0);
    const double y = rng.uniform(-2.5, 2.5);
    add_agent(s, i, Pose(x, y, 0.0, rng.uniform(-0.3, 0.3)));
  }

  struct Pick {
    SemanticClass cls;
    bool cylinder;
  };
  static constexpr Pick picks[] = {
      {SemanticClass::Building, false}, {SemanticClass::Fence, false},
      {SemanticClass::Pole, true},      {SemanticClass::Vegetation, true},
      {SemanticClass::Vehicles, false}, {SemanticClass::Wall, false},
      {SemanticClass::GuardRail, false}, {SemanticClass::TrafficSigns, true},
      {SemanticClass::Bridge, false}};

  int next_instance = 1;
  for (int i = 0; i < cfg.objects; ++i) {
    const Pick pick = picks[rng.uniform_int(0, 8)];
    // Off-road band so objects do not bury agents.
    const double x = rng.uniform(-half, half);
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    double y = side * rng.uniform(6.5, half > 8.0 ? half : 8.0);
    switch (pick.cls) {
      case SemanticClass::Building:
        s.objects.push_back(make_box(static_cast<uint8_t>(pick.cls), {x, y, 3.0},
                                     {rng.uniform(2.0, 5.0), rng.uniform(2.0, 5.0), 3.0}));
        break;
      case SemanticClass::Fence:
        s.objects.push_back(make_box(static_cast<uint8_t>(pick.cls), {x, y, 0.6},
                                     {rng.uniform(2.0, 6.0), 0.1, 0.6}));
        break;
      case SemanticClass::Pole:
        s.objects.push_back(make_cylinder(static_cast<uint8_t>(pick.cls), {x, y, 2.5},
                                          0.15, 2.5));
        break;
      case SemanticClass::Vegetation:
        s.objects.push_back(make_cylinder(static_cast<uint8_t>(pick.cls), {x, y, 1.5},
                                          rng.uniform(0.5, 1.5), 1.5));
        break;
      case SemanticClass::Vehicles: {
        // Parked on the road shoulder.
        y = side * 2.8;
        s.objects.push_back(make_vehicle({x, y}, rng.uniform(-0.2, 0.2), next_instance++));
        break;
      }
      case SemanticClass::Wall:
        s.objects.push_back(make_box(static_cast<uint8_t>(pick.cls), {x, y, 1.25},
                                     {rng.uniform(2.0, 6.0), 0.2, 1.25}));
        break;
      case SemanticClass::GuardRail:
        s.objects.push_back(make_box(static_cast<uint8_t>(pick.cls),
                                     {x, side * 6.0, 0.5}, {rng.uniform(3.0, 8.0), 0.1, 0.3}));
        break;
      case SemanticClass::TrafficSigns:
        s.objects.push_back(make_cylinder(static_cast<uint8_t>(pick.cls), {x, side * 5.8, 1.8},
                                          0.25, 0.4));
        break;
      case SemanticClass::Bridge:
        s.objects.push_back(make_box(static_cast<uint8_t>(pick.cls), {x, 0.0, 5.25},
                                     {1.5, half, 0.25}));
        break;
      default:
        break;
    }
  }
}

// Scripted occlusion: a building wall hides a parked vehicle from the ego
// agent (id 0) while the CAV (id 1) sees it from the flank.
inline void build_occlusion(Scenario& s, const ScenarioConfig& cfg, Rng&) {
  const double half = cfg.extent / 2.0;
  add_ground_strips(s, half);
  // Layout keeps the hidden vehicle within 0.4*extent of the ego so it falls
  // inside an ego-centred grid that spans the scenario extent.
  const double ego_x = -0.2 * cfg.extent;
  const double veh_x = 0.2 * cfg.extent;
  add_agent(s, 0, Pose(ego_x, 0.0, 0.0, 0.0));
  if (cfg.agents >= 2)
    add_agent(s, 1, Pose(veh_x, 0.3 * cfg.extent, 0.0, -kPi / 2.0));
  for (int i = 2; i < cfg.agents; ++i)
    add_agent(s, i, Pose(ego_x - 3.0 * (i - 1), -2.5, 0.0, 0.0));

  s.objects.push_back(make_box(static_cast<uint8_t>(SemanticClass::Building),
                               {0.0, 0.0, 1.6}, {0.5, 4.5, 1.6}));
  // Hidden vehicle, instance 1, straight behind the wall as seen from the ego.
  s.objects.push_back(make_vehicle({veh_x, 0.0}, 0.0, 1));
}

inline void build_junction(Scenario& s, const ScenarioConfig& cfg, Rng&) {
  const double half = cfg.extent / 2.0;
  const uint8_t road = static_cast<uint8_t>(SemanticClass::Road);
  const uint8_t walk = static_cast<uint8_t>(SemanticClass::SideWalk);
  const uint8_t terr = static_cast<uint8_t>(SemanticClass::Terrain);
  const double top = 0.06;
  s.objects.push_back(make_box(road, {0, 0, top}, {half, 3.5, top}));
  s.objects.push_back(make_box(road, {0, 0, top}, {3.5, half, top}));
  const double q = (half + 4.5) / 2.0;  // quadrant centers for terrain
  const double qh = (half - 4.5) / 2.0;
  if (qh > 0) {
    for (int sx = -1; sx <= 1; sx += 2) {
      for (int sy = -1; sy <= 1; sy += 2) {
        s.objects.push_back(make_box(walk, {sx * q, sy * 4.0, top}, {qh, 0.5, top}));
        s.objects.push_back(make_box(walk, {sx * 4.0, sy * q, top}, {0.5, qh, top}));
        s.objects.push_back(make_box(terr, {sx * q, sy * q, top}, {qh, qh, top}));
        s.objects.push_back(make_box(static_cast<uint8_t>(SemanticClass::Building),
                                     {sx * 0.3 * cfg.extent, sy * 0.3 * cfg.extent, 2.5},
                                     {2.5, 2.5, 2.5}));
      }
    }
  }
  for (int i = 0; i < cfg.agents; ++i) {
    if (i % 2 == 0)
      add_agent(s, i, Pose(-0.4 * cfg.extent + 4.0 * i, -1.8, 0.0, 0.0));
    else
      add_agent(s, i, Pose(1.8, -0.4 * cfg.extent + 4.0 * i, 0.0, kPi / 2.0));
  }
  s.objects.push_back(make_vehicle({0.3 * cfg.extent, 1.8}, kPi, 1));
}

inline void build_highway(Scenario& s, const ScenarioConfig& cfg, Rng&) {
  const double half = cfg.extent / 2.0;
  const uint8_t road = static_cast<uint8_t>(SemanticClass::Road);
  const uint8_t terr = static_cast<uint8_t>(SemanticClass::Terrain);
  const uint8_t rail = static_cast<uint8_t>(SemanticClass::GuardRail);
  const double top = 0.06;
  s.objects.push_back(make_box(road, {0, 0, top}, {half, 5.0, top}));
  const double terr_half = (half - 5.0) / 2.0;
  if (terr_half > 0) {
    s.objects.push_back(make_box(terr, {0, 5.0 + terr_half, top}, {half, terr_half, top}));
    s.objects.push_back(make_box(terr, {0, -5.0 - terr_half, top}, {half, terr_half, top}));
  }
  s.objects.push_back(make_box(rail, {0, 5.2, 0.5}, {half, 0.1, 0.3}));
  s.objects.push_back(make_box(rail, {0, -5.2, 0.5}, {half, 0.1, 0.3}));
  // Overpass across the carriageway.
  s.objects.push_back(make_box(static_cast<uint8_t>(SemanticClass::Bridge),
                               {0.25 * cfg.extent, 0.0, 5.25}, {1.5, half, 0.25}));
  for (int i = 0; i < cfg.agents; ++i) {
    const double lane = (i % 2 == 0) ? -2.5 : 2.5;
    add_agent(s, i, Pose(-0.4 * cfg.extent + 6.0 * i, lane, 0.0, 0.0));
  }
  s.objects.push_back(make_vehicle({0.1 * cfg.extent, -2.5}, 0.0, 1));
  s.objects.push_back(make_vehicle({0.35 * cfg.extent, 2.5}, 0.0, 2));
}

}  // namespace detail

// Deterministic procedural scene from a seed. Same config -> identical
// Scenario, byte for byte after serialization.
inline Scenario generate_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Scenario s;
  s.seed = cfg.seed;
  s.template_name = cfg.template_name;
  s.grid = cfg.grid;
  s.comm_range = cfg.comm_range;
  s.ground = GroundPlane{};

  if (cfg.template_name == "occlusion")
    detail::build_occlusion(s, cfg, rng);
  else if (cfg.template_name == "junction")
    detail::build_junction(s, cfg, rng);
  else if (cfg.template_name == "highway")
    detail::build_highway(s, cfg, rng);
  else
    detail::build_random(s, cfg, rng);

  for (const auto& o : s.objects) o.validate();
  detail::build_edges(s);
  return s;
}

}  // namespace cohff
