#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cohff/occupancy_net.hpp"
#include "cohff/scene.hpp"

namespace cohff {

inline constexpr int kScenarioFormatVersion = 1;

namespace detail {

// shortest decimal form that parses back to the same double
inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline nlohmann::json json_vec3(const Vec3& v) {
  return nlohmann::json::array({v[0], v[1], v[2]});
}

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3)
    throw std::runtime_error("scenario json: expected 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline nlohmann::json json_pose(const Pose& p) {
  return {{"x", p.x}, {"y", p.y}, {"z", p.z}, {"yaw", p.yaw}};
}

inline Pose pose_from_json(const nlohmann::json& j) {
  Pose p;
  p.x = j.at("x").get<double>();
  p.y = j.at("y").get<double>();
  p.z = j.at("z").get<double>();
  p.yaw = j.at("yaw").get<double>();
  return p;
}

}  // namespace detail

inline nlohmann::json scenario_to_json(const Scenario& s) {
  nlohmann::json j;
  j["format_version"] = s.format_version;
  j["seed"] = s.seed;
  j["template"] = s.template_name;
  j["comm_range"] = s.comm_range;
  j["grid"] = {{"origin", detail::json_vec3(s.grid.origin)},
               {"dims", {s.grid.dims[0], s.grid.dims[1], s.grid.dims[2]}},
               {"voxel_size", s.grid.voxel_size}};
  if (s.ground)
    j["ground"] = {{"z", s.ground->z}, {"class", s.ground->cls}};
  else
    j["ground"] = nullptr;
  j["objects"] = nlohmann::json::array();
  for (const SceneObject& o : s.objects)
    j["objects"].push_back({{"class", o.cls},
                            {"kind", o.kind == ShapeKind::Box ? "box" : "cylinder"},
                            {"center", detail::json_vec3(o.center)},
                            {"extents", detail::json_vec3(o.extents)},
                            {"yaw", o.yaw},
                            {"instance", o.instance}});
  j["agents"] = nlohmann::json::array();
  for (const Agent& a : s.agents)
    j["agents"].push_back({{"id", a.id},
                           {"pose", detail::json_pose(a.pose)},
                           {"body_instance", a.body_instance}});
  j["edges"] = nlohmann::json::array();
  for (const auto& [a, b] : s.edges) j["edges"].push_back({a, b});
  return j;
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
  const int version = j.at("format_version").get<int>();
  if (version != kScenarioFormatVersion)
    throw std::runtime_error("scenario json: unsupported format_version " +
                             std::to_string(version));
  Scenario s;
  s.format_version = version;
  s.seed = j.at("seed").get<uint64_t>();
  s.template_name = j.at("template").get<std::string>();
  s.comm_range = j.at("comm_range").get<double>();
  const auto& g = j.at("grid");
  s.grid.origin = detail::vec3_from_json(g.at("origin"));
  const auto& dims = g.at("dims");
  if (!dims.is_array() || dims.size() != 3)
    throw std::runtime_error("scenario json: grid dims must have 3 entries");
  for (int k = 0; k < 3; ++k) s.grid.dims[k] = dims[k].get<int>();
  s.grid.voxel_size = g.at("voxel_size").get<double>();
  s.grid.validate();
  if (!j.at("ground").is_null()) {
    GroundPlane gp;
    gp.z = j["ground"].at("z").get<double>();
    gp.cls = j["ground"].at("class").get<uint8_t>();
    s.ground = gp;
  }
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    o.cls = jo.at("class").get<uint8_t>();
    const std::string kind = jo.at("kind").get<std::string>();
    if (kind == "box")
      o.kind = ShapeKind::Box;
    else if (kind == "cylinder")
      o.kind = ShapeKind::Cylinder;
    else
      throw std::runtime_error("scenario json: unknown shape kind '" + kind + "'");
    o.center = detail::vec3_from_json(jo.at("center"));
    o.extents = detail::vec3_from_json(jo.at("extents"));
    o.yaw = jo.at("yaw").get<double>();
    o.instance = jo.at("instance").get<int32_t>();
    o.validate();
    s.objects.push_back(o);
  }
  for (const auto& ja : j.at("agents")) {
    Agent a;
    a.id = ja.at("id").get<int>();
    a.pose = detail::pose_from_json(ja.at("pose"));
    a.body_instance = ja.at("body_instance").get<int32_t>();
    s.agents.push_back(a);
  }
  for (const auto& je : j.at("edges")) {
    if (!je.is_array() || je.size() != 2)
      throw std::runtime_error("scenario json: edge must be a pair");
    s.edges.emplace_back(je[0].get<int>(), je[1].get<int>());
  }
  return s;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_scenario(const Scenario& s, const std::string& path) {
  write_text_file(path, scenario_to_json(s).dump(2) + "\n");
}

inline Scenario load_scenario(const std::string& path) {
  return scenario_from_json(nlohmann::json::parse(read_text_file(path)));
}

// --- Point clouds --------------------------------------------------------------

// ASCII PCD with one "x y z class instance" row per point.
inline std::string pcd_string(const std::vector<SemanticPoint>& points) {
  std::string out;
  out += "# .PCD v0.7 - Point Cloud Data file format\n";
  out += "VERSION 0.7\n";
  out += "FIELDS x y z class instance\n";
  out += "SIZE 8 8 8 1 4\n";
  out += "TYPE F F F U I\n";
  out += "COUNT 1 1 1 1 1\n";
  out += "WIDTH " + std::to_string(points.size()) + "\n";
  out += "HEIGHT 1\n";
  out += "VIEWPOINT 0 0 0 1 0 0 0\n";
  out += "POINTS " + std::to_string(points.size()) + "\n";
  out += "DATA ascii\n";
  for (const SemanticPoint& p : points) {
    out += detail::fmt_double(p.x) + " " + detail::fmt_double(p.y) + " " +
           detail::fmt_double(p.z) + " " + std::to_string(int(p.cls)) + " " +
           std::to_string(p.instance) + "\n";
  }
  return out;
}

inline std::vector<SemanticPoint> parse_pcd(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  size_t declared = 0;
  bool in_data = false;
  std::vector<SemanticPoint> points;
  while (std::getline(in, line)) {
    if (!in_data) {
      if (line.rfind("POINTS", 0) == 0)
        declared = std::stoull(line.substr(6));
      else if (line.rfind("DATA", 0) == 0) {
        if (line != "DATA ascii")
          throw std::runtime_error("pcd: only ascii data supported");
        in_data = true;
      }
      continue;
    }
    if (line.empty()) continue;
    std::istringstream row(line);
    SemanticPoint p;
    int cls = 0;
    if (!(row >> p.x >> p.y >> p.z >> cls >> p.instance))
      throw std::runtime_error("pcd: malformed point row '" + line + "'");
    if (cls < 0 || cls >= kNumClasses)
      throw std::runtime_error("pcd: class id out of range in '" + line + "'");
    p.cls = static_cast<uint8_t>(cls);
    points.push_back(p);
  }
  if (!in_data) throw std::runtime_error("pcd: missing DATA section");
  if (points.size() != declared)
    throw std::runtime_error("pcd: POINTS " + std::to_string(declared) +
                             " but parsed " + std::to_string(points.size()));
  return points;
}

inline void write_pcd(const std::vector<SemanticPoint>& points,
                      const std::string& path) {
  write_text_file(path, pcd_string(points));
}

inline std::vector<SemanticPoint> read_pcd(const std::string& path) {
  return parse_pcd(read_text_file(path));
}

// --- Depth maps ------------------------------------------------------------------

// 16-bit binary PGM of the bin indices, most significant byte first.
inline std::string pgm16_string(const DepthMap& m) {
  if (m.rows <= 0 || m.cols <= 0 ||
      m.bins.size() != static_cast<size_t>(m.rows) * m.cols)
    throw std::invalid_argument("pgm16: inconsistent depth map shape");
  std::string out = "P5\n" + std::to_string(m.cols) + " " + std::to_string(m.rows) +
                    "\n65535\n";
  out.reserve(out.size() + m.bins.size() * 2);
  for (uint16_t b : m.bins) {
    out.push_back(static_cast<char>(b >> 8));
    out.push_back(static_cast<char>(b & 0xff));
  }
  return out;
}

inline DepthMap parse_pgm16(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  int cols = 0, rows = 0, maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  if (magic != "P5") throw std::runtime_error("pgm16: not a binary PGM");
  if (cols <= 0 || rows <= 0) throw std::runtime_error("pgm16: bad dimensions");
  if (maxval != 65535) throw std::runtime_error("pgm16: expected 16-bit maxval");
  in.get();  // single whitespace byte after the header
  DepthMap m;
  m.rows = rows;
  m.cols = cols;
  m.bins.resize(static_cast<size_t>(rows) * cols);
  for (auto& b : m.bins) {
    const int hi = in.get(), lo = in.get();
    if (hi < 0 || lo < 0) throw std::runtime_error("pgm16: truncated pixel data");
    b = static_cast<uint16_t>((hi << 8) | lo);
  }
  return m;
}

inline void write_pgm16(const DepthMap& m, const std::string& path) {
  write_text_file(path, pgm16_string(m));
}

inline DepthMap read_pgm16(const std::string& path) {
  return parse_pgm16(read_text_file(path));
}

}  // namespace cohff
