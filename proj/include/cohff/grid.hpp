#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/pose.hpp"

namespace cohff {

// Voxel grid layout. Cell index of a point p is floor((p - origin) / voxel_size)
// per axis. Defaults give a 40 x 40 x 3.2 m volume at 0.4 m resolution centered
// on the ego frame.
struct GridSpec {
  Vec3 origin{-20.0, -20.0, 0.0};
  std::array<int, 3> dims{100, 100, 8};
  double voxel_size = 0.4;

  void validate() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw std::invalid_argument("GridSpec: dims must be positive");
    if (voxel_size <= 0.0)
      throw std::invalid_argument("GridSpec: voxel_size must be positive");
  }

  int num_cells() const { return dims[0] * dims[1] * dims[2]; }

  std::array<int, 3> cell_of(const Vec3& p) const {
    return {static_cast<int>(std::floor((p[0] - origin[0]) / voxel_size)),
            static_cast<int>(std::floor((p[1] - origin[1]) / voxel_size)),
            static_cast<int>(std::floor((p[2] - origin[2]) / voxel_size))};
  }

  bool contains(const std::array<int, 3>& c) const {
    return c[0] >= 0 && c[0] < dims[0] && c[1] >= 0 && c[1] < dims[1] &&
           c[2] >= 0 && c[2] < dims[2];
  }

  Vec3 cell_center(const std::array<int, 3>& c) const {
    return {origin[0] + (c[0] + 0.5) * voxel_size,
            origin[1] + (c[1] + 0.5) * voxel_size,
            origin[2] + (c[2] + 0.5) * voxel_size};
  }

  Vec3 cell_center(int x, int y, int z) const { return cell_center({x, y, z}); }

  bool contains_point(const Vec3& p) const { return contains(cell_of(p)); }

  int flat_index(int x, int y, int z) const { return (x * dims[1] + y) * dims[2] + z; }

  bool operator==(const GridSpec& o) const {
    return origin == o.origin && dims == o.dims && voxel_size == o.voxel_size;
  }
};

// Dense label grid: 0 = empty, 1..12 = semantic classes. instance > 0 only for
// Vehicles cells.
struct SemanticVoxelGrid {
  GridSpec spec;
  std::vector<uint8_t> labels;
  std::vector<int32_t> instances;

  SemanticVoxelGrid() = default;
  explicit SemanticVoxelGrid(const GridSpec& s)
      : spec(s), labels(s.num_cells(), 0), instances(s.num_cells(), 0) {}

  uint8_t label(int x, int y, int z) const { return labels[spec.flat_index(x, y, z)]; }
  int32_t instance(int x, int y, int z) const { return instances[spec.flat_index(x, y, z)]; }

  void set(int x, int y, int z, uint8_t cls, int32_t inst = 0) {
    const int i = spec.flat_index(x, y, z);
    labels[i] = cls;
    instances[i] = inst;
  }

  size_t occupied_count() const {
    size_t n = 0;
    for (uint8_t l : labels) n += (l != 0);
    return n;
  }

  bool operator==(const SemanticVoxelGrid& o) const {
    return spec == o.spec && labels == o.labels && instances == o.instances;
  }
};

struct SemanticPoint {
  double x = 0.0, y = 0.0, z = 0.0;
  uint8_t cls = 0;
  int32_t instance = 0;
};

struct VoxelizeResult {
  SemanticVoxelGrid grid;
  size_t skipped = 0;  // points outside the grid extent
};

// Majority-class voxelization. Per cell the label is the most frequent class
// among contained points, ties going to the lowest class id, and the instance
// is the most frequent instance among points of the winning class (same tie
// rule on the lower id).
inline VoxelizeResult voxelize_points(const std::vector<SemanticPoint>& points,
                                      const GridSpec& spec) {
  spec.validate();
  VoxelizeResult out;
  out.grid = SemanticVoxelGrid(spec);

  std::unordered_map<int, std::array<uint32_t, kNumClasses>> class_counts;
  for (const auto& p : points) {
    const auto c = spec.cell_of({p.x, p.y, p.z});
    if (!spec.contains(c)) {
      ++out.skipped;
      continue;
    }
    auto& counts = class_counts[spec.flat_index(c[0], c[1], c[2])];
    if (p.cls < kNumClasses) ++counts[p.cls];
  }

  std::unordered_map<int, uint8_t> winner;
  winner.reserve(class_counts.size());
  for (const auto& [idx, counts] : class_counts) {
    uint32_t best = 0;
    uint8_t best_cls = 0;
    for (int c = 0; c < kNumClasses; ++c) {
      if (counts[c] > best) {
        best = counts[c];
        best_cls = static_cast<uint8_t>(c);
      }
    }
    winner[idx] = best_cls;
    out.grid.labels[idx] = best_cls;
  }

  // Majority instance among points of the winning class.
  std::unordered_map<int64_t, uint32_t> instance_counts;
  for (const auto& p : points) {
    const auto c = spec.cell_of({p.x, p.y, p.z});
    if (!spec.contains(c)) continue;
    const int idx = spec.flat_index(c[0], c[1], c[2]);
    if (p.cls != winner[idx]) continue;
    instance_counts[(static_cast<int64_t>(idx) << 32) |
                    static_cast<uint32_t>(p.instance)]++;
  }
  std::unordered_map<int, std::pair<uint32_t, int32_t>> best_instance;
  for (const auto& [key, count] : instance_counts) {
    const int idx = static_cast<int>(key >> 32);
    const int32_t inst = static_cast<int32_t>(key & 0xffffffffu);
    auto it = best_instance.find(idx);
    if (it == best_instance.end() || count > it->second.first ||
        (count == it->second.first && inst < it->second.second)) {
      best_instance[idx] = {count, inst};
    }
  }
  for (const auto& [idx, ci] : best_instance) out.grid.instances[idx] = ci.second;

  return out;
}

}  // namespace cohff
