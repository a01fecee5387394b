#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/grid.hpp"
#include "cohff/tensor.hpp"

namespace cohff {

// --- Voxel label confusion ---------------------------------------------------

struct ConfusionAccumulator {
  std::array<uint64_t, static_cast<size_t>(kNumClasses) * kNumClasses> counts{};

  void add(const SemanticVoxelGrid& gt, const SemanticVoxelGrid& pred) {
    if (!(gt.spec == pred.spec))
      throw std::invalid_argument("ConfusionAccumulator: grid spec mismatch");
    for (size_t i = 0; i < gt.labels.size(); ++i)
      ++counts[static_cast<size_t>(gt.labels[i]) * kNumClasses + pred.labels[i]];
  }

  uint64_t at(uint8_t gt, uint8_t pred) const {
    return counts[static_cast<size_t>(gt) * kNumClasses + pred];
  }

  uint64_t total() const {
    uint64_t n = 0;
    for (uint64_t c : counts) n += c;
    return n;
  }
};

// Per-class IoU is meaningful only where present[c]; a class absent from both
// grids has no defined ratio and is excluded from the mean rather than scored
// as zero. Vacuously perfect cases (nothing occupied anywhere) report 1.
struct IouReport {
  std::array<double, kNumClasses> iou{};
  std::array<bool, kNumClasses> present{};
  double miou = 1.0;       // mean over present classes 1..12
  double occupancy = 1.0;  // IoU of the binarized occupied masks
};

inline IouReport summarize(const ConfusionAccumulator& m) {
  IouReport r;
  std::array<uint64_t, kNumClasses> gt_n{}, pred_n{};
  for (int g = 0; g < kNumClasses; ++g)
    for (int p = 0; p < kNumClasses; ++p) {
      gt_n[g] += m.at(g, p);
      pred_n[p] += m.at(g, p);
    }
  double acc = 0.0;
  size_t n_present = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    const uint64_t tp = m.at(c, c);
    const uint64_t uni = gt_n[c] + pred_n[c] - tp;
    r.present[c] = uni > 0;
    if (!r.present[c]) continue;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    acc += r.iou[c];
    ++n_present;
  }
  r.miou = n_present ? acc / static_cast<double>(n_present) : 1.0;

  uint64_t tp_occ = 0;
  for (int g = 1; g < kNumClasses; ++g)
    for (int p = 1; p < kNumClasses; ++p) tp_occ += m.at(g, p);
  const uint64_t uni_occ = m.total() - m.at(0, 0);
  r.occupancy =
      uni_occ ? static_cast<double>(tp_occ) / static_cast<double>(uni_occ) : 1.0;
  return r;
}

inline IouReport class_iou(const SemanticVoxelGrid& pred,
                           const SemanticVoxelGrid& gt) {
  ConfusionAccumulator m;
  m.add(gt, pred);
  return summarize(m);
}

// --- Object extraction ---------------------------------------------------------

struct DetectedObject {
  std::vector<size_t> voxels;  // flat cell indices, ascending
  double confidence = 1.0;
};

// Face-connected (6-neighbour) components of vehicle-labeled voxels, dropping
// components below min_size. vehicle_prob, when given, is a per-voxel vehicle
// probability volume [X,Y,Z]; confidence is its mean over the component.
inline std::vector<DetectedObject> extract_objects(const SemanticVoxelGrid& g,
                                                   const Tensor* vehicle_prob = nullptr,
                                                   size_t min_size = 2) {
  const size_t n = g.labels.size();
  if (vehicle_prob && vehicle_prob->numel() != n)
    throw std::invalid_argument("extract_objects: probability volume mismatch");
  const size_t Y = g.spec.dims[1], Z = g.spec.dims[2];
  const size_t X = g.spec.dims[0];
  std::vector<char> seen(n, 0);
  std::vector<DetectedObject> out;
  std::vector<size_t> stack;
  for (size_t start = 0; start < n; ++start) {
    if (seen[start] || g.labels[start] != kVehicles) continue;
    DetectedObject obj;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const size_t i = stack.back();
      stack.pop_back();
      obj.voxels.push_back(i);
      const size_t x = i / (Y * Z), y = (i / Z) % Y, z = i % Z;
      const long dx[6] = {-1, 1, 0, 0, 0, 0};
      const long dy[6] = {0, 0, -1, 1, 0, 0};
      const long dz[6] = {0, 0, 0, 0, -1, 1};
      for (int k = 0; k < 6; ++k) {
        const long nx = static_cast<long>(x) + dx[k];
        const long ny = static_cast<long>(y) + dy[k];
        const long nz = static_cast<long>(z) + dz[k];
        if (nx < 0 || ny < 0 || nz < 0 || nx >= static_cast<long>(X) ||
            ny >= static_cast<long>(Y) || nz >= static_cast<long>(Z))
          continue;
        const size_t j = (static_cast<size_t>(nx) * Y + ny) * Z + nz;
        if (seen[j] || g.labels[j] != kVehicles) continue;
        seen[j] = 1;
        stack.push_back(j);
      }
    }
    if (obj.voxels.size() < min_size) continue;
    std::sort(obj.voxels.begin(), obj.voxels.end());
    if (vehicle_prob) {
      double s = 0.0;
      for (size_t i : obj.voxels) s += vehicle_prob->at(i);
      obj.confidence = s / static_cast<double>(obj.voxels.size());
    }
    out.push_back(std::move(obj));
  }
  return out;
}

// Ground-truth vehicle instances as voxel sets, ordered by instance id.
inline std::vector<std::vector<size_t>> vehicle_instances(
    const SemanticVoxelGrid& g) {
  std::map<int32_t, std::vector<size_t>> sets;
  for (size_t i = 0; i < g.labels.size(); ++i)
    if (g.labels[i] == kVehicles && g.instances[i] != 0)
      sets[g.instances[i]].push_back(i);
  std::vector<std::vector<size_t>> out;
  out.reserve(sets.size());
  for (auto& [id, v] : sets) out.push_back(std::move(v));
  return out;
}

// --- Average precision ---------------------------------------------------------

inline double voxel_set_iou(const std::vector<size_t>& a,
                            const std::vector<size_t>& b) {
  size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const size_t uni = a.size() + b.size() - inter;
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

// Detections ranked by confidence (ties: larger set first, then input order),
// greedily matched to the highest-IoU unmatched instance; a match counts iff
// its IoU reaches the threshold. Area under the precision-recall curve with
// precision made monotone right-to-left (all-point interpolation).
inline double average_precision(std::vector<DetectedObject> preds,
                                const std::vector<std::vector<size_t>>& gts,
                                double threshold) {
  if (gts.empty()) return 0.0;
  std::stable_sort(preds.begin(), preds.end(),
                   [](const DetectedObject& a, const DetectedObject& b) {
                     if (a.confidence != b.confidence)
                       return a.confidence > b.confidence;
                     return a.voxels.size() > b.voxels.size();
                   });
  std::vector<char> used(gts.size(), 0);
  std::vector<char> is_tp;
  is_tp.reserve(preds.size());
  for (const DetectedObject& p : preds) {
    double best = -1.0;
    size_t best_j = 0;
    for (size_t j = 0; j < gts.size(); ++j) {
      if (used[j]) continue;
      const double iou = voxel_set_iou(p.voxels, gts[j]);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    const bool tp = best >= threshold;
    if (tp) used[best_j] = 1;
    is_tp.push_back(tp ? 1 : 0);
  }

  const double npos = static_cast<double>(gts.size());
  std::vector<double> prec(is_tp.size()), rec(is_tp.size());
  size_t tp_sum = 0;
  for (size_t k = 0; k < is_tp.size(); ++k) {
    tp_sum += is_tp[k];
    prec[k] = static_cast<double>(tp_sum) / static_cast<double>(k + 1);
    rec[k] = static_cast<double>(tp_sum) / npos;
  }
  double ap = 0.0, run_max = 0.0;
  for (size_t k = prec.size(); k-- > 0;) {
    run_max = std::max(run_max, prec[k]);
    const double r_lo = (k == 0) ? 0.0 : rec[k - 1];
    ap += (rec[k] - r_lo) * run_max;
  }
  return ap;
}

// --- Bird's-eye-view IoU ----------------------------------------------------

// Column mask = OR over z of (label in classes); IoU of the pred mask against
// the gt mask. Height errors are invisible by construction. Two empty masks
// agree perfectly and give 1.
inline double bev_iou(const SemanticVoxelGrid& pred, const SemanticVoxelGrid& gt,
                      const std::vector<uint8_t>& classes) {
  if (!(pred.spec == gt.spec))
    throw std::invalid_argument("bev_iou: grid spec mismatch");
  std::array<bool, 256> want{};
  for (uint8_t c : classes) want[c] = true;
  const size_t X = pred.spec.dims[0], Y = pred.spec.dims[1], Z = pred.spec.dims[2];
  uint64_t inter = 0, uni = 0;
  for (size_t x = 0; x < X; ++x)
    for (size_t y = 0; y < Y; ++y) {
      bool mp = false, mg = false;
      for (size_t z = 0; z < Z; ++z) {
        const size_t i = (x * Y + y) * Z + z;
        mp = mp || want[pred.labels[i]];
        mg = mg || want[gt.labels[i]];
      }
      inter += (mp && mg) ? 1 : 0;
      uni += (mp || mg) ? 1 : 0;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

// The nine classes outside vehicles/road/sidewalk, aggregated in BEV tables.
inline const std::vector<uint8_t>& bev_other_classes() {
  static const std::vector<uint8_t> v = [] {
    std::vector<uint8_t> out;
    for (uint8_t c = 1; c < kNumClasses; ++c)
      if (c != kVehicles && c != static_cast<uint8_t>(SemanticClass::Road) &&
          c != static_cast<uint8_t>(SemanticClass::SideWalk))
        out.push_back(c);
    return out;
  }();
  return v;
}

// --- Result rows -------------------------------------------------------------

struct MetricsRow {
  std::string scenario;
  int agent = 0;
  double rate = 0.0;
  double gps_sigma = 0.0;
  IouReport iou;
  double ap50 = 0.0;
  double ap70 = 0.0;
  double bev_vehicles = 1.0;
  double bev_road = 1.0;
  double bev_sidewalk = 1.0;
  double bev_others = 1.0;
  uint64_t cv_bytes = 0;
};

namespace detail {

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

inline std::string metrics_csv_header() {
  std::string h = "scenario,agent,rate,gps_sigma";
  for (int c = 1; c < kNumClasses; ++c) h += std::string(",iou_") + class_name(c);
  h += ",miou,iou_occupancy,ap50,ap70";
  h += ",bev_vehicles,bev_road,bev_sidewalk,bev_others,cv_bytes";
  return h;
}

inline std::string metrics_csv_row(const MetricsRow& r) {
  std::string s = r.scenario;
  s += "," + std::to_string(r.agent);
  s += "," + detail::fmt6(r.rate);
  s += "," + detail::fmt6(r.gps_sigma);
  for (int c = 1; c < kNumClasses; ++c)
    s += "," + (r.iou.present[c] ? detail::fmt6(r.iou.iou[c]) : std::string("na"));
  s += "," + detail::fmt6(r.iou.miou);
  s += "," + detail::fmt6(r.iou.occupancy);
  s += "," + detail::fmt6(r.ap50);
  s += "," + detail::fmt6(r.ap70);
  s += "," + detail::fmt6(r.bev_vehicles);
  s += "," + detail::fmt6(r.bev_road);
  s += "," + detail::fmt6(r.bev_sidewalk);
  s += "," + detail::fmt6(r.bev_others);
  s += "," + std::to_string(r.cv_bytes);
  return s;
}

}  // namespace cohff
