#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cohff/checkpoint.hpp"
#include "cohff/fusion.hpp"
#include "cohff/ground_truth.hpp"
#include "cohff/io.hpp"
#include "cohff/losses.hpp"
#include "cohff/metrics.hpp"
#include "cohff/wire.hpp"

namespace cohff {

// --- Run configuration ---------------------------------------------------------

enum class GtTier { Ego, Collaborative, Complete };

inline const char* to_string(GtTier t) {
  switch (t) {
    case GtTier::Ego: return "ego";
    case GtTier::Collaborative: return "collaborative";
    default: return "complete";
  }
}

inline GtTier tier_from_string(const std::string& s) {
  if (s == "ego") return GtTier::Ego;
  if (s == "collaborative") return GtTier::Collaborative;
  if (s == "complete") return GtTier::Complete;
  throw std::invalid_argument("config: unknown supervision tier '" + s + "'");
}

inline const SemanticVoxelGrid& tier_grid(const GtTiers& tiers, GtTier t) {
  switch (t) {
    case GtTier::Ego: return tiers.ego;
    case GtTier::Collaborative: return tiers.collaborative;
    default: return tiers.complete;
  }
}

struct TrainConfig {
  int occ_steps = 40;
  int seg_steps = 40;
  int joint_steps = 100;
  double lr = 0.05;
  double momentum = 0.9;
  double lambda_occ = 1.0;
  double lambda_seg = 1.0;
  double lambda_fused = 1.0;

  void validate() const {
    if (occ_steps < 0 || seg_steps < 0 || joint_steps < 0)
      throw std::invalid_argument("TrainConfig: step counts must be >= 0");
    if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
      throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    if (lambda_occ < 0.0 || lambda_seg < 0.0 || lambda_fused < 0.0)
      throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
  }
};

struct RunConfig {
  ScenarioConfig scenario;
  CohffConfig model;
  uint64_t model_seed = 1;
  double gps_sigma = 0.0;
  uint64_t gps_seed = 0;
  std::optional<uint64_t> budget_bytes;  // per-receiver cap; unset = unlimited
  GtTier supervision = GtTier::Collaborative;
  bool collaboration = true;
  std::string checkpoint;  // empty = fresh init from model_seed
  TrainConfig train;

  void validate() const {
    scenario.validate();
    model.validate();
    train.validate();
    if (gps_sigma < 0.0)
      throw std::invalid_argument("RunConfig: gps_sigma must be >= 0");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const char* where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw std::invalid_argument(std::string("config: ") + where +
                                " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " +
                                  where);
  }
}

inline GridSpec grid_from_json(const nlohmann::json& j) {
  check_keys(j, "grid", {"origin", "dims", "voxel_size"});
  GridSpec g;
  if (j.contains("origin")) g.origin = vec3_from_json(j["origin"]);
  if (j.contains("dims")) {
    if (!j["dims"].is_array() || j["dims"].size() != 3)
      throw std::invalid_argument("config: grid dims must have 3 entries");
    for (int k = 0; k < 3; ++k) g.dims[k] = j["dims"][k].get<int>();
  }
  if (j.contains("voxel_size")) g.voxel_size = j["voxel_size"].get<double>();
  return g;
}

inline nlohmann::json grid_to_json(const GridSpec& g) {
  return {{"origin", json_vec3(g.origin)},
          {"dims", {g.dims[0], g.dims[1], g.dims[2]}},
          {"voxel_size", g.voxel_size}};
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, "config",
                     {"scenario", "model", "train", "model_seed", "gps_sigma",
                      "gps_seed", "budget_bytes", "supervision_tier",
                      "collaboration", "checkpoint"});
  RunConfig c;
  if (j.contains("scenario")) {
    const auto& js = j["scenario"];
    detail::check_keys(js, "scenario",
                       {"seed", "template", "agents", "extent", "objects",
                        "comm_range", "grid"});
    c.scenario.seed = js.value("seed", c.scenario.seed);
    c.scenario.template_name = js.value("template", c.scenario.template_name);
    c.scenario.agents = js.value("agents", c.scenario.agents);
    c.scenario.extent = js.value("extent", c.scenario.extent);
    c.scenario.objects = js.value("objects", c.scenario.objects);
    c.scenario.comm_range = js.value("comm_range", c.scenario.comm_range);
    if (js.contains("grid")) c.scenario.grid = detail::grid_from_json(js["grid"]);
  }
  if (j.contains("model")) {
    const auto& jm = j["model"];
    detail::check_keys(
        jm, "model",
        {"feat", "feat_img", "heads", "points", "pillar_refs", "occ_feat",
         "occ_blocks", "occ_kernel", "fusion_blocks", "fusion_kernel",
         "keep_rate", "plane_rounds", "include_ego_verticals", "angular_res_deg",
         "depth_noise_sigma", "depth_noise_seed"});
    c.model.seg.feat = jm.value("feat", c.model.seg.feat);
    c.model.seg.feat_img = jm.value("feat_img", c.model.seg.feat_img);
    c.model.seg.attn.heads = jm.value("heads", c.model.seg.attn.heads);
    c.model.seg.attn.points = jm.value("points", c.model.seg.attn.points);
    c.model.seg.attn.pillar_refs =
        jm.value("pillar_refs", c.model.seg.attn.pillar_refs);
    c.model.occ.feat = jm.value("occ_feat", c.model.occ.feat);
    c.model.occ.blocks = jm.value("occ_blocks", c.model.occ.blocks);
    c.model.occ.kernel = jm.value("occ_kernel", c.model.occ.kernel);
    c.model.fusion_blocks = jm.value("fusion_blocks", c.model.fusion_blocks);
    c.model.fusion_kernel = jm.value("fusion_kernel", c.model.fusion_kernel);
    c.model.keep_rate = jm.value("keep_rate", c.model.keep_rate);
    c.model.plane_rounds = jm.value("plane_rounds", c.model.plane_rounds);
    c.model.include_ego_verticals =
        jm.value("include_ego_verticals", c.model.include_ego_verticals);
    c.model.raycast.angular_res_deg =
        jm.value("angular_res_deg", c.model.raycast.angular_res_deg);
    c.model.depth_noise_sigma =
        jm.value("depth_noise_sigma", c.model.depth_noise_sigma);
    c.model.depth_noise_seed =
        jm.value("depth_noise_seed", c.model.depth_noise_seed);
  }
  if (j.contains("train")) {
    const auto& jt = j["train"];
    detail::check_keys(jt, "train",
                       {"occ_steps", "seg_steps", "joint_steps", "lr", "momentum",
                        "lambda_occ", "lambda_seg", "lambda_fused"});
    c.train.occ_steps = jt.value("occ_steps", c.train.occ_steps);
    c.train.seg_steps = jt.value("seg_steps", c.train.seg_steps);
    c.train.joint_steps = jt.value("joint_steps", c.train.joint_steps);
    c.train.lr = jt.value("lr", c.train.lr);
    c.train.momentum = jt.value("momentum", c.train.momentum);
    c.train.lambda_occ = jt.value("lambda_occ", c.train.lambda_occ);
    c.train.lambda_seg = jt.value("lambda_seg", c.train.lambda_seg);
    c.train.lambda_fused = jt.value("lambda_fused", c.train.lambda_fused);
  }
  c.model_seed = j.value("model_seed", c.model_seed);
  c.gps_sigma = j.value("gps_sigma", c.gps_sigma);
  c.gps_seed = j.value("gps_seed", c.gps_seed);
  if (j.contains("budget_bytes") && !j["budget_bytes"].is_null())
    c.budget_bytes = j["budget_bytes"].get<uint64_t>();
  if (j.contains("supervision_tier"))
    c.supervision = tier_from_string(j["supervision_tier"].get<std::string>());
  c.collaboration = j.value("collaboration", c.collaboration);
  c.checkpoint = j.value("checkpoint", c.checkpoint);
  c.validate();
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["scenario"] = {{"seed", c.scenario.seed},
                   {"template", c.scenario.template_name},
                   {"agents", c.scenario.agents},
                   {"extent", c.scenario.extent},
                   {"objects", c.scenario.objects},
                   {"comm_range", c.scenario.comm_range},
                   {"grid", detail::grid_to_json(c.scenario.grid)}};
  j["model"] = {{"feat", c.model.seg.feat},
                {"feat_img", c.model.seg.feat_img},
                {"heads", c.model.seg.attn.heads},
                {"points", c.model.seg.attn.points},
                {"pillar_refs", c.model.seg.attn.pillar_refs},
                {"occ_feat", c.model.occ.feat},
                {"occ_blocks", c.model.occ.blocks},
                {"occ_kernel", c.model.occ.kernel},
                {"fusion_blocks", c.model.fusion_blocks},
                {"fusion_kernel", c.model.fusion_kernel},
                {"keep_rate", c.model.keep_rate},
                {"plane_rounds", c.model.plane_rounds},
                {"include_ego_verticals", c.model.include_ego_verticals},
                {"angular_res_deg", c.model.raycast.angular_res_deg},
                {"depth_noise_sigma", c.model.depth_noise_sigma},
                {"depth_noise_seed", c.model.depth_noise_seed}};
  j["train"] = {{"occ_steps", c.train.occ_steps},
                {"seg_steps", c.train.seg_steps},
                {"joint_steps", c.train.joint_steps},
                {"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"lambda_occ", c.train.lambda_occ},
                {"lambda_seg", c.train.lambda_seg},
                {"lambda_fused", c.train.lambda_fused}};
  j["model_seed"] = c.model_seed;
  j["gps_sigma"] = c.gps_sigma;
  j["gps_seed"] = c.gps_seed;
  if (c.budget_bytes)
    j["budget_bytes"] = *c.budget_bytes;
  else
    j["budget_bytes"] = nullptr;
  j["supervision_tier"] = to_string(c.supervision);
  j["collaboration"] = c.collaboration;
  j["checkpoint"] = c.checkpoint;
  return j;
}

// --- Model construction --------------------------------------------------------

struct ModelBundle {
  ParamStore ps;
  CohffModel model;
};

inline ModelBundle make_run_model(const RunConfig& cfg) {
  cfg.validate();
  ModelBundle b;
  Rng rng(cfg.model_seed);
  b.model = CohffModel::create(b.ps, "cohff", cfg.scenario.grid, cfg.model, rng);
  if (!cfg.checkpoint.empty()) load_checkpoint(b.ps, cfg.checkpoint);
  return b;
}

// --- Evaluation ----------------------------------------------------------------

// Softmax probability of the vehicle class per voxel, plain values only.
inline Tensor vehicle_probability(const Tensor& logits) {
  if (logits.ndim() != 4 || logits.dim(3) != static_cast<size_t>(kNumClasses))
    throw std::invalid_argument("vehicle_probability: logits must be [X,Y,Z,C]");
  NoGradScope off;
  const size_t cells = logits.numel() / kNumClasses;
  Tensor out({logits.dim(0), logits.dim(1), logits.dim(2)});
  for (size_t i = 0; i < cells; ++i) {
    const double* row = logits.values().data() + i * kNumClasses;
    double mx = row[0];
    for (int c = 1; c < kNumClasses; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < kNumClasses; ++c) denom += std::exp(row[c] - mx);
    out.at(i) = std::exp(row[kVehicles] - mx) / denom;
  }
  return out;
}

inline MetricsRow evaluate_prediction(const std::string& scenario_label, int agent,
                                      double rate, double gps_sigma,
                                      const SemanticOccupancyPrediction& pred,
                                      const SemanticVoxelGrid& gt,
                                      uint64_t cv_bytes) {
  MetricsRow row;
  row.scenario = scenario_label;
  row.agent = agent;
  row.rate = rate;
  row.gps_sigma = gps_sigma;
  row.cv_bytes = cv_bytes;

  ConfusionAccumulator conf;
  conf.add(gt, pred.labels);
  row.iou = summarize(conf);

  const Tensor vp = vehicle_probability(pred.logits);
  const auto detections = extract_objects(pred.labels, &vp);
  const auto instances = vehicle_instances(gt);
  row.ap50 = average_precision(detections, instances, 0.5);
  row.ap70 = average_precision(detections, instances, 0.7);

  row.bev_vehicles = bev_iou(pred.labels, gt, {kVehicles});
  row.bev_road =
      bev_iou(pred.labels, gt, {static_cast<uint8_t>(SemanticClass::Road)});
  row.bev_sidewalk =
      bev_iou(pred.labels, gt, {static_cast<uint8_t>(SemanticClass::SideWalk)});
  row.bev_others = bev_iou(pred.labels, gt, bev_other_classes());
  return row;
}

// --- Scenario execution --------------------------------------------------------

struct AgentResult {
  int agent_id = 0;
  SemanticOccupancyPrediction pred;
  GtTiers tiers;
  uint64_t cv_bytes = 0;  // payload volume received after any budget cut
  std::vector<std::string> decode_log;
  MetricsRow row;
};

struct ScenarioResult {
  Scenario scene;
  std::vector<AgentResult> agents;
  uint64_t total_cv = 0;
  std::string csv;
};

// Test hook on the wire path; may mutate the encoded bytes in flight.
using MessageTap =
    std::function<void(int sender, int receiver, std::vector<uint8_t>& bytes)>;

namespace detail {

template <typename Fn>
inline void parallel_agents(size_t n, Fn&& fn) {
  std::vector<std::exception_ptr> errs(n);
  std::vector<std::thread> pool;
  pool.reserve(n);
  for (size_t i = 0; i < n; ++i)
    pool.emplace_back([&errs, &fn, i] {
      try {
        fn(i);
      } catch (...) {
        errs[i] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// One frame of the collaborative loop: every agent runs its task networks in
// parallel, meets at the message exchange, then fuses and predicts in parallel.
inline ScenarioResult run_scenario(const RunConfig& cfg, const CohffModel& model,
                                   const MessageTap& tap = {}) {
  cfg.validate();
  if (!(model.grid == cfg.scenario.grid))
    throw std::invalid_argument("run_scenario: model grid does not match config");
  ScenarioResult out;
  out.scene = generate_scenario(cfg.scenario);
  const Scenario& scene = out.scene;
  const size_t n = scene.agents.size();
  out.agents.resize(n);

  GtConfig gcfg;
  gcfg.raycast = model.cfg.raycast;
  std::vector<AgentStep> steps(n);
  detail::parallel_agents(n, [&](size_t i) {
    steps[i] = cohff_phase_a(model, scene, scene.agents[i]);
    out.agents[i].agent_id = scene.agents[i].id;
    out.agents[i].tiers = build_gt_tiers(scene, scene.agents[i].id, gcfg);
  });

  std::vector<std::vector<InboundPlanes>> inbox(n);
  if (cfg.collaboration && n > 1) {
    std::vector<Pose> tx_pose(n);
    for (size_t j = 0; j < n; ++j)
      tx_pose[j] = cfg.gps_sigma > 0.0
                       ? perturb_pose_gps(
                             scene.agents[j].pose, cfg.gps_sigma,
                             cfg.gps_seed + static_cast<uint64_t>(scene.agents[j].id))
                       : scene.agents[j].pose;
    std::vector<size_t> index_of;
    for (size_t j = 0; j < n; ++j)
      index_of.resize(std::max<size_t>(index_of.size(), scene.agents[j].id + 1));
    for (size_t j = 0; j < n; ++j) index_of[scene.agents[j].id] = j;

    for (size_t i = 0; i < n; ++i) {
      std::vector<AgentShare> shares;
      for (int nb : scene.neighbors(scene.agents[i].id)) {
        const size_t j = index_of[nb];
        AgentShare s = to_share(steps[j]);
        s.pose = tx_pose[j];
        shares.push_back(std::move(s));
      }
      if (cfg.budget_bytes) {
        enforce_budget(shares, CommBudget{*cfg.budget_bytes});
        uint64_t total = 0;
        for (const AgentShare& s : shares)
          total += payload_bytes(s.xz.payload) + payload_bytes(s.yz.payload);
        if (total > *cfg.budget_bytes)
          throw std::logic_error("run_scenario: budget law violated (" +
                                 std::to_string(total) + " > " +
                                 std::to_string(*cfg.budget_bytes) + " bytes)");
      }
      for (const AgentShare& s : shares) {
        const V2XMessage msg = make_message(s.sender, s.pose, s.xz, s.yz);
        out.agents[i].cv_bytes += message_cv(msg);
        std::vector<uint8_t> bytes = encode_message(msg);
        if (tap) tap(static_cast<int>(s.sender), scene.agents[i].id, bytes);
        const DecodeResult dr = decode_message(bytes);
        if (dr.status != DecodeStatus::Ok) {
          out.agents[i].decode_log.push_back(
              "dropped message from " + std::to_string(s.sender) + ": " +
              to_string(dr.status));
          continue;
        }
        inbox[i].push_back(inbound_from_message(dr.msg));
      }
    }
  }

  detail::parallel_agents(n, [&](size_t i) {
    out.agents[i].pred =
        cohff_phase_b(model, scene.agents[i], steps[i], inbox[i]);
  });

  out.csv = metrics_csv_header() + "\n";
  for (size_t i = 0; i < n; ++i) {
    AgentResult& r = out.agents[i];
    r.row = evaluate_prediction(cfg.scenario.template_name, r.agent_id,
                                model.cfg.keep_rate, cfg.gps_sigma, r.pred,
                                tier_grid(r.tiers, cfg.supervision), r.cv_bytes);
    out.csv += metrics_csv_row(r.row) + "\n";
    out.total_cv += r.cv_bytes;
  }
  return out;
}

inline ScenarioResult run_scenario(const RunConfig& cfg) {
  const ModelBundle b = make_run_model(cfg);
  return run_scenario(cfg, b.model);
}

// --- Toy training --------------------------------------------------------------

// Majority label of each plane cell over the collapsed axis, empty cells
// ignored, ties to the lower class id.
inline std::vector<uint8_t> plane_majority_labels(const SemanticVoxelGrid& g,
                                                  PlaneAxis axis) {
  const auto d = plane_dims(axis, g.spec);
  std::vector<uint8_t> out(d[0] * d[1], 0);
  const int X = g.spec.dims[0], Y = g.spec.dims[1], Z = g.spec.dims[2];
  for (size_t h = 0; h < d[0]; ++h)
    for (size_t w = 0; w < d[1]; ++w) {
      std::array<int, kNumClasses> count{};
      const int collapse = axis == PlaneAxis::XY ? Z : axis == PlaneAxis::XZ ? Y : X;
      for (int k = 0; k < collapse; ++k) {
        uint8_t l = 0;
        if (axis == PlaneAxis::XY)
          l = g.label(static_cast<int>(h), static_cast<int>(w), k);
        else if (axis == PlaneAxis::XZ)
          l = g.label(static_cast<int>(h), k, static_cast<int>(w));
        else
          l = g.label(k, static_cast<int>(h), static_cast<int>(w));
        if (l != kEmpty) ++count[l];
      }
      int best = 0, best_n = 0;
      for (int c = 1; c < kNumClasses; ++c)
        if (count[c] > best_n) {
          best = c;
          best_n = count[c];
        }
      out[h * d[1] + w] = static_cast<uint8_t>(best);
    }
  return out;
}

struct StageCurve {
  std::string stage;
  // one entry per step (value before the update) plus one final value; empty
  // when the stage ran zero steps
  std::vector<double> losses;
};

struct TrainResult {
  std::vector<StageCurve> curves;
  std::string loss_csv;  // stage,step,loss
};

namespace detail {

inline void reset_momentum(ParamStore& ps) {
  for (const auto& p : ps.all()) p->momentum.clear();
}

}  // namespace detail

// Three-stage schedule on one generated scene: the occupancy net alone, the
// segmentation planes alone, then the fused pipeline end to end. Scene
// geometry, depth embeddings, and supervision targets are cached up front;
// only parameter-dependent passes run per step.
class ToyTrainer {
 public:
  explicit ToyTrainer(const RunConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    scene_ = generate_scenario(cfg_.scenario);
    Rng rng(cfg_.model_seed);
    model_ = CohffModel::create(ps_, "cohff", cfg_.scenario.grid, cfg_.model, rng);
    if (!cfg_.checkpoint.empty()) load_checkpoint(ps_, cfg_.checkpoint);
    const size_t F = cfg_.model.seg.feat;
    for (int p = 0; p < 3; ++p) {
      const std::string tag = "aux.plane" + std::to_string(p);
      aux_w_[p] = make_linear_weight(aux_ps_, tag + ".w", F, kNumClasses, rng);
      aux_b_[p] = make_zeros(aux_ps_, tag + ".b", {static_cast<size_t>(kNumClasses)});
    }

    GtConfig gcfg;
    gcfg.raycast = cfg_.model.raycast;
    const SensorRig rig = SensorRig::camera_quad();
    std::vector<Pose> cam_poses;
    for (const RigMount& m : rig.mounts) cam_poses.push_back(m.offset);
    for (const Agent& a : scene_.agents) {
      AgentCache c;
      c.agent = a;
      const SensorScan scan =
          cast_semantic_rays(rig, a.pose, scene_, a.body_instance, cfg_.model.raycast);
      c.obs = render_observations(scan);
      c.mounts = rig.mounts;
      DepthOracleConfig dcfg;
      dcfg.raycast = cfg_.model.raycast;
      dcfg.noise_sigma = cfg_.model.depth_noise_sigma;
      dcfg.noise_seed = cfg_.model.depth_noise_seed + static_cast<uint64_t>(a.id);
      {
        NoGradScope off;
        c.embedded =
            embed_depth_to_voxels(depth_maps(scene_, a, rig, dcfg), cam_poses,
                                  model_.grid);
      }
      c.tiers = build_gt_tiers(scene_, a.id, gcfg);
      const SemanticVoxelGrid& sup = tier_grid(c.tiers, cfg_.supervision);
      c.occ_targets = occupancy_targets(sup);
      c.voxel_labels = sup.labels;
      c.voxel_weights = inverse_frequency_weights(sup.labels, kNumClasses);
      const PlaneAxis axes[3] = {PlaneAxis::XY, PlaneAxis::XZ, PlaneAxis::YZ};
      for (int p = 0; p < 3; ++p) {
        c.plane_labels[p] = plane_majority_labels(sup, axes[p]);
        c.plane_weights[p] =
            inverse_frequency_weights(c.plane_labels[p], kNumClasses);
      }
      caches_.push_back(std::move(c));
    }
    for (const AgentCache& c : caches_) {
      std::vector<size_t> nbrs;
      for (int id : scene_.neighbors(c.agent.id))
        for (size_t j = 0; j < caches_.size(); ++j)
          if (caches_[j].agent.id == id) nbrs.push_back(j);
      neighbor_idx_.push_back(std::move(nbrs));
    }
  }

  TrainResult train() {
    TrainResult r;
    r.curves.push_back(
        {"occupancy",
         run_stage("occupancy", cfg_.train.occ_steps, [this] { return occ_loss(); })});
    r.curves.push_back({"segmentation",
                        run_stage("segmentation", cfg_.train.seg_steps,
                                  [this] { return seg_loss(); })});
    r.curves.push_back(
        {"joint",
         run_stage("joint", cfg_.train.joint_steps, [this] { return joint_loss(); })});
    r.loss_csv = "stage,step,loss\n";
    for (const StageCurve& c : r.curves)
      for (size_t s = 0; s < c.losses.size(); ++s)
        r.loss_csv += c.stage + "," + std::to_string(s) + "," +
                      detail::fmt_double(c.losses[s]) + "\n";
    return r;
  }

  const Scenario& scene() const { return scene_; }
  const CohffModel& model() const { return model_; }
  ParamStore& params() { return ps_; }
  const RunConfig& config() const { return cfg_; }

 private:
  struct AgentCache {
    Agent agent;
    std::vector<Tensor> obs;
    std::vector<RigMount> mounts;
    Tensor embedded;
    GtTiers tiers;
    std::vector<uint8_t> occ_targets;
    std::vector<uint8_t> voxel_labels;
    std::vector<double> voxel_weights;
    std::array<std::vector<uint8_t>, 3> plane_labels;
    std::array<std::vector<double>, 3> plane_weights;
  };

  std::array<FeaturePlane, 3> plane_forward(const AgentCache& c) const {
    std::vector<CameraView> views(c.obs.size());
    for (size_t i = 0; i < c.obs.size(); ++i) {
      views[i].features = model_.seg.backbone.forward(c.obs[i]);
      views[i].pose = c.mounts[i].offset;
      views[i].mount = c.mounts[i];
      views[i].res_deg = cfg_.model.raycast.angular_res_deg;
    }
    return model_.seg.planes(views);
  }

  Tensor occ_loss() {
    Tensor total;
    bool first = true;
    for (const AgentCache& c : caches_) {
      Tensor probs = model_.occ.probabilities(model_.occ.features(c.embedded));
      Tensor l = focal_loss(probs, c.occ_targets);
      total = first ? l : add(total, l);
      first = false;
    }
    return scale(total, cfg_.train.lambda_occ / static_cast<double>(caches_.size()));
  }

  Tensor seg_loss() {
    Tensor total;
    bool first = true;
    for (const AgentCache& c : caches_) {
      const auto planes = plane_forward(c);
      for (int p = 0; p < 3; ++p) {
        const Tensor& pl = planes[p].data;
        Tensor logits = linear(
            reshape(pl, {pl.dim(0) * pl.dim(1), pl.dim(2)}), aux_w_[p], aux_b_[p]);
        Tensor l =
            weighted_cross_entropy(logits, c.plane_labels[p], c.plane_weights[p]);
        total = first ? l : add(total, l);
        first = false;
      }
    }
    return scale(total,
                 cfg_.train.lambda_seg / static_cast<double>(3 * caches_.size()));
  }

  Tensor joint_loss() {
    std::vector<AgentStep> steps(caches_.size());
    for (size_t i = 0; i < caches_.size(); ++i) {
      const AgentCache& c = caches_[i];
      const auto planes = plane_forward(c);
      AgentStep a;
      a.agent_id = c.agent.id;
      a.pose = c.agent.pose;
      a.pxy = planes[0].data;
      a.pxz = planes[1].data;
      a.pyz = planes[2].data;
      a.occ_features = model_.occ.features(c.embedded);
      a.sxz = apply_mask_and_sparsify(a.pxz, PlaneAxis::XZ, model_.mask.xz,
                                      cfg_.model.keep_rate);
      a.syz = apply_mask_and_sparsify(a.pyz, PlaneAxis::YZ, model_.mask.yz,
                                      cfg_.model.keep_rate);
      steps[i] = std::move(a);
    }
    Tensor total;
    bool first = true;
    for (size_t i = 0; i < caches_.size(); ++i) {
      const AgentCache& c = caches_[i];
      std::vector<InboundPlanes> inbox;
      if (cfg_.collaboration)
        for (size_t j : neighbor_idx_[i])
          inbox.push_back(inbound_from_share(to_share(steps[j])));
      const SemanticOccupancyPrediction pred =
          cohff_phase_b(model_, c.agent, steps[i], inbox);
      Tensor logits = reshape(pred.logits, {c.voxel_labels.size(),
                                            static_cast<size_t>(kNumClasses)});
      Tensor l = weighted_cross_entropy(logits, c.voxel_labels, c.voxel_weights);
      total = first ? l : add(total, l);
      first = false;
    }
    return scale(total,
                 cfg_.train.lambda_fused / static_cast<double>(caches_.size()));
  }

  std::vector<double> run_stage(const char* name, int steps,
                                const std::function<Tensor()>& loss_fn) {
    std::vector<double> curve;
    if (steps <= 0) return curve;
    for (int s = 0; s < steps; ++s) {
      ps_.zero_grads();
      aux_ps_.zero_grads();
      TapeScope scope;
      Tensor loss = loss_fn();
      const double v = loss.item();
      if (!std::isfinite(v))
        throw std::runtime_error(std::string("training diverged: ") + name +
                                 " loss not finite at step " + std::to_string(s));
      backward(loss);
      sgd_step(ps_, cfg_.train.lr, cfg_.train.momentum);
      sgd_step(aux_ps_, cfg_.train.lr, cfg_.train.momentum);
      curve.push_back(v);
    }
    {
      NoGradScope off;
      const double v = loss_fn().item();
      if (!std::isfinite(v))
        throw std::runtime_error(std::string("training diverged: ") + name +
                                 " loss not finite at step " + std::to_string(steps));
      curve.push_back(v);
    }
    detail::reset_momentum(ps_);
    detail::reset_momentum(aux_ps_);
    return curve;
  }

  RunConfig cfg_;
  Scenario scene_;
  ParamStore ps_;       // model parameters, checkpointable
  ParamStore aux_ps_;   // training-only per-plane classifier heads
  CohffModel model_;
  std::array<Tensor, 3> aux_w_, aux_b_;
  std::vector<AgentCache> caches_;
  std::vector<std::vector<size_t>> neighbor_idx_;
};

// --- Sweeps and reporting ------------------------------------------------------

enum class SweepVariable { Rate, GpsSigma, Budget };

inline const char* to_string(SweepVariable v) {
  switch (v) {
    case SweepVariable::Rate: return "rate";
    case SweepVariable::GpsSigma: return "gps";
    default: return "budget";
  }
}

inline SweepVariable sweep_variable_from_string(const std::string& s) {
  if (s == "rate") return SweepVariable::Rate;
  if (s == "gps") return SweepVariable::GpsSigma;
  if (s == "budget") return SweepVariable::Budget;
  throw std::invalid_argument("sweep: unknown variable '" + s + "'");
}

struct SweepConfig {
  RunConfig base;                // checkpoint must be set
  SweepVariable variable = SweepVariable::Rate;
  std::vector<double> values;    // empty = variable default grid
  std::vector<uint64_t> seeds;   // empty = base scenario seed
};

struct SweepRow {
  double value = 0.0;
  uint64_t seed = 0;
  MetricsRow metrics;  // pooled over agents
};

struct SweepResult {
  SweepVariable variable = SweepVariable::Rate;
  std::vector<SweepRow> rows;
  std::string csv;
};

namespace detail {

// Pool per-agent results into one row: confusions summed, detection and BEV
// scores averaged, volumes added.
inline MetricsRow pool_agents(const std::string& scenario_label, double rate,
                              double gps_sigma, GtTier tier,
                              const std::vector<AgentResult>& agents) {
  MetricsRow row;
  row.scenario = scenario_label;
  row.agent = -1;
  row.rate = rate;
  row.gps_sigma = gps_sigma;
  row.bev_vehicles = row.bev_road = row.bev_sidewalk = row.bev_others = 0.0;
  ConfusionAccumulator conf;
  for (const AgentResult& a : agents) {
    conf.add(tier_grid(a.tiers, tier), a.pred.labels);
    row.ap50 += a.row.ap50;
    row.ap70 += a.row.ap70;
    row.bev_vehicles += a.row.bev_vehicles;
    row.bev_road += a.row.bev_road;
    row.bev_sidewalk += a.row.bev_sidewalk;
    row.bev_others += a.row.bev_others;
    row.cv_bytes += a.cv_bytes;
  }
  row.iou = summarize(conf);
  const double inv = 1.0 / static_cast<double>(agents.size());
  row.ap50 *= inv;
  row.ap70 *= inv;
  row.bev_vehicles *= inv;
  row.bev_road *= inv;
  row.bev_sidewalk *= inv;
  row.bev_others *= inv;
  return row;
}

// Expected payload volume of one receiver inbox at a uniform rate.
inline uint64_t predicted_inbox_bytes(const GridSpec& g, size_t feat, double rate,
                                      size_t senders) {
  const auto dxz = plane_dims(PlaneAxis::XZ, g);
  const auto dyz = plane_dims(PlaneAxis::YZ, g);
  const uint64_t per_sender =
      static_cast<uint64_t>(kept_cells(dxz[0] * dxz[1], rate) +
                            kept_cells(dyz[0] * dyz[1], rate)) *
      feat * 4;
  return per_sender * senders;
}

}  // namespace detail

inline SweepResult sweep(const SweepConfig& sc) {
  if (sc.base.checkpoint.empty())
    throw std::invalid_argument("sweep: a trained checkpoint is required");
  std::vector<double> values = sc.values;
  if (values.empty()) {
    if (sc.variable == SweepVariable::Rate)
      values = {0.0, 0.5, 0.8, 0.95, 0.99};
    else if (sc.variable == SweepVariable::GpsSigma)
      values = {0.0, 0.2, 0.4, 0.6};
    else
      throw std::invalid_argument("sweep: budget sweep needs explicit values");
  }
  std::vector<uint64_t> seeds = sc.seeds;
  if (seeds.empty()) seeds = {sc.base.scenario.seed};

  SweepResult out;
  out.variable = sc.variable;
  for (const double v : values) {
    for (const uint64_t seed : seeds) {
      RunConfig rc = sc.base;
      rc.scenario.seed = seed;
      rc.gps_seed = seed;
      std::string label = rc.scenario.template_name + ":seed=" +
                          std::to_string(seed);
      if (sc.variable == SweepVariable::Rate) {
        rc.model.keep_rate = v;
      } else if (sc.variable == SweepVariable::GpsSigma) {
        rc.gps_sigma = v;
      } else {
        rc.budget_bytes = static_cast<uint64_t>(v);
        label += ":B=" + detail::fmt_double(v);
      }
      const ModelBundle b = make_run_model(rc);
      const ScenarioResult res = run_scenario(rc, b.model);

      if (sc.variable == SweepVariable::Rate && !rc.budget_bytes) {
        for (const AgentResult& a : res.agents) {
          const size_t senders =
              res.scene.neighbors(a.agent_id).size() * (rc.collaboration ? 1 : 0);
          const uint64_t want = detail::predicted_inbox_bytes(
              rc.scenario.grid, rc.model.seg.feat, v, senders);
          if (a.cv_bytes != want)
            throw std::logic_error(
                "sweep: communication volume " + std::to_string(a.cv_bytes) +
                " does not match the closed form " + std::to_string(want));
        }
      }
      SweepRow row;
      row.value = v;
      row.seed = seed;
      row.metrics = detail::pool_agents(label, rc.model.keep_rate, rc.gps_sigma,
                                        rc.supervision, res.agents);
      out.rows.push_back(std::move(row));
    }
  }
  out.csv = metrics_csv_header() + "\n";
  for (const SweepRow& r : out.rows) out.csv += metrics_csv_row(r.metrics) + "\n";
  return out;
}

struct ReportFiles {
  std::string csv_path;
  std::vector<std::string> plot_paths;
};

// CSV plus one (x, y, series) TSV per metric, ready for external plotting.
inline ReportFiles report(const SweepResult& r, const std::string& out_dir) {
  if (r.rows.empty()) throw std::invalid_argument("report: empty sweep result");
  std::filesystem::create_directories(out_dir);
  ReportFiles files;
  files.csv_path = (std::filesystem::path(out_dir) / "sweep.csv").string();
  write_text_file(files.csv_path, r.csv);

  struct Axis {
    const char* name;
    std::function<std::string(const SweepRow&)> value;
  };
  const std::vector<Axis> axes = {
      {"miou", [](const SweepRow& s) { return detail::fmt6(s.metrics.iou.miou); }},
      {"iou_occupancy",
       [](const SweepRow& s) { return detail::fmt6(s.metrics.iou.occupancy); }},
      {"ap50", [](const SweepRow& s) { return detail::fmt6(s.metrics.ap50); }},
      {"ap70", [](const SweepRow& s) { return detail::fmt6(s.metrics.ap70); }},
      {"bev_vehicles",
       [](const SweepRow& s) { return detail::fmt6(s.metrics.bev_vehicles); }},
      {"bev_road", [](const SweepRow& s) { return detail::fmt6(s.metrics.bev_road); }},
      {"bev_sidewalk",
       [](const SweepRow& s) { return detail::fmt6(s.metrics.bev_sidewalk); }},
      {"bev_others",
       [](const SweepRow& s) { return detail::fmt6(s.metrics.bev_others); }},
      {"cv_bytes",
       [](const SweepRow& s) { return std::to_string(s.metrics.cv_bytes); }},
  };
  for (const Axis& ax : axes) {
    std::string tsv = "x\ty\tseries\n";
    for (const SweepRow& row : r.rows)
      tsv += detail::fmt_double(row.value) + "\t" + ax.value(row) + "\tseed=" +
             std::to_string(row.seed) + "\n";
    const std::string path =
        (std::filesystem::path(out_dir) / ("plot_" + std::string(ax.name) + ".tsv"))
            .string();
    write_text_file(path, tsv);
    files.plot_paths.push_back(path);
  }
  return files;
}

// Rebuilds the sweep table from its CSV emission (the report CLI entry point).
inline SweepResult parse_sweep_csv(const std::string& csv, SweepVariable var) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header())
    throw std::invalid_argument("sweep csv: unexpected header");
  SweepResult out;
  out.variable = var;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      const size_t comma = line.find(',', start);
      cols.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cols.size() != 25)
      throw std::invalid_argument("sweep csv: expected 25 columns, got " +
                                  std::to_string(cols.size()));
    SweepRow row;
    MetricsRow& m = row.metrics;
    m.scenario = cols[0];
    m.agent = std::stoi(cols[1]);
    m.rate = std::stod(cols[2]);
    m.gps_sigma = std::stod(cols[3]);
    for (int c = 1; c < kNumClasses; ++c) {
      const std::string& cell = cols[3 + c];
      if (cell == "na") continue;
      m.iou.present[c] = true;
      m.iou.iou[c] = std::stod(cell);
    }
    m.iou.miou = std::stod(cols[16]);
    m.iou.occupancy = std::stod(cols[17]);
    m.ap50 = std::stod(cols[18]);
    m.ap70 = std::stod(cols[19]);
    m.bev_vehicles = std::stod(cols[20]);
    m.bev_road = std::stod(cols[21]);
    m.bev_sidewalk = std::stod(cols[22]);
    m.bev_others = std::stod(cols[23]);
    m.cv_bytes = std::stoull(cols[24]);

    const size_t seed_tag = m.scenario.find(":seed=");
    if (seed_tag != std::string::npos)
      row.seed = std::stoull(m.scenario.substr(seed_tag + 6));
    if (var == SweepVariable::Rate) {
      row.value = m.rate;
    } else if (var == SweepVariable::GpsSigma) {
      row.value = m.gps_sigma;
    } else {
      const size_t b_tag = m.scenario.find(":B=");
      if (b_tag == std::string::npos)
        throw std::invalid_argument("sweep csv: budget row without B tag");
      row.value = std::stod(m.scenario.substr(b_tag + 3));
    }
    out.rows.push_back(std::move(row));
  }
  out.csv = csv;
  return out;
}

}  // namespace cohff
