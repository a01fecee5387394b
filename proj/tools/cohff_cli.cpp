// Command line front end: scene generation, toy training, scenario runs,
// sweeps, reporting, and wire message inspection.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cohff/cohff.hpp"

namespace {

cohff::RunConfig load_run_config(const std::string& path) {
  cohff::RunConfig cfg;
  if (!path.empty())
    cfg = cohff::run_config_from_json(
        nlohmann::json::parse(cohff::read_text_file(path)));
  if (const char* env = std::getenv("COHFF_SEED"))
    cfg.scenario.seed = std::stoull(env);
  return cfg;
}

// Common per-run flag overrides, applied on top of the config file.
struct RunOverrides {
  CLI::Option *seed = nullptr, *tmpl = nullptr, *agents = nullptr,
              *rate = nullptr, *budget = nullptr, *gps = nullptr,
              *tier = nullptr, *steps = nullptr, *ckpt = nullptr,
              *collab = nullptr;
  uint64_t seed_v = 0;
  std::string tmpl_v;
  int agents_v = 0;
  double rate_v = 0.0;
  uint64_t budget_v = 0;
  double gps_v = 0.0;
  std::string tier_v;
  int steps_v = 0;
  std::string ckpt_v;
  bool collab_v = true;

  void attach(CLI::App* cmd) {
    seed = cmd->add_option("--seed", seed_v, "scenario seed");
    tmpl = cmd->add_option("--template", tmpl_v,
                           "scene template: random|occlusion|junction|highway");
    agents = cmd->add_option("--agents", agents_v, "number of agents");
    rate = cmd->add_option("--rate", rate_v, "plane sparsification rate in [0,1)");
    budget = cmd->add_option("--budget", budget_v,
                             "per-receiver communication budget in bytes");
    gps = cmd->add_option("--gps-sigma", gps_v, "pose noise sigma in meters");
    tier = cmd->add_option("--tier", tier_v,
                           "supervision tier: ego|collaborative|complete");
    steps = cmd->add_option("--steps", steps_v, "joint training steps");
    ckpt = cmd->add_option("--checkpoint", ckpt_v, "checkpoint to load");
    collab = cmd->add_flag("--collab,!--no-collab", collab_v,
                           "enable or disable collaboration");
  }

  void apply(cohff::RunConfig& cfg) const {
    if (seed->count()) cfg.scenario.seed = seed_v;
    if (tmpl->count()) cfg.scenario.template_name = tmpl_v;
    if (agents->count()) cfg.scenario.agents = agents_v;
    if (rate->count()) cfg.model.keep_rate = rate_v;
    if (budget->count()) cfg.budget_bytes = budget_v;
    if (gps->count()) cfg.gps_sigma = gps_v;
    if (tier->count()) cfg.supervision = cohff::tier_from_string(tier_v);
    if (steps->count()) cfg.train.joint_steps = steps_v;
    if (ckpt->count()) cfg.checkpoint = ckpt_v;
    if (collab->count()) cfg.collaboration = collab_v;
    cfg.validate();
  }
};

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write: " + path);
}

std::vector<uint8_t> read_bytes(const std::string& path) {
  const std::string s = cohff::read_text_file(path);
  return std::vector<uint8_t>(s.begin(), s.end());
}

int cmd_gen_scene(const std::string& out, const std::string& pcd_path,
                  int pcd_agent, double res_deg, cohff::ScenarioConfig cfg) {
  if (const char* env = std::getenv("COHFF_SEED")) cfg.seed = std::stoull(env);
  cfg.validate();
  const cohff::Scenario scene = cohff::generate_scenario(cfg);
  cohff::save_scenario(scene, out);
  std::cout << "wrote " << out << " (" << scene.agents.size() << " agents, "
            << scene.objects.size() << " objects, " << scene.edges.size()
            << " edges)\n";
  if (!pcd_path.empty()) {
    const cohff::Agent* me = nullptr;
    for (const cohff::Agent& a : scene.agents)
      if (a.id == pcd_agent) me = &a;
    if (!me)
      throw std::invalid_argument("gen-scene: no agent with id " +
                                  std::to_string(pcd_agent));
    cohff::RaycastConfig rc;
    rc.angular_res_deg = res_deg;
    const cohff::SensorScan scan = cohff::cast_semantic_rays(
        cohff::SensorRig::lidar_quad(), me->pose, scene, me->body_instance, rc);
    const auto pts = cohff::scan_points_in_frame(scan, me->pose);
    cohff::write_text_file(pcd_path, cohff::pcd_string(pts));
    std::cout << "wrote " << pcd_path << " (" << pts.size() << " points)\n";
  }
  return 0;
}

int cmd_train_toy(const std::string& config_path, const RunOverrides& ov,
                  const std::string& out_ckpt, const std::string& loss_csv) {
  cohff::RunConfig cfg = load_run_config(config_path);
  ov.apply(cfg);
  cohff::ToyTrainer trainer(cfg);
  const cohff::TrainResult res = trainer.train();
  cohff::save_checkpoint(trainer.params(), out_ckpt);
  if (!loss_csv.empty()) cohff::write_text_file(loss_csv, res.loss_csv);
  for (const cohff::StageCurve& c : res.curves) {
    if (c.losses.empty()) {
      std::cout << c.stage << ": skipped\n";
      continue;
    }
    std::cout << c.stage << ": " << c.losses.size() - 1 << " steps, loss "
              << c.losses.front() << " -> " << c.losses.back() << "\n";
  }
  std::cout << "wrote " << out_ckpt << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, const RunOverrides& ov,
            const std::string& out_csv, const std::string& msg_dir) {
  cohff::RunConfig cfg = load_run_config(config_path);
  ov.apply(cfg);
  cohff::MessageTap tap;
  if (!msg_dir.empty()) {
    std::filesystem::create_directories(msg_dir);
    tap = [&msg_dir](int sender, int receiver, std::vector<uint8_t>& bytes) {
      write_bytes((std::filesystem::path(msg_dir) /
                   ("msg_" + std::to_string(sender) + "_to_" +
                    std::to_string(receiver) + ".bin"))
                      .string(),
                  bytes);
    };
  }
  const cohff::ModelBundle bundle = cohff::make_run_model(cfg);
  const cohff::ScenarioResult res = cohff::run_scenario(cfg, bundle.model, tap);
  for (const cohff::AgentResult& a : res.agents)
    for (const std::string& line : a.decode_log)
      std::cerr << "agent " << a.agent_id << ": " << line << "\n";
  if (out_csv.empty()) {
    std::cout << res.csv;
  } else {
    cohff::write_text_file(out_csv, res.csv);
    std::cout << "wrote " << out_csv << " (" << res.agents.size()
              << " agents, total cv " << res.total_cv << " bytes)\n";
  }
  return 0;
}

int cmd_sweep(const std::string& config_path, const RunOverrides& ov,
              const std::string& variable, const std::vector<double>& values,
              const std::vector<uint64_t>& seeds, const std::string& out_dir) {
  cohff::SweepConfig sc;
  sc.base = load_run_config(config_path);
  ov.apply(sc.base);
  sc.variable = cohff::sweep_variable_from_string(variable);
  sc.values = values;
  sc.seeds = seeds;
  const cohff::SweepResult res = cohff::sweep(sc);
  const cohff::ReportFiles files = cohff::report(res, out_dir);
  std::cout << "wrote " << files.csv_path << " (" << res.rows.size()
            << " rows) and " << files.plot_paths.size() << " plot series\n";
  return 0;
}

int cmd_report(const std::string& in_csv, const std::string& variable,
               const std::string& out_dir) {
  const cohff::SweepResult res = cohff::parse_sweep_csv(
      cohff::read_text_file(in_csv), cohff::sweep_variable_from_string(variable));
  const cohff::ReportFiles files = cohff::report(res, out_dir);
  std::cout << "wrote " << files.csv_path << " and " << files.plot_paths.size()
            << " plot series\n";
  return 0;
}

int cmd_dump_msg(const std::string& path, bool hex) {
  const std::vector<uint8_t> bytes = read_bytes(path);
  const cohff::DecodeResult dr = cohff::decode_message(bytes);
  if (dr.status != cohff::DecodeStatus::Ok)
    throw std::runtime_error(std::string("decode failed: ") +
                             cohff::to_string(dr.status));
  const cohff::V2XMessage& m = dr.msg;
  std::cout << "sender: " << m.sender << "\n";
  std::cout << "pose: x=" << m.pose.x << " y=" << m.pose.y << " z=" << m.pose.z
            << " yaw=" << m.pose.yaw << "\n";
  for (const cohff::SparsePlanePayload* p : {&m.xz, &m.yz}) {
    std::cout << (p->axis == cohff::PlaneAxis::XZ ? "xz" : "yz") << " plane: "
              << p->rows << "x" << p->cols << ", " << p->feat << " features, "
              << p->indices.size() << " kept cells\n";
  }
  std::cout << "payload: " << cohff::message_cv(m) << " bytes, overhead: "
            << cohff::message_overhead(m) << " bytes\n";
  if (hex) {
    char buf[8];
    for (size_t i = 0; i < bytes.size(); i += 16) {
      std::snprintf(buf, sizeof buf, "%06zx", i);
      std::cout << buf << ":";
      for (size_t k = i; k < std::min(bytes.size(), i + 16); ++k) {
        std::snprintf(buf, sizeof buf, " %02x", bytes[k]);
        std::cout << buf;
      }
      std::cout << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"collaborative semantic occupancy prediction harness"};
  app.require_subcommand(1);

  // gen-scene
  auto* gen = app.add_subcommand("gen-scene", "generate a scenario file");
  cohff::ScenarioConfig gen_cfg;
  std::string gen_out, gen_pcd;
  int gen_pcd_agent = 0;
  double gen_res = 1.0;
  gen->add_option("--seed", gen_cfg.seed, "scenario seed");
  gen->add_option("--template", gen_cfg.template_name,
                  "random|occlusion|junction|highway");
  gen->add_option("--agents", gen_cfg.agents, "number of agents");
  gen->add_option("--extent", gen_cfg.extent, "populated square side, meters");
  gen->add_option("--objects", gen_cfg.objects, "extra random objects");
  gen->add_option("--comm-range", gen_cfg.comm_range, "communication range, meters");
  gen->add_option("--out", gen_out, "output scenario json")->required();
  gen->add_option("--pcd", gen_pcd, "also export one agent's scan as PCD");
  gen->add_option("--pcd-agent", gen_pcd_agent, "agent id for --pcd");
  gen->add_option("--res", gen_res, "PCD scan angular resolution, degrees");

  // train-toy
  auto* train = app.add_subcommand("train-toy", "train the model on one scene");
  std::string train_config, train_out, train_loss_csv;
  RunOverrides train_ov;
  train->add_option("--config", train_config, "run config json");
  train_ov.attach(train);
  train->add_option("--out-checkpoint", train_out, "checkpoint to write")
      ->required();
  train->add_option("--loss-csv", train_loss_csv, "write per-step losses here");

  // run
  auto* run = app.add_subcommand("run", "run one collaborative scenario");
  std::string run_config, run_out, run_msgs;
  RunOverrides run_ov;
  run->add_option("--config", run_config, "run config json");
  run_ov.attach(run);
  run->add_option("--out-csv", run_out, "metrics csv path (default stdout)");
  run->add_option("--save-messages", run_msgs, "dump wire messages into this dir");

  // sweep
  auto* swp = app.add_subcommand("sweep", "run a parameter sweep and report it");
  std::string swp_config, swp_var, swp_out;
  std::vector<double> swp_values;
  std::vector<uint64_t> swp_seeds;
  RunOverrides swp_ov;
  swp->add_option("--config", swp_config, "base run config json");
  swp_ov.attach(swp);
  swp->add_option("--variable", swp_var, "rate|gps|budget")->required();
  swp->add_option("--values", swp_values, "swept values")->delimiter(',');
  swp->add_option("--seeds", swp_seeds, "scenario seeds")->delimiter(',');
  swp->add_option("--out", swp_out, "output directory")->required();

  // report
  auto* rep = app.add_subcommand("report", "rebuild plots from a sweep csv");
  std::string rep_in, rep_var, rep_out;
  rep->add_option("--in", rep_in, "sweep csv")->required();
  rep->add_option("--variable", rep_var, "rate|gps|budget")->required();
  rep->add_option("--out-dir", rep_out, "output directory")->required();

  // dump-msg
  auto* dump = app.add_subcommand("dump-msg", "decode and print a wire message");
  std::string dump_file;
  bool dump_hex = false;
  dump->add_option("file", dump_file, "binary message file")->required();
  dump->add_flag("--hex", dump_hex, "also hex dump the raw bytes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen)
      return cmd_gen_scene(gen_out, gen_pcd, gen_pcd_agent, gen_res, gen_cfg);
    if (*train) return cmd_train_toy(train_config, train_ov, train_out,
                                     train_loss_csv);
    if (*run) return cmd_run(run_config, run_ov, run_out, run_msgs);
    if (*swp)
      return cmd_sweep(swp_config, swp_ov, swp_var, swp_values, swp_seeds, swp_out);
    if (*rep) return cmd_report(rep_in, rep_var, rep_out);
    if (*dump) return cmd_dump_msg(dump_file, dump_hex);
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
