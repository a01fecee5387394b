#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cohff/ground_truth.hpp"
#include "cohff/segmentation_net.hpp"

using namespace cohff;

namespace {

Tensor rand_tensor(std::vector<size_t> shape, Rng& rng, double lo = -1.0,
                   double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

Tensor project(const Tensor& y, uint64_t seed) {
  Rng rng(seed);
  Tensor c(y.shape());
  for (auto& v : c.values()) v = rng.uniform(-1, 1);
  return sum(mul(y, c));
}

void randomize(Tensor t, Rng& rng, double mag) {
  for (auto& v : t.values()) v = rng.uniform(-mag, mag);
}

ScenarioConfig small_config(uint64_t seed) {
  ScenarioConfig cfg;
  cfg.seed = seed;
  cfg.template_name = "random";
  cfg.agents = 1;
  cfg.extent = 20.0;
  cfg.grid.origin = {-10.0, -10.0, 0.0};
  cfg.grid.dims = {10, 10, 2};
  cfg.grid.voxel_size = 2.0;
  return cfg;
}

// two opposing cameras, kept narrow so test lattices stay small
SensorRig tiny_rig() {
  SensorRig rig;
  RigMount m;
  m.offset = Pose(0.0, 0.0, 1.6, 0.0);
  m.v_fov_lo_deg = -25.0;
  m.v_fov_hi_deg = 15.0;
  m.h_fov_deg = 80.0;
  m.max_range = 40.0;
  rig.mounts.push_back(m);
  m.offset = Pose(0.0, 0.0, 1.6, kPi);
  rig.mounts.push_back(m);
  return rig;
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("observation render encodes class one-hots and depth bins", "[segnet]") {
  const Scenario s = generate_scenario(small_config(5));
  RaycastConfig rc;
  rc.angular_res_deg = 5.0;
  const SensorScan scan = cast_semantic_rays(SensorRig::camera_quad(), s.agents[0].pose,
                                             s, s.agents[0].body_instance, rc);
  const std::vector<Tensor> obs = render_observations(scan);
  REQUIRE(obs.size() == 4);

  size_t base = 0;
  size_t hits = 0, misses = 0;
  for (int mi = 0; mi < scan.mount_count; ++mi) {
    const size_t rows = scan.rows_per_mount[mi], cols = scan.cols_per_mount[mi];
    REQUIRE(obs[mi].shape() == std::vector<size_t>{rows, cols, kObsChannels});
    for (size_t i = 0; i < rows * cols; ++i) {
      const SensorSample& sm = scan.samples[base + i];
      double onehot_sum = 0.0;
      for (int c = 0; c < kNumClasses; ++c)
        onehot_sum += obs[mi].at(i * kObsChannels + c);
      CHECK(onehot_sum == 1.0);
      const double bin_ch = obs[mi].at(i * kObsChannels + kNumClasses);
      if (sm.hit) {
        ++hits;
        CHECK(obs[mi].at(i * kObsChannels + sm.cls) == 1.0);
        CHECK(bin_ch == static_cast<double>(depth_to_bin(sm.range)) / kDepthBins);
      } else {
        ++misses;
        CHECK(obs[mi].at(i * kObsChannels + kEmpty) == 1.0);
        CHECK(bin_ch == 1.0);
      }
    }
    base += rows * cols;
  }
  CHECK(hits > 0);
  CHECK(misses > 0);
}

TEST_CASE("image backbone maps zero input to zero and keeps dims", "[segnet]") {
  Rng rng(9);
  ParamStore ps;
  ImageBackbone bb = ImageBackbone::create(ps, "bb", kObsChannels, 6, rng);
  Tensor zero({4, 5, kObsChannels});
  Tensor out = bb.forward(zero);
  REQUIRE(out.shape() == std::vector<size_t>{4, 5, 6});
  for (double v : out.values()) CHECK(v == 0.0);

  Tensor obs = rand_tensor({3, 7, kObsChannels}, rng, 0.0, 1.0);
  CHECK(bb.forward(obs).shape() == std::vector<size_t>{3, 7, 6});
}

TEST_CASE("image backbone gradients match finite differences", "[segnet]") {
  Rng rng(13);
  ParamStore ps;
  ImageBackbone bb = ImageBackbone::create(ps, "bb", 3, 2, rng);
  randomize(bb.b1, rng, 0.3);
  randomize(bb.b2, rng, 0.3);
  Tensor obs = rand_tensor({3, 4, 3}, rng);
  auto loss = [&] { return project(bb.forward(obs), 13); };
  CHECK(finite_diff_check(loss, bb.k1) < kGradTol);
  CHECK(finite_diff_check(loss, bb.b1) < kGradTol);
  CHECK(finite_diff_check(loss, bb.k2) < kGradTol);
  CHECK(finite_diff_check(loss, bb.b2) < kGradTol);
  CHECK(finite_diff_check(loss, obs) < kGradTol);
}

TEST_CASE("camera projection inverts the scan ray lattice", "[segnet]") {
  const Scenario s = generate_scenario(small_config(11));
  const SensorRig rig = SensorRig::camera_quad();
  RaycastConfig rc;
  rc.angular_res_deg = 5.0;
  const SensorScan scan = cast_semantic_rays(rig, s.agents[0].pose, s,
                                             s.agents[0].body_instance, rc);
  std::vector<CameraView> views(rig.mounts.size());
  for (size_t i = 0; i < rig.mounts.size(); ++i) {
    views[i].pose = transform_pose(rig.mounts[i].offset, s.agents[0].pose);
    views[i].mount = rig.mounts[i];
    views[i].res_deg = rc.angular_res_deg;
  }
  size_t checked = 0;
  for (const SensorSample& sm : scan.samples) {
    if (!sm.hit) continue;
    const PixelRef ref = project_to_camera(sm.point, views[sm.mount]);
    REQUIRE(ref.valid);
    CHECK(ref.row == Catch::Approx(sm.row).margin(1e-6));
    CHECK(ref.col == Catch::Approx(sm.col).margin(1e-6));
    if (++checked == 500) break;
  }
  CHECK(checked > 100);

  // behind the camera, out of range, and outside the field of view
  CameraView cam;
  cam.pose = Pose(0, 0, 0, 0);
  cam.mount = rig.mounts[0];
  cam.res_deg = 5.0;
  CHECK_FALSE(project_to_camera({-5.0, 0.0, 0.0}, cam).valid);
  CHECK_FALSE(project_to_camera({100.0, 0.0, 0.0}, cam).valid);
  CHECK_FALSE(project_to_camera({1.0, 0.0, 50.0}, cam).valid);
  CHECK(project_to_camera({5.0, 0.0, 0.0}, cam).valid);
}

TEST_CASE("cross-attention matches a hand projection oracle", "[segnet]") {
  GridSpec grid;
  grid.origin = {0.0, 0.0, 0.0};
  grid.dims = {2, 2, 2};
  grid.voxel_size = 1.0;
  const double cam_x = -2.0, cam_y = 1.0, cam_z = 1.0, cam_yaw = 0.15;

  Rng rng(17);
  CameraView cam;
  cam.pose = Pose(cam_x, cam_y, cam_z, cam_yaw);
  cam.mount.v_fov_lo_deg = -20.0;
  cam.mount.v_fov_hi_deg = 20.0;
  cam.mount.h_fov_deg = 60.0;
  cam.mount.max_range = 40.0;
  cam.res_deg = 5.0;
  cam.features = rand_tensor({8, 12, 2}, rng);

  ParamStore ps;
  DeformAttnParams params = DeformAttnParams::create(ps, "x", 2, 2, 1, 1, 1, rng);
  randomize(params.w_out, rng, 1.0);  // offsets stay zero; one slot -> weight 1

  std::array<FeaturePlane, 3> planes{
      FeaturePlane{PlaneAxis::XY, rand_tensor({2, 2, 2}, rng)},
      FeaturePlane{PlaneAxis::XZ, rand_tensor({2, 2, 2}, rng)},
      FeaturePlane{PlaneAxis::YZ, rand_tensor({2, 2, 2}, rng)}};
  const auto out = deformable_cross_attention(planes, {cam}, grid, params);

  for (size_t pi = 0; pi < 3; ++pi) {
    for (size_t i = 0; i < 2; ++i) {
      for (size_t j = 0; j < 2; ++j) {
        // grid point: plane cell center, pillar midpoint on the missing axis
        double px, py, pz;
        if (planes[pi].axis == PlaneAxis::XY) {
          px = i + 0.5; py = j + 0.5; pz = 1.0;
        } else if (planes[pi].axis == PlaneAxis::XZ) {
          px = i + 0.5; py = 1.0; pz = j + 0.5;
        } else {
          px = 1.0; py = i + 0.5; pz = j + 0.5;
        }
        // camera-frame angles, long-hand
        const double dx = px - cam_x, dy = py - cam_y, dz = pz - cam_z;
        const double lx = std::cos(cam_yaw) * dx + std::sin(cam_yaw) * dy;
        const double ly = -std::sin(cam_yaw) * dx + std::cos(cam_yaw) * dy;
        const double az = std::atan2(ly, lx);
        const double el = std::atan2(dz, std::sqrt(lx * lx + ly * ly));
        REQUIRE(std::abs(az) < deg2rad(30.0));
        REQUIRE(std::abs(el) < deg2rad(20.0));
        const double u = (deg2rad(20.0) - el) / deg2rad(5.0) - 0.5;
        const double v = (deg2rad(30.0) - az) / deg2rad(5.0) - 0.5;
        REQUIRE((u > 0.0 && u < 7.0 && v > 0.0 && v < 11.0));
        // bilinear sample, long-hand
        const size_t u0 = static_cast<size_t>(u), v0 = static_cast<size_t>(v);
        const double fu = u - u0, fv = v - v0;
        double sample[2];
        for (size_t f = 0; f < 2; ++f) {
          auto px_at = [&](size_t r, size_t c) {
            return cam.features.at((r * 12 + c) * 2 + f);
          };
          sample[f] = (1 - fu) * (1 - fv) * px_at(u0, v0) +
                      (1 - fu) * fv * px_at(u0, v0 + 1) +
                      fu * (1 - fv) * px_at(u0 + 1, v0) +
                      fu * fv * px_at(u0 + 1, v0 + 1);
        }
        for (size_t f = 0; f < 2; ++f) {
          const double delta = sample[0] * params.w_out.at(f) +
                               sample[1] * params.w_out.at(2 + f);
          const double want = planes[pi].data.at((i * 2 + j) * 2 + f) + delta;
          CHECK(out[pi].data.at((i * 2 + j) * 2 + f) ==
                Catch::Approx(want).margin(1e-9));
        }
      }
    }
  }
}

TEST_CASE("queries that miss every camera pass through unchanged", "[segnet]") {
  GridSpec grid;
  grid.origin = {0.0, 0.0, 0.0};
  grid.dims = {2, 2, 2};
  grid.voxel_size = 1.0;

  Rng rng(19);
  ParamStore ps;
  DeformAttnParams params = DeformAttnParams::create(ps, "x", 2, 2, 2, 1, 2, rng);
  randomize(params.w_off, rng, 0.4);
  randomize(params.b_off, rng, 0.4);
  randomize(params.w_out, rng, 1.0);

  std::array<FeaturePlane, 3> planes{
      FeaturePlane{PlaneAxis::XY, rand_tensor({2, 2, 2}, rng)},
      FeaturePlane{PlaneAxis::XZ, rand_tensor({2, 2, 2}, rng)},
      FeaturePlane{PlaneAxis::YZ, rand_tensor({2, 2, 2}, rng)}};

  CameraView behind;  // grid is fully behind this camera
  behind.pose = Pose(100.0, 0.0, 1.0, 0.0);
  behind.mount.v_fov_lo_deg = -20.0;
  behind.mount.v_fov_hi_deg = 20.0;
  behind.mount.h_fov_deg = 60.0;
  behind.mount.max_range = 40.0;
  behind.res_deg = 5.0;
  behind.features = rand_tensor({8, 12, 2}, rng);
  CameraView near = behind;  // in range direction-wise but range-limited
  near.pose = Pose(-2.0, 1.0, 1.0, 0.0);
  near.mount.max_range = 0.5;

  for (const auto& cams : {std::vector<CameraView>{behind},
                           std::vector<CameraView>{near},
                           std::vector<CameraView>{behind, near}}) {
    const auto out = deformable_cross_attention(planes, cams, grid, params);
    for (size_t pi = 0; pi < 3; ++pi)
      CHECK(out[pi].data.values() == planes[pi].data.values());
  }
}

TEST_CASE("cross-attention is invariant to camera order", "[segnet]") {
  GridSpec grid;
  grid.origin = {-4.0, -4.0, 0.0};
  grid.dims = {3, 2, 2};
  grid.voxel_size = 2.0;

  Rng rng(23);
  ParamStore ps;
  DeformAttnParams params = DeformAttnParams::create(ps, "x", 2, 4, 2, 2, 2, rng);
  randomize(params.w_off, rng, 0.3);
  randomize(params.b_off, rng, 0.3);
  randomize(params.b_wt, rng, 0.5);
  randomize(params.w_out, rng, 1.0);

  auto mk_cam = [&](double x, double y, double yaw) {
    CameraView c;
    c.pose = Pose(x, y, 1.5, yaw);
    c.mount.v_fov_lo_deg = -30.0;
    c.mount.v_fov_hi_deg = 10.0;
    c.mount.h_fov_deg = 100.0;
    c.mount.max_range = 40.0;
    c.res_deg = 10.0;
    c.features = rand_tensor({4, 10, 4}, rng);
    return c;
  };
  CameraView a = mk_cam(-8.0, 0.0, 0.0);
  CameraView b = mk_cam(0.0, -9.0, kPi / 2.0);
  CameraView c = mk_cam(6.0, 5.0, -2.5);

  std::array<FeaturePlane, 3> planes{
      FeaturePlane{PlaneAxis::XY, rand_tensor({3, 2, 2}, rng)},
      FeaturePlane{PlaneAxis::XZ, rand_tensor({3, 2, 2}, rng)},
      FeaturePlane{PlaneAxis::YZ, rand_tensor({2, 2, 2}, rng)}};

  const auto fwd = deformable_cross_attention(planes, {a, b, c}, grid, params);
  const auto rev = deformable_cross_attention(planes, {c, a, b}, grid, params);
  for (size_t pi = 0; pi < 3; ++pi) {
    bool moved = false;
    for (size_t k = 0; k < fwd[pi].data.numel(); ++k) {
      CHECK(fwd[pi].data.at(k) == Catch::Approx(rev[pi].data.at(k)).margin(1e-12));
      if (fwd[pi].data.at(k) != planes[pi].data.at(k)) moved = true;
    }
    CHECK(moved);
  }
}

TEST_CASE("segmentation net produces plane features over the grid", "[segnet]") {
  ScenarioConfig cfg = small_config(31);
  cfg.grid.dims = {4, 4, 2};
  cfg.grid.voxel_size = 5.0;
  cfg.grid.origin = {-10.0, -10.0, 0.0};
  const Scenario s = generate_scenario(cfg);

  SegmentationNetConfig nc;
  nc.feat = 4;
  nc.feat_img = 4;
  nc.attn = DeformAttnConfig{2, 2, 2};
  Rng rng(31);
  ParamStore ps;
  SegmentationNet net = SegmentationNet::create(ps, "seg", s.grid, nc, rng);
  randomize(net.cross.w_out, rng, 0.5);
  randomize(net.intra.w_out, rng, 0.5);

  RaycastConfig rc;
  rc.angular_res_deg = 10.0;
  const SensorRig rig = SensorRig::camera_quad();
  const SensorScan scan = cast_semantic_rays(rig, s.agents[0].pose, s,
                                             s.agents[0].body_instance, rc);
  const auto views = net.encode(scan, rig, rc.angular_res_deg);
  REQUIRE(views.size() == 4);
  REQUIRE(views[0].features.shape() == std::vector<size_t>{4, 10, 4});

  const auto planes = net.planes(views);
  CHECK(planes[0].data.shape() == std::vector<size_t>{4, 4, 4});
  CHECK(planes[1].data.shape() == std::vector<size_t>{4, 2, 4});
  CHECK(planes[2].data.shape() == std::vector<size_t>{4, 2, 4});
  bool moved = false;
  for (size_t k = 0; k < planes[0].data.numel(); ++k) {
    CHECK(std::isfinite(planes[0].data.at(k)));
    if (planes[0].data.at(k) != net.q_xy.at(k)) moved = true;
  }
  CHECK(moved);
}

TEST_CASE("segmentation net gradients match finite differences", "[segnet]") {
  ScenarioConfig cfg = small_config(37);
  cfg.grid.dims = {3, 3, 2};
  cfg.grid.voxel_size = 4.0;
  cfg.grid.origin = {-6.0, -6.0, 0.0};
  cfg.extent = 12.0;
  const Scenario s = generate_scenario(cfg);

  SegmentationNetConfig nc;
  nc.feat = 2;
  nc.feat_img = 2;
  nc.attn = DeformAttnConfig{1, 1, 2};
  Rng rng(37);
  ParamStore ps;
  SegmentationNet net = SegmentationNet::create(ps, "seg", s.grid, nc, rng);
  randomize(net.backbone.b1, rng, 0.3);
  randomize(net.backbone.b2, rng, 0.3);
  randomize(net.cross.w_off, rng, 0.25);
  randomize(net.cross.b_off, rng, 0.25);
  randomize(net.cross.w_out, rng, 0.5);
  randomize(net.intra.w_off, rng, 0.25);
  randomize(net.intra.b_off, rng, 0.25);
  randomize(net.intra.w_out, rng, 0.5);

  RaycastConfig rc;
  rc.angular_res_deg = 10.0;
  const SensorRig rig = tiny_rig();
  const SensorScan scan = cast_semantic_rays(rig, s.agents[0].pose, s,
                                             s.agents[0].body_instance, rc);
  auto loss = [&] {
    const auto planes = net.planes(net.encode(scan, rig, rc.angular_res_deg));
    Tensor acc = project(planes[0].data, 99);
    acc = add(acc, project(planes[1].data, 100));
    acc = add(acc, project(planes[2].data, 101));
    return acc;
  };

  CHECK(finite_diff_check(loss, net.backbone.k1, 1e-5, 40) < kGradTol);
  CHECK(finite_diff_check(loss, net.backbone.b1) < kGradTol);
  CHECK(finite_diff_check(loss, net.backbone.k2, 1e-5, 40) < kGradTol);
  CHECK(finite_diff_check(loss, net.backbone.b2) < kGradTol);
  CHECK(finite_diff_check(loss, net.q_xy) < kGradTol);
  CHECK(finite_diff_check(loss, net.q_xz) < kGradTol);
  CHECK(finite_diff_check(loss, net.q_yz) < kGradTol);
  CHECK(finite_diff_check(loss, net.cross.w_off, 1e-5, 40) < kGradTol);
  CHECK(finite_diff_check(loss, net.cross.b_off) < kGradTol);
  CHECK(finite_diff_check(loss, net.cross.w_wt, 1e-5, 40) < kGradTol);
  CHECK(finite_diff_check(loss, net.cross.b_wt) < kGradTol);
  CHECK(finite_diff_check(loss, net.cross.w_out) < kGradTol);
  CHECK(finite_diff_check(loss, net.intra.w_off, 1e-5, 40) < kGradTol);
  CHECK(finite_diff_check(loss, net.intra.b_off) < kGradTol);
  CHECK(finite_diff_check(loss, net.intra.w_wt, 1e-5, 40) < kGradTol);
  CHECK(finite_diff_check(loss, net.intra.b_wt) < kGradTol);
  CHECK(finite_diff_check(loss, net.intra.w_out) < kGradTol);
}

TEST_CASE("segmentation configuration is validated", "[segnet]") {
  SegmentationNetConfig bad;
  bad.feat = 5;
  bad.attn = DeformAttnConfig{2, 4, 4};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.feat = 4;
  bad.feat_img = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.feat_img = 4;
  CHECK_NOTHROW(bad.validate());

  const Scenario s = generate_scenario(small_config(41));
  Rng rng(41);
  ParamStore ps;
  SegmentationNetConfig nc;
  nc.feat = 2;
  nc.feat_img = 2;
  nc.attn = DeformAttnConfig{1, 1, 2};
  SegmentationNet net = SegmentationNet::create(ps, "seg", s.grid, nc, rng);
  RaycastConfig rc;
  rc.angular_res_deg = 10.0;
  const SensorScan scan = cast_semantic_rays(SensorRig::camera_quad(), s.agents[0].pose,
                                             s, s.agents[0].body_instance, rc);
  CHECK_THROWS_AS(net.encode(scan, tiny_rig(), rc.angular_res_deg),
                  std::invalid_argument);

  std::array<FeaturePlane, 3> wrong{
      FeaturePlane{PlaneAxis::XY, Tensor({3, 3, 2})},
      FeaturePlane{PlaneAxis::XZ, Tensor({10, 2, 2})},
      FeaturePlane{PlaneAxis::YZ, Tensor({10, 2, 2})}};
  CHECK_THROWS_AS(deformable_cross_attention(wrong, {}, s.grid, net.cross),
                  std::invalid_argument);
}
