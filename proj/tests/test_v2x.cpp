#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "cohff/common.hpp"
#include "cohff/v2x.hpp"

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

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

SparsifiedPlane random_sparsified(Rng& rng, size_t h, size_t w, size_t f,
                                  double rate, PlaneAxis axis) {
  Tensor plane = rand_tensor({h, w, f}, rng);
  Tensor mask = rand_tensor({h, w}, rng, -2.0, 2.0);
  return apply_mask_and_sparsify(plane, axis, mask, rate);
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("rate zero keeps every cell with gated values", "[v2x]") {
  Rng rng(3);
  Tensor plane = rand_tensor({3, 4, 2}, rng);
  Tensor mask = rand_tensor({3, 4}, rng, -2.0, 2.0);
  const SparsifiedPlane sp = apply_mask_and_sparsify(plane, PlaneAxis::XZ, mask, 0.0);

  REQUIRE(sp.payload.indices.size() == 12);
  REQUIRE(sp.payload.values.size() == 24);
  CHECK(sp.payload.rows == 3);
  CHECK(sp.payload.cols == 4);
  CHECK(sp.payload.feat == 2);
  for (size_t i = 0; i < 12; ++i) CHECK(sp.payload.indices[i] == i);
  for (size_t c = 0; c < 12; ++c) {
    const double g = sigmoid_ref(mask.at(c));
    for (size_t f = 0; f < 2; ++f) {
      const double gated = plane.at(c * 2 + f) * g;
      CHECK(sp.dense.at(c * 2 + f) == Catch::Approx(gated).margin(1e-12));
      CHECK(sp.payload.values[c * 2 + f] == static_cast<float>(gated));
    }
  }
}

TEST_CASE("top cells by mask logits are kept", "[v2x]") {
  Tensor plane({2, 2, 1});
  for (size_t i = 0; i < 4; ++i) plane.at(i) = 10.0 + i;
  const Tensor mask = Tensor::from({2, 2}, {3, 2, 1, 0});
  const SparsifiedPlane sp = apply_mask_and_sparsify(plane, PlaneAxis::XZ, mask, 0.5);
  CHECK(sp.payload.indices == std::vector<uint32_t>{0, 1});
  CHECK(sp.ranked == std::vector<uint32_t>{0, 1, 2, 3});
  CHECK(sp.dense.at(2) == 0.0);
  CHECK(sp.dense.at(3) == 0.0);

  // equal logits: ties resolve to the lowest indices
  const SparsifiedPlane tie =
      apply_mask_and_sparsify(plane, PlaneAxis::XZ, Tensor({2, 2}), 0.5);
  CHECK(tie.payload.indices == std::vector<uint32_t>{0, 1});

  CHECK_THROWS_AS(apply_mask_and_sparsify(plane, PlaneAxis::XZ, Tensor({3, 2}), 0.5),
                  std::invalid_argument);
  CHECK_THROWS_AS(apply_mask_and_sparsify(plane, PlaneAxis::XZ, Tensor({2, 2}), 1.0),
                  std::invalid_argument);
}

TEST_CASE("kept set is invariant under monotone logit transforms", "[v2x]") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor plane = rand_tensor({4, 5, 3}, rng);
    Tensor mask = rand_tensor({4, 5}, rng, -3.0, 3.0);
    Tensor warped(mask.shape());
    for (size_t i = 0; i < warped.numel(); ++i) warped.at(i) = 2.0 * mask.at(i) + 5.0;
    const double rate = rng.uniform(0.0, 0.9);
    const auto a = apply_mask_and_sparsify(plane, PlaneAxis::XZ, mask, rate);
    const auto b = apply_mask_and_sparsify(plane, PlaneAxis::XZ, warped, rate);
    CHECK(a.payload.indices == b.payload.indices);
    CHECK(a.ranked == b.ranked);
  }
}

TEST_CASE("densify inverts sparsify and rejects corrupt payloads", "[v2x]") {
  Rng rng(11);
  Tensor plane = rand_tensor({3, 3, 2}, rng);
  Tensor mask = rand_tensor({3, 3}, rng, -2.0, 2.0);
  const auto sp = apply_mask_and_sparsify(plane, PlaneAxis::YZ, mask, 0.0);
  const Tensor back = densify(sp.payload);
  REQUIRE(back.shape() == std::vector<size_t>{3, 3, 2});
  for (size_t i = 0; i < back.numel(); ++i)
    CHECK(back.at(i) == static_cast<double>(static_cast<float>(sp.dense.at(i))));

  SparsePlanePayload empty;
  empty.axis = PlaneAxis::XZ;
  empty.rows = 2;
  empty.cols = 3;
  empty.feat = 4;
  const Tensor zero = densify(empty);
  for (double v : zero.values()) CHECK(v == 0.0);

  SparsePlanePayload bad = sp.payload;
  bad.indices[0] = bad.indices[1];
  CHECK_THROWS_AS(densify(bad), std::invalid_argument);
  bad = sp.payload;
  bad.indices.back() = 9;
  CHECK_THROWS_AS(densify(bad), std::invalid_argument);
  bad = sp.payload;
  bad.values.pop_back();
  CHECK_THROWS_AS(densify(bad), std::invalid_argument);
}

TEST_CASE("a second sparsify pass changes nothing", "[v2x]") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    // random payload with values bounded away from zero
    const size_t h = 3 + trial % 3, w = 4, f = 2;
    Tensor plane(std::vector<size_t>{h, w, f});
    for (auto& v : plane.values()) {
      const double mag = rng.uniform(0.1, 1.0);
      v = rng.uniform() < 0.5 ? -mag : mag;
    }
    Tensor mask = rand_tensor({h, w}, rng, -2.0, 2.0);
    const double rate = rng.uniform(0.0, 0.8);
    const auto first = apply_mask_and_sparsify(plane, PlaneAxis::XZ, mask, rate);
    const Tensor d1 = densify(first.payload);

    // re-extract exactly the populated cells: saturated logits make the gate 1
    Tensor refilter({h, w});
    size_t nnz = 0;
    for (size_t c = 0; c < h * w; ++c) {
      bool populated = false;
      for (size_t k = 0; k < f; ++k)
        if (d1.at(c * f + k) != 0.0) populated = true;
      refilter.at(c) = populated ? 60.0 : -60.0;
      if (populated) ++nnz;
    }
    REQUIRE(nnz == first.payload.indices.size());
    const double rate2 = static_cast<double>(h * w - nnz) / (h * w);
    const auto second = apply_mask_and_sparsify(d1, PlaneAxis::XZ, refilter, rate2);
    CHECK(second.payload.indices == first.payload.indices);
    const Tensor d2 = densify(second.payload);
    for (size_t i = 0; i < d2.numel(); ++i) CHECK(d2.at(i) == d1.at(i));
  }
}

TEST_CASE("gradients flow through the gated sparse planes", "[v2x]") {
  Rng rng(17);
  ParamStore ps;
  GridSpec grid;
  grid.origin = {0, 0, 0};
  grid.dims = {3, 4, 2};
  grid.voxel_size = 1.0;
  PlaneMask mask = PlaneMask::create(ps, "mask", grid);
  for (auto& v : mask.xz.values()) v = rng.uniform(-1.0, 1.0);
  Tensor plane = rand_tensor({3, 2, 5}, rng);

  auto loss = [&] {
    const auto sp = apply_mask_and_sparsify(plane, PlaneAxis::XZ, mask.xz, 0.4);
    return project(sp.dense, 17);
  };
  CHECK(finite_diff_check(loss, mask.xz) < kGradTol);
  CHECK(finite_diff_check(loss, plane) < kGradTol);
}

TEST_CASE("volume accounting reproduces the dense reference figures", "[v2x]") {
  // hypothetical dense voxel grid (100,100,8) with 128 channels, f32
  const uint64_t voxel_bytes = 100ull * 100 * 8 * 128 * 4;
  CHECK(voxel_bytes == 40960000ull);
  CHECK(bytes_to_mb(voxel_bytes) == Catch::Approx(39.0625).margin(1e-12));

  // the two shared planes, dense: (100x8 + 100x8) cells, 128 channels
  Rng rng(19);
  std::vector<SparsePlanePayload> payloads;
  for (PlaneAxis axis : {PlaneAxis::XZ, PlaneAxis::YZ}) {
    Tensor plane = rand_tensor({100, 8, 128}, rng, 0.5, 1.0);
    payloads.push_back(
        apply_mask_and_sparsify(plane, axis, Tensor({100, 8}), 0.0).payload);
  }
  const uint64_t cv = communication_volume(payloads);
  CHECK(cv == 819200ull);
  CHECK(bytes_to_mb(cv) == Catch::Approx(0.78125).margin(1e-12));
  CHECK(static_cast<double>(voxel_bytes) / cv == Catch::Approx(50.0).margin(1e-12));
}

TEST_CASE("volume ratios follow the kept-cell law at published rates", "[v2x]") {
  Rng rng(23);
  Tensor plane = rand_tensor({100, 8, 16}, rng);
  Tensor mask = rand_tensor({100, 8}, rng, -2.0, 2.0);
  const uint64_t base =
      payload_bytes(apply_mask_and_sparsify(plane, PlaneAxis::XZ, mask, 0.0).payload);

  const std::vector<std::pair<double, double>> table = {
      {0.5, 8.27 / 16.53},
      {0.8, 3.31 / 16.53},
      {0.95, 0.83 / 16.53},
      {0.99, 0.17 / 16.53},
  };
  for (const auto& [rate, want] : table) {
    const auto sp = apply_mask_and_sparsify(plane, PlaneAxis::XZ, mask, rate);
    const double ratio = static_cast<double>(payload_bytes(sp.payload)) / base;
    CHECK(ratio == Catch::Approx(static_cast<double>(kept_cells(800, rate)) / 800)
                       .margin(1e-12));
    CHECK(std::abs(ratio - want) < 1e-3);
  }

  // monotone non-increasing in the rate
  uint64_t prev = base;
  for (double r = 0.05; r < 1.0; r += 0.05) {
    const uint64_t b =
        payload_bytes(apply_mask_and_sparsify(plane, PlaneAxis::XZ, mask, r).payload);
    CHECK(b <= prev);
    prev = b;
  }
}

TEST_CASE("budget enforcement cuts to the smallest fitting uniform rate", "[v2x]") {
  Rng rng(29);
  auto make_shares = [&] {
    std::vector<AgentShare> shares(2);
    for (size_t i = 0; i < shares.size(); ++i) {
      shares[i].sender = static_cast<uint32_t>(i + 1);
      shares[i].xz = random_sparsified(rng, 6, 4, 3, 0.0, PlaneAxis::XZ);
      shares[i].yz = random_sparsified(rng, 5, 4, 3, 0.0, PlaneAxis::YZ);
    }
    return shares;
  };

  // generous budget: untouched
  auto shares = make_shares();
  const uint64_t full = payload_bytes(shares[0].xz.payload) +
                        payload_bytes(shares[0].yz.payload) +
                        payload_bytes(shares[1].xz.payload) +
                        payload_bytes(shares[1].yz.payload);
  auto before = shares[0].xz.payload.indices;
  CHECK(enforce_budget(shares, {full}) == 0.0);
  CHECK(shares[0].xz.payload.indices == before);

  // half budget: kept cells halve (+-1 from per-plane ceilings)
  shares = make_shares();
  const double r = enforce_budget(shares, {full / 2});
  CHECK(r > 0.0);
  uint64_t after = 0;
  for (const auto& s : shares)
    after += payload_bytes(s.xz.payload) + payload_bytes(s.yz.payload);
  CHECK(after <= full / 2);
  CHECK(shares[0].xz.payload.indices.size() >= 11);
  CHECK(shares[0].xz.payload.indices.size() <= 13);
  CHECK(shares[0].yz.payload.indices.size() >= 9);
  CHECK(shares[0].yz.payload.indices.size() <= 11);
  // kept set is the top of the priority ranking
  for (size_t k = 0; k < shares[0].xz.payload.indices.size(); ++k) {
    const auto& kept = shares[0].xz.payload.indices;
    CHECK(std::find(kept.begin(), kept.end(), shares[0].xz.ranked[k]) != kept.end());
  }

  // zero budget: everything empties
  shares = make_shares();
  CHECK(enforce_budget(shares, {0}) == 1.0);
  for (const auto& s : shares) {
    CHECK(s.xz.payload.indices.empty());
    CHECK(s.xz.payload.values.empty());
    CHECK(message_cv(make_message(s.sender, Pose(), s.xz, s.yz)) == 0);
    for (double v : s.xz.dense.values()) CHECK(v == 0.0);
  }

  // random budgets always end within budget
  for (int trial = 0; trial < 20; ++trial) {
    shares = make_shares();
    const uint64_t budget = rng.uniform_int(0, static_cast<int>(full));
    enforce_budget(shares, {budget});
    uint64_t got = 0;
    for (const auto& s : shares)
      got += payload_bytes(s.xz.payload) + payload_bytes(s.yz.payload);
    CHECK(got <= budget);
  }
}

TEST_CASE("budget raise never densifies an already sparse plane", "[v2x]") {
  Rng rng(31);
  std::vector<AgentShare> shares(2);
  shares[0].xz = random_sparsified(rng, 6, 4, 2, 0.9, PlaneAxis::XZ);  // 3 cells
  shares[0].yz = random_sparsified(rng, 6, 4, 2, 0.9, PlaneAxis::YZ);
  shares[1].xz = random_sparsified(rng, 6, 4, 2, 0.0, PlaneAxis::XZ);  // 24 cells
  shares[1].yz = random_sparsified(rng, 6, 4, 2, 0.0, PlaneAxis::YZ);
  const auto sparse_before = shares[0].xz.payload.indices;

  // force roughly a half cut of the dense share
  const uint64_t budget = (3 + 3 + 12 + 12) * 2 * 4;
  const double r = enforce_budget(shares, {budget});
  CHECK(r > 0.0);
  CHECK(r < 0.9);
  CHECK(shares[0].xz.payload.indices == sparse_before);
  CHECK(shares[1].xz.payload.indices.size() <= 13);
}

TEST_CASE("pose conditioner starts at a half gate and trains", "[v2x]") {
  Rng rng(37);
  ParamStore ps;
  PoseConditioner cond = PoseConditioner::create(ps, "cond", 4, rng);
  const Tensor g = cond.gate(Pose(3.0, -2.0, 0.5, 1.2));
  REQUIRE(g.shape() == std::vector<size_t>{4});
  for (size_t i = 0; i < 4; ++i) CHECK(g.at(i) == 0.5);

  Tensor xz = rand_tensor({3, 2, 4}, rng);
  Tensor yz = rand_tensor({2, 2, 4}, rng);
  const auto [cxz, cyz] = pose_aware_condition(xz, yz, cond, Pose(1, 2, 0, 0.3));
  for (size_t i = 0; i < cxz.numel(); ++i)
    CHECK(cxz.at(i) == Catch::Approx(0.5 * xz.at(i)).margin(1e-12));
  for (size_t i = 0; i < cyz.numel(); ++i)
    CHECK(cyz.at(i) == Catch::Approx(0.5 * yz.at(i)).margin(1e-12));

  // gradients through the gate MLP
  for (auto& v : cond.w2.values()) v = rng.uniform(-0.5, 0.5);
  for (auto& v : cond.b1.values()) v = rng.uniform(-0.3, 0.3);
  const Pose rel(2.0, -1.0, 0.0, 0.7);
  auto loss = [&] {
    const auto [a, b] = pose_aware_condition(xz, yz, cond, rel);
    return add(project(a, 37), project(b, 38));
  };
  CHECK(finite_diff_check(loss, cond.w1) < kGradTol);
  CHECK(finite_diff_check(loss, cond.b1) < kGradTol);
  CHECK(finite_diff_check(loss, cond.w2) < kGradTol);
  CHECK(finite_diff_check(loss, cond.b2) < kGradTol);
}

TEST_CASE("reference shifts come from the relative offset in cells", "[v2x]") {
  const ReferenceShift none = plane_reference_shift(Pose(), 2.0);
  CHECK(none.xz_row == 0.0);
  CHECK(none.yz_row == 0.0);

  const ReferenceShift s = plane_reference_shift(Pose(2.0, -3.0, 0.4, 0.7), 0.5);
  CHECK(s.xz_row == Catch::Approx(-4.0));
  CHECK(s.yz_row == Catch::Approx(6.0));
  CHECK_THROWS_AS(plane_reference_shift(Pose(), 0.0), std::invalid_argument);
}

TEST_CASE("message construction rejects wrong plane axes", "[v2x]") {
  Rng rng(41);
  const auto xz = random_sparsified(rng, 3, 2, 2, 0.0, PlaneAxis::XZ);
  const auto yz = random_sparsified(rng, 2, 2, 2, 0.0, PlaneAxis::YZ);
  const auto xy = random_sparsified(rng, 3, 3, 2, 0.0, PlaneAxis::XY);
  CHECK_NOTHROW(make_message(7, Pose(), xz, yz));
  CHECK_THROWS_AS(make_message(7, Pose(), xy, yz), std::invalid_argument);
  CHECK_THROWS_AS(make_message(7, Pose(), xz, xz), std::invalid_argument);

  const V2XMessage m = make_message(7, Pose(1, 2, 0, 0), xz, yz);
  CHECK(message_cv(m) == payload_bytes(xz.payload) + payload_bytes(yz.payload));
  CHECK(message_overhead(m) ==
        27 + 2 * 11 + 4 * (xz.payload.indices.size() + yz.payload.indices.size()));
}
