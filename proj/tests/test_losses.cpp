#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cohff/common.hpp"
#include "cohff/losses.hpp"
#include "cohff/ops.hpp"

using namespace cohff;

TEST_CASE("focal loss closed-form cases", "[losses]") {
  // p=0.5, y=1, alpha=1, gamma=2 -> 0.25 ln 2
  Tensor p = Tensor::from({1}, {0.5});
  CHECK(focal_loss(p, {1}, 1.0, 2.0).item() ==
        Catch::Approx(0.25 * std::log(2.0)).epsilon(1e-14));
  CHECK(focal_loss(p, {1}, 1.0, 2.0).item() ==
        Catch::Approx(0.17328679513998632).epsilon(1e-13));

  // confident correct prediction -> ~0
  CHECK(focal_loss(Tensor::from({1}, {1.0 - 1e-7}), {1}, 0.25, 2.0).item() <
        1e-13);

  // symmetric: p=0.5 with y=0 same value
  CHECK(focal_loss(p, {0}, 1.0, 2.0).item() ==
        Catch::Approx(0.25 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("focal loss with gamma 0 is binary cross-entropy", "[losses]") {
  Rng rng(3);
  Tensor p({20});
  std::vector<uint8_t> y(20);
  for (size_t i = 0; i < 20; ++i) {
    p.at(i) = rng.uniform(0.05, 0.95);
    y[i] = rng.uniform() < 0.5 ? 0 : 1;
  }
  const double fl = focal_loss(p, y, 1.0, 0.0).item();
  double bce = 0;
  for (size_t i = 0; i < 20; ++i)
    bce += y[i] ? -std::log(p.at(i)) : -std::log(1 - p.at(i));
  bce /= 20;
  CHECK(std::abs(fl - bce) < 1e-12);
}

TEST_CASE("focal loss is a mean over all elements", "[losses]") {
  Tensor p = Tensor::from({2}, {0.5, 0.5});
  const double single = focal_loss(Tensor::from({1}, {0.5}), {1}, 0.25, 2.0).item();
  CHECK(focal_loss(p, {1, 1}, 0.25, 2.0).item() == Catch::Approx(single));
}

TEST_CASE("focal loss gradient w.r.t. probabilities", "[losses]") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Tensor p({8});
    std::vector<uint8_t> y(8);
    for (size_t i = 0; i < 8; ++i) {
      p.at(i) = rng.uniform(0.05, 0.95);
      y[i] = rng.uniform() < 0.5 ? 0 : 1;
    }
    const double alpha = rng.uniform(0.1, 1.0);
    const double gamma = static_cast<double>(rng.uniform_int(0, 3));
    CHECK(finite_diff_check([&] { return focal_loss(p, y, alpha, gamma); }, p) < 1e-6);
  }
}

TEST_CASE("focal loss through sigmoid passes gradient check", "[losses]") {
  Rng rng(5);
  Tensor logits({6});
  std::vector<uint8_t> y(6);
  for (size_t i = 0; i < 6; ++i) {
    logits.at(i) = rng.uniform(-2, 2);
    y[i] = rng.uniform() < 0.5 ? 0 : 1;
  }
  CHECK(finite_diff_check([&] { return focal_loss(sigmoid(logits), y); }, logits) <
        1e-6);
}

TEST_CASE("weighted cross-entropy closed-form cases", "[losses]") {
  // uniform logits, 13 classes, unit weights -> ln 13
  Tensor uniform({4, 13}, 0.0);
  std::vector<double> w1(13, 1.0);
  CHECK(weighted_cross_entropy(uniform, {0, 5, 8, 12}, w1).item() ==
        Catch::Approx(std::log(13.0)).epsilon(1e-14));
  CHECK(std::log(13.0) == Catch::Approx(2.5649493574615367).epsilon(1e-15));

  // confident correct logit -> ~0
  Tensor confident({1, 3}, 0.0);
  confident.at(1) = 50.0;
  CHECK(weighted_cross_entropy(confident, {1}, {1, 1, 1}).item() < 1e-12);

  // logits [1,0], label 0, w=[2,1] -> 2 ln(1+e^-1)
  Tensor two = Tensor::from({1, 2}, {1.0, 0.0});
  CHECK(weighted_cross_entropy(two, {0}, {2.0, 1.0}).item() ==
        Catch::Approx(2.0 * std::log(1.0 + std::exp(-1.0))).epsilon(1e-14));
  CHECK(weighted_cross_entropy(two, {0}, {2.0, 1.0}).item() ==
        Catch::Approx(0.6265233750364456).epsilon(1e-13));
}

TEST_CASE("weighted cross-entropy validates labels and shapes", "[losses]") {
  Tensor logits({2, 3}, 0.0);
  CHECK_THROWS_AS(weighted_cross_entropy(logits, {0, 3}, {1, 1, 1}),
                  std::invalid_argument);
  CHECK_THROWS_AS(weighted_cross_entropy(logits, {0}, {1, 1, 1}),
                  std::invalid_argument);
  CHECK_THROWS_AS(weighted_cross_entropy(logits, {0, 1}, {1, 1}),
                  std::invalid_argument);
}

TEST_CASE("weighted cross-entropy gradient w.r.t. logits", "[losses]") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const size_t C = 2 + rng.uniform_int(0, 4);
    Tensor logits({5, C});
    for (auto& v : logits.values()) v = rng.uniform(-2, 2);
    std::vector<uint8_t> labels(5);
    for (auto& l : labels) l = static_cast<uint8_t>(rng.uniform_int(0, C - 1));
    std::vector<double> w(C);
    for (auto& x : w) x = rng.uniform(0.2, 3.0);
    CHECK(finite_diff_check([&] { return weighted_cross_entropy(logits, labels, w); },
                            logits) < 1e-6);
  }
}

TEST_CASE("inverse frequency weights normalize present classes to mean 1",
          "[losses]") {
  // 6 of class 0, 2 of class 2; class 1 absent
  std::vector<uint8_t> labels = {0, 0, 0, 0, 0, 0, 2, 2};
  const auto w = inverse_frequency_weights(labels, 3);
  CHECK(w[1] == 1.0);
  CHECK((w[0] + w[2]) / 2.0 == Catch::Approx(1.0));
  CHECK(w[2] / w[0] == Catch::Approx(3.0));  // rarer class weighted up
  CHECK_THROWS_AS(inverse_frequency_weights({5}, 3), std::invalid_argument);
}
