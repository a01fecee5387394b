#include <catch2/catch_amalgamated.hpp>

#include "cohff/common.hpp"
#include "cohff/ops.hpp"
#include "cohff/tensor.hpp"

using namespace cohff;

TEST_CASE("tensor construction and shape contracts", "[tensor]") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.dim(0) == 2);
  CHECK(t.at(5) == 1.5);
  CHECK_THROWS_AS(t.item(), std::invalid_argument);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("tensor copies alias the same storage", "[tensor]") {
  Tensor a({3}, 0.0);
  Tensor b = a;
  b.at(1) = 7.0;
  CHECK(a.at(1) == 7.0);
}

TEST_CASE("backward of sum is ones", "[tensor]") {
  TapeScope scope;
  Tensor x = Tensor::from({3}, {1, 2, 3}).set_requires_grad(true);
  Tensor loss = sum(x);
  backward(loss);
  CHECK(x.grad() == std::vector<double>{1, 1, 1});
}

TEST_CASE("backward of sum of squares", "[tensor]") {
  TapeScope scope;
  Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == Catch::Approx(2.0));
  CHECK(x.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar losses", "[tensor]") {
  TapeScope scope;
  Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("backward without a tape throws", "[tensor]") {
  Tensor x = Tensor::scalar(1.0).set_requires_grad(true);
  CHECK_THROWS_AS(backward(x), std::logic_error);
}

TEST_CASE("ops without requires_grad record nothing", "[tensor]") {
  TapeScope scope;
  Tensor x = Tensor::from({2}, {1, 2});
  Tensor y = add(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(scope.tape().size() == 0);
}

TEST_CASE("no-grad scope suppresses recording", "[tensor]") {
  TapeScope scope;
  Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  {
    NoGradScope off;
    Tensor y = add(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(scope.tape().size() == 0);
  Tensor z = add(x, x);
  CHECK(z.requires_grad());
  CHECK(scope.tape().size() == 1);
}

TEST_CASE("grads accumulate across backward calls until zeroed", "[tensor]") {
  TapeScope scope;
  Tensor x = Tensor::from({1}, {3}).set_requires_grad(true);
  Tensor loss = sum(x);
  backward(loss);
  backward(loss);
  CHECK(x.grad()[0] == 2.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("shared subexpression DAG gradient sums both paths", "[tensor]") {
  // loss = sum(y) + sum(y*y) with shared y = 2x
  auto f = [](Tensor x) {
    Tensor y = scale(x, 2.0);
    return add(sum(y), sum(mul(y, y)));
  };
  Tensor x = Tensor::from({3}, {0.5, -1.0, 2.0});
  const double err = finite_diff_check([&] { return f(x); }, x);
  CHECK(err < 1e-8);
  // analytic check too: d/dx = 2 + 8x
  TapeScope scope;
  x.set_requires_grad(true);
  x.zero_grad();
  backward(f(x));
  for (size_t i = 0; i < 3; ++i)
    CHECK(x.grad()[i] == Catch::Approx(2.0 + 8.0 * x.at(i)));
}

TEST_CASE("finite_diff_check on a linear map is near machine precision", "[tensor]") {
  Rng rng(2);
  Tensor W({4, 3});
  Tensor b({3});
  Tensor x({2, 4});
  for (auto* t : {&W, &b, &x})
    for (auto& v : t->values()) v = rng.uniform(-1, 1);
  CHECK(finite_diff_check([&] { return sum(linear(x, W, b)); }, W) < 1e-9);
  CHECK(finite_diff_check([&] { return sum(linear(x, W, b)); }, x) < 1e-9);
}

TEST_CASE("finite_diff_check through a sigmoid chain", "[tensor]") {
  Rng rng(3);
  Tensor W({3, 3});
  Tensor x({2, 3});
  for (auto* t : {&W, &x})
    for (auto& v : t->values()) v = rng.uniform(-1, 1);
  const auto f = [&] { return mean(sigmoid(linear(sigmoid(linear(x, W)), W))); };
  CHECK(finite_diff_check(f, W) < 1e-6);
  CHECK(finite_diff_check(f, x) < 1e-6);
}
