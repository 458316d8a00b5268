#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "tokenfusion/ops.hpp"
#include "tokenfusion/tensor.hpp"

using namespace tokenfusion;

TEST_CASE("tensor construction and layout") {
  Tensor<double> t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  CHECK(t.at({0, 0}) == 1);
  CHECK(t.at({1, 2}) == 6);

  Tensor<double> s = Tensor<double>::scalar(7.0);
  CHECK(s.rank() == 0);
  CHECK(s.item() == 7.0);

  CHECK_THROWS_AS(Tensor<double>({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>({-1}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(t.item(), std::invalid_argument);
}

TEST_CASE("tensor handles alias storage; clone does not") {
  Tensor<float> a({2}, {1.f, 2.f});
  Tensor<float> alias = a;
  alias.data()[0] = 9.f;
  CHECK(a.at({0}) == 9.f);
  CHECK(a.id() == alias.id());

  Tensor<float> deep = a.clone();
  deep.data()[0] = 5.f;
  CHECK(a.at({0}) == 9.f);
  CHECK(a.id() != deep.id());
}

TEST_CASE("backward: y = x*x at x=3 gives dy/dx = 6 (fan-in accumulation)") {
  Tensor<double> x = Tensor<double>::scalar(3.0);
  x.set_requires_grad(true);
  TapeScope<double> scope;
  Tensor<double> y = mul(x, x);
  CHECK(y.item() == 9.0);
  backward(y, scope.tape);
  CHECK(x.grad_tensor().item() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward: fan-out y = x + x gives dy/dx = 2") {
  Tensor<double> x = Tensor<double>::scalar(4.0);
  x.set_requires_grad(true);
  TapeScope<double> scope;
  Tensor<double> y = add(x, x);
  backward(y, scope.tape);
  CHECK(x.grad_tensor().item() == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("backward: y = sum(x) for length-5 x gives grad = ones(5)") {
  Tensor<double> x({5}, {1, 2, 3, 4, 5});
  x.set_requires_grad(true);
  TapeScope<double> scope;
  Tensor<double> y = sum_all(x);
  CHECK(y.item() == 15.0);
  backward(y, scope.tape);
  auto g = x.grad_tensor();
  for (int64_t i = 0; i < 5; ++i) CHECK(g.at({i}) == 1.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tensor<double> x({2}, {1, 2});
  x.set_requires_grad(true);
  TapeScope<double> scope;
  Tensor<double> y = add(x, x);
  CHECK_THROWS_AS(backward(y, scope.tape), std::invalid_argument);
}

TEST_CASE("tensors off the loss ancestry get no gradient") {
  Tensor<double> x = Tensor<double>::scalar(1.0);
  Tensor<double> z = Tensor<double>::scalar(2.0);
  x.set_requires_grad(true);
  z.set_requires_grad(true);
  TapeScope<double> scope;
  Tensor<double> y = mul(x, x);
  Tensor<double> unused = mul(z, z);
  backward(y, scope.tape);
  CHECK(x.has_grad());
  CHECK_FALSE(z.has_grad());
  CHECK(unused.defined());
}

TEST_CASE("tape order is topological: every node input is a leaf or an earlier output") {
  Tensor<double> a = Tensor<double>::scalar(2.0);
  Tensor<double> b = Tensor<double>::scalar(3.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  TapeScope<double> scope;
  Tensor<double> c = mul(a, b);
  Tensor<double> d = add(c, a);
  Tensor<double> e = mul(d, c);
  backward(e, scope.tape);

  std::set<const void*> produced;
  for (const auto& node : scope.tape.nodes()) {
    for (const auto& in : node.inputs) {
      const bool is_leaf = in.id() == a.id() || in.id() == b.id();
      const bool seen = produced.count(in.id()) > 0;
      CHECK((is_leaf || seen));
    }
    produced.insert(node.output.id());
  }
}

TEST_CASE("backward visits each node exactly once, even with fan-out") {
  Tensor<double> x = Tensor<double>::scalar(2.0);
  x.set_requires_grad(true);
  TapeScope<double> scope;
  Tensor<double> sq = mul(x, x);
  Tensor<double> y = add(sq, sq);  // sq consumed twice
  const size_t recorded = scope.tape.size();
  const size_t visited = backward(y, scope.tape);
  CHECK(visited == recorded);
  CHECK(x.grad_tensor().item() == doctest::Approx(8.0));
}

TEST_CASE("no active tape means pure evaluation: nothing recorded, no grads") {
  Tensor<double> x = Tensor<double>::scalar(3.0);
  x.set_requires_grad(true);
  Tensor<double> y = mul(x, x);
  CHECK(y.item() == 9.0);
  CHECK_FALSE(y.requires_grad());
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("gradient accumulation: summed per-sample losses match the batch loss") {
  // Same weights, one batched loss vs the sum of per-sample losses.
  Rng rng(11);
  Tensor<double> w = testutil::random_tensor<double>({3, 2}, rng);
  Tensor<double> x = testutil::random_tensor<double>({4, 3}, rng);
  w.set_requires_grad(true);

  {
    TapeScope<double> scope;
    backward(sum_all(matmul(x, w)), scope.tape);
  }
  Tensor<double> batch_grad = w.grad_tensor();
  w.zero_grad();

  {
    TapeScope<double> scope;
    Tensor<double> total = Tensor<double>::scalar(0.0);
    for (int64_t i = 0; i < 4; ++i)
      total = add(total, sum_all(matmul(narrow(x, 0, i, 1), w)));
    backward(total, scope.tape);
  }
  CHECK(testutil::max_abs_diff(batch_grad, w.grad_tensor()) < 1e-6);
}

TEST_CASE("finite-check debug mode flags non-finite op outputs") {
  Tensor<double> huge = Tensor<double>::scalar(1e308);
  Tensor<double> ok = mul(huge, huge);  // inf, but checks are off
  CHECK(std::isinf(ok.item()));

  finite_checks() = true;
  CHECK_THROWS_AS(mul(huge, huge), NumericalError);
  finite_checks() = false;
}
