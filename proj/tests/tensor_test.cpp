#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "corrcount/error.hpp"
#include "corrcount/ops.hpp"
#include "test_util.hpp"

using namespace corrcount;
using namespace corrcount::testutil;

TEST_CASE("construction enforces the shape/data contract") {
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ContractViolation);
  CHECK_THROWS_AS(Tensor::from_data({2}, {1.0, std::nan("")}, false), ContractViolation);
  CHECK_THROWS_AS(Tensor::from_data({2}, {1.0, std::numeric_limits<double>::infinity()}), ContractViolation);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), ContractViolation);
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 6.0);
}

TEST_CASE("elementwise mul matches its definition") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({2}, {3, 4});
  Tensor c = mul(a, b);
  CHECK(c.at({0}) == 3.0);
  CHECK(c.at({1}) == 8.0);
}

TEST_CASE("adding scalar zero is bit-identical") {
  Rng rng(5);
  Tensor x = Tensor::uniform({3, 4}, rng, -2, 2);
  CHECK(bitwise_equal(add(x, 0.0), x));
}

TEST_CASE("exp matches the per-element scalar oracle") {
  const double ln2 = std::log(2.0);
  Tensor x = Tensor::from_data({2}, {0.0, ln2});
  Tensor y = exp(x);
  // Oracle: direct std::exp per element.
  CHECK(y.at({0}) == doctest::Approx(std::exp(0.0)).epsilon(1e-15));
  CHECK(y.at({1}) == doctest::Approx(std::exp(ln2)).epsilon(1e-15));
  CHECK(y.at({0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y.at({1}) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("shape mismatch errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    (void)add(a, b);
    FAIL("expected ContractViolation");
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("reduce_sum over columns") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor s = reduce_sum(a, {1});
  CHECK(s.shape() == Shape{2});
  CHECK(s.at({0}) == 3.0);
  CHECK(s.at({1}) == 7.0);
}

TEST_CASE("reduce_max over all dims") {
  Tensor a = Tensor::from_data({2, 2}, {1, 5, 2, 2});
  Tensor m = reduce_max(a, {0, 1});
  CHECK(m.numel() == 1);
  CHECK(m.item() == 5.0);
}

TEST_CASE("reduce over an empty dim set is rejected") {
  Tensor a = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(reduce_sum(a, {}), ContractViolation);
  CHECK_THROWS_AS(reduce_max(a, {7}), ContractViolation);
}

TEST_CASE("mean of 100 seeded samples matches a two-pass oracle") {
  Rng rng(99);
  Tensor a = Tensor::uniform({100}, rng, -3, 3);
  const double got = reduce_mean(a, {0}).item();
  // Oracle: independent two-pass mean in long double.
  long double acc = 0;
  for (double v : a.values()) acc += v;
  const double want = static_cast<double>(acc / 100.0L);
  CHECK(std::fabs(got - want) <= 1e-12);
}

TEST_CASE("reduce keepdim keeps extent-1 dims") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s = reduce_sum(a, {1}, true);
  CHECK(s.shape() == Shape{2, 1});
}

TEST_CASE("softmax symmetry, oracle value, and overflow safety") {
  Tensor s0 = softmax(Tensor::from_data({2}, {0, 0}), 0);
  CHECK(s0.at({0}) == doctest::Approx(0.5).epsilon(1e-15));

  const double ln3 = std::log(3.0);
  Tensor s1 = softmax(Tensor::from_data({2}, {0, ln3}), 0);
  // Oracle: direct formula e^x / sum e^x.
  const double z = std::exp(0.0) + std::exp(ln3);
  CHECK(s1.at({0}) == doctest::Approx(std::exp(0.0) / z).epsilon(1e-14));
  CHECK(s1.at({1}) == doctest::Approx(0.75).epsilon(1e-12));

  Tensor s2 = softmax(Tensor::from_data({2}, {1000, 1000}), 0);
  CHECK(s2.at({0}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s2.all_finite());
}

TEST_CASE("softmax slices sum to 1 and are shift-invariant") {
  Rng rng(7);
  Tensor a = Tensor::uniform({3, 4, 5}, rng, -4, 4);
  for (int dim = 0; dim < 3; ++dim) {
    Tensor s = softmax(a, dim);
    Tensor sums = reduce_sum(s, {dim});
    for (double v : sums.values()) CHECK(std::fabs(v - 1.0) <= 1e-12);
  }
  Tensor shifted = softmax(add(a, 13.25), 1);
  CHECK(max_abs_diff(shifted, softmax(a, 1)) <= 1e-12);
}

TEST_CASE("layer_norm handles constant, simple, and collapsed cases") {
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});

  Tensor constant = layer_norm(Tensor::from_data({2}, {1, 1}), gamma, beta, 1e-5, 0);
  CHECK(std::fabs(constant.at({0})) <= 1e-9);
  CHECK(std::fabs(constant.at({1})) <= 1e-9);

  Tensor simple = layer_norm(Tensor::from_data({2}, {0, 2}), gamma, beta, 1e-5, 0);
  // Oracle: hand standardization, mu=1, var=1, eps-stabilized.
  const double want = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(simple.at({0}) == doctest::Approx(-want).epsilon(1e-12));
  CHECK(simple.at({1}) == doctest::Approx(want).epsilon(1e-12));
  CHECK(simple.at({0}) == doctest::Approx(-1.0).epsilon(1e-4));

  Rng rng(3);
  Tensor zero_gamma = Tensor::zeros({2});
  Tensor b_const = Tensor::full({2}, 0.7);
  Tensor collapsed = layer_norm(Tensor::uniform({2, 3}, rng, -5, 5), zero_gamma, b_const, 1e-5, 0);
  for (double v : collapsed.values()) CHECK(v == 0.7);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  Rng rng(11);
  Tensor x = Tensor::uniform({2, 3, 2}, rng, -1, 1, true);
  backward(sum_all(x));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum of squares gives 2x") {
  Rng rng(12);
  Tensor x = Tensor::uniform({7}, rng, -2, 2, true);
  backward(sum_all(mul(x, x)));
  const auto xv = x.values();
  const auto gv = x.grad();
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(gv[i] == doctest::Approx(2 * xv[i]).epsilon(1e-15));
}

TEST_CASE("fan-out accumulates additively: d/dx sum(x + x) == 2") {
  Rng rng(13);
  Tensor x = Tensor::uniform({5}, rng, -1, 1, true);
  backward(sum_all(add(x, x)));
  for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("backward requires a tracked scalar") {
  Tensor x = Tensor::zeros({3}, true);
  CHECK_THROWS_AS(backward(add(x, 1.0)), ContractViolation);  // non-scalar
  Tensor untracked = Tensor::scalar(1.0);
  CHECK_THROWS_AS(backward(untracked), ContractViolation);
}

TEST_CASE("reduce_max routes ties to the first row-major maximum") {
  Tensor x = Tensor::from_data({4}, {2, 5, 5, 1}, true);
  backward(sum_all(reduce_max(x, {0})));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 0.0);
  CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("max_with scalar and tensor variants") {
  Tensor a = Tensor::from_data({3}, {-1, 0.5, 2});
  Tensor m = max_with(a, 0.0);
  CHECK(m.at({0}) == 0.0);
  CHECK(m.at({1}) == 0.5);
  Tensor b = Tensor::from_data({3}, {0, 1, 1});
  Tensor mm = max_with(a, b);
  CHECK(mm.at({0}) == 0.0);
  CHECK(mm.at({2}) == 2.0);
}

TEST_CASE("seeded uniform construction is deterministic") {
  Rng r1(42), r2(42);
  Tensor a = Tensor::uniform({4, 4}, r1, -1, 1);
  Tensor b = Tensor::uniform({4, 4}, r2, -1, 1);
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("concat, reshape, expand round trips") {
  Tensor a = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12});
  Tensor c = concat_channels({a, b});
  CHECK(c.shape() == Shape{3, 2, 2});
  CHECK(c.at({2, 1, 1}) == 12.0);
  CHECK_THROWS_AS(concat_channels({a, Tensor::zeros({1, 3, 2})}), ContractViolation);

  Tensor r = reshape(c, {12});
  CHECK(r.at({7}) == 8.0);
  CHECK_THROWS_AS(reshape(c, {5}), ContractViolation);

  Tensor m = reduce_max(b, {1, 2}, true);  // [2,1,1]
  Tensor e = expand_from_keepdim(m, b.shape());
  CHECK(e.at({0, 1, 1}) == 8.0);
  CHECK(e.at({1, 0, 0}) == 12.0);
}
