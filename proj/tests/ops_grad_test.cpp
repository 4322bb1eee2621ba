#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "corrcount/error.hpp"
#include "corrcount/ops.hpp"
#include "test_util.hpp"

using namespace corrcount;
using namespace corrcount::testutil;

namespace {

constexpr double kGradTol = 1e-5;

// Six-nested-loop reference for cross_correlate_2d, independent of the
// shifted-overlap implementation.
Tensor naive_cross_correlate(const Tensor& x, const Tensor& ker) {
  const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::int64_t K = ker.dim(0), He = ker.dim(2), We = ker.dim(3);
  std::vector<double> out(static_cast<std::size_t>(K * H * W), 0.0);
  for (std::int64_t k = 0; k < K; ++k)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x0 = 0; x0 < W; ++x0)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t i = 0; i < He; ++i)
            for (std::int64_t j = 0; j < We; ++j) {
              const std::int64_t yy = y + i - He / 2;
              const std::int64_t xx = x0 + j - We / 2;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              out[static_cast<std::size_t>((k * H + y) * W + x0)] +=
                  x.at({c, yy, xx}) * ker.at({k, c, i, j});
            }
  return Tensor::from_data({K, H, W}, std::move(out));
}

// Per-(k,c) correlation of a with the both-axes-flipped kernel: the stated
// oracle for convolve_place_2d.
Tensor flip_then_correlate(const Tensor& a, const Tensor& ker) {
  const std::int64_t K = a.dim(0), H = a.dim(1), W = a.dim(2);
  const std::int64_t C = ker.dim(1), He = ker.dim(2), We = ker.dim(3);
  std::vector<double> out(static_cast<std::size_t>(K * C * H * W), 0.0);
  for (std::int64_t k = 0; k < K; ++k)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x0 = 0; x0 < W; ++x0) {
          double acc = 0;
          for (std::int64_t i = 0; i < He; ++i)
            for (std::int64_t j = 0; j < We; ++j) {
              const std::int64_t yy = y + i - He / 2;
              const std::int64_t xx = x0 + j - We / 2;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              acc += a.at({k, yy, xx}) * ker.at({k, c, He - 1 - i, We - 1 - j});
            }
          out[static_cast<std::size_t>(((k * C + c) * H + y) * W + x0)] = acc;
        }
  return Tensor::from_data({K, C, H, W}, std::move(out));
}

}  // namespace

TEST_CASE("gradients: elementwise family") {
  Rng rng(101);
  Tensor a = Tensor::uniform({3, 4}, rng, -1, 1, true);
  Tensor b = Tensor::uniform({3, 4}, rng, 0.5, 1.5, true);
  std::vector<Tensor> params{a, b};
  auto loss = [&] {
    Tensor t = add(mul(a, b), div(a, b));
    t = sub(t, mul(b, 0.25));
    t = add(max_with(t, 0.1), exp(mul(t, 0.3)));
    return mean_all(mul(t, t));
  };
  CHECK(fd_max_rel_error(params, loss) <= kGradTol);
}

TEST_CASE("gradients: relu and max_with tensor") {
  Rng rng(102);
  Tensor a = Tensor::uniform({4, 5}, rng, -1, 1, true);
  Tensor b = Tensor::uniform({4, 5}, rng, -1, 1, true);
  std::vector<Tensor> params{a, b};
  auto loss = [&] { return sum_all(mul(relu(a), max_with(a, b))); };
  CHECK(fd_max_rel_error(params, loss) <= kGradTol);
}

TEST_CASE("gradients: reductions") {
  Rng rng(103);
  Tensor a = Tensor::uniform({3, 4, 2}, rng, -1, 1, true);
  std::vector<Tensor> params{a};
  auto loss = [&] {
    Tensor s = reduce_sum(a, {1});
    Tensor m = reduce_mean(a, {0, 2});
    Tensor x = reduce_max(a, {2}, true);
    return add(add(sum_all(mul(s, s)), sum_all(mul(m, m))), sum_all(mul(x, x)));
  };
  CHECK(fd_max_rel_error(params, loss) <= kGradTol);
}

TEST_CASE("gradients: softmax and layer_norm") {
  Rng rng(104);
  Tensor a = Tensor::uniform({3, 4, 5}, rng, -2, 2, true);
  Tensor gamma = Tensor::uniform({4}, rng, 0.5, 1.5, true);
  Tensor beta = Tensor::uniform({4}, rng, -0.5, 0.5, true);
  std::vector<Tensor> params{a, gamma, beta};
  auto loss = [&] {
    Tensor n = layer_norm(a, gamma, beta, 1e-5, 1);
    Tensor s = softmax(n, 0);
    return mean_all(mul(s, n));
  };
  CHECK(fd_max_rel_error(params, loss) <= kGradTol);
}

TEST_CASE("gradients: cross_correlate_2d, both arguments") {
  Rng rng(105);
  Tensor x = Tensor::uniform({2, 6, 7}, rng, -1, 1, true);
  Tensor k = Tensor::uniform({3, 2, 3, 5}, rng, -1, 1, true);
  std::vector<Tensor> params{x, k};
  auto loss = [&] {
    Tensor c = cross_correlate_2d(x, k);
    return mean_all(mul(c, c));
  };
  CHECK(fd_max_rel_error(params, loss) <= kGradTol);
}

TEST_CASE("gradients: convolve_place_2d and correlate_place_2d") {
  Rng rng(106);
  Tensor a = Tensor::uniform({2, 5, 6}, rng, -1, 1, true);
  Tensor k = Tensor::uniform({2, 3, 3, 3}, rng, -1, 1, true);
  std::vector<Tensor> params{a, k};
  auto loss_flip = [&] { return mean_all(mul(convolve_place_2d(a, k), add(a.detach(), 1.0))); };
  CHECK(fd_max_rel_error(params, [&] {
          Tensor p = convolve_place_2d(a, k);
          return mean_all(mul(p, p));
        }) <= kGradTol);
  CHECK(fd_max_rel_error(params, [&] {
          Tensor p = correlate_place_2d(a, k);
          return mean_all(mul(p, p));
        }) <= kGradTol);
  (void)loss_flip;
}

TEST_CASE("gradients: bilinear_resize, avg_pool, bias, pool cells, flip, expand") {
  Rng rng(107);
  Tensor x = Tensor::uniform({2, 4, 6}, rng, -1, 1, true);
  Tensor bias = Tensor::uniform({2}, rng, -0.3, 0.3, true);
  std::vector<Tensor> params{x, bias};
  auto loss = [&] {
    Tensor t = add_channel_bias(x, bias);
    t = bilinear_resize(t, 7, 5);
    t = relu(t);
    t = bilinear_resize(t, 8, 6);
    t = avg_pool_2x2(t);
    Tensor p = max_pool_cells(t, {{0, 2}, {2, 4}}, {{0, 1}, {1, 3}});
    Tensor f = flip_hw(p);
    Tensor m = reduce_max(f, {1, 2}, true);
    Tensor e = expand_from_keepdim(m, f.shape());
    return sum_all(mul(f, e));
  };
  CHECK(fd_max_rel_error(params, loss) <= kGradTol);
}

TEST_CASE("cross_correlate_2d: identity 1x1 kernel reproduces the input") {
  Rng rng(108);
  Tensor x = Tensor::uniform({1, 5, 5}, rng, -1, 1);
  Tensor k = Tensor::from_data({1, 1, 1, 1}, {1.0});
  CHECK(bitwise_equal(reshape(cross_correlate_2d(x, k), x.shape()), x));
}

TEST_CASE("cross_correlate_2d: impulse response is the flipped kernel") {
  std::vector<double> img(25, 0.0);
  img[12] = 1.0;  // delta at center of 5x5
  Tensor x = Tensor::from_data({1, 5, 5}, std::move(img));
  Rng rng(109);
  Tensor k = Tensor::uniform({1, 1, 3, 3}, rng, -1, 1);
  Tensor out = cross_correlate_2d(x, k);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 3; ++j)
      CHECK(out.at({0, 2 + 1 - i, 2 + 1 - j}) == k.at({0, 0, i, j}));
}

TEST_CASE("cross_correlate_2d matches the six-nested-loop oracle") {
  Rng rng(110);
  Tensor x = Tensor::uniform({1, 5, 5}, rng, -1, 1);
  Tensor k = Tensor::uniform({2, 1, 3, 3}, rng, -1, 1);
  CHECK(max_abs_diff(cross_correlate_2d(x, k), naive_cross_correlate(x, k)) <= 1e-12);
}

TEST_CASE("cross_correlate_2d is linear in each argument") {
  Rng rng(111);
  Tensor x1 = Tensor::uniform({2, 6, 6}, rng, -1, 1);
  Tensor x2 = Tensor::uniform({2, 6, 6}, rng, -1, 1);
  Tensor k = Tensor::uniform({2, 2, 3, 3}, rng, -1, 1);
  Tensor lhs = cross_correlate_2d(add(x1, x2), k);
  Tensor rhs = add(cross_correlate_2d(x1, k), cross_correlate_2d(x2, k));
  CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
}

TEST_CASE("cross_correlate_2d rejects channel mismatch") {
  CHECK_THROWS_AS(cross_correlate_2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3})),
                  ContractViolation);
  CHECK_THROWS_AS(cross_correlate_2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 2, 2, 2})),
                  ContractViolation);
}

TEST_CASE("convolve_place_2d: delta correlation places the unflipped kernel") {
  std::vector<double> a(49, 0.0);
  a[3 * 7 + 2] = 1.0;  // delta at (3,2) in 7x7
  Tensor an = Tensor::from_data({1, 7, 7}, std::move(a));
  Rng rng(112);
  Tensor k = Tensor::uniform({1, 2, 3, 3}, rng, -1, 1);
  Tensor out = convolve_place_2d(an, k);
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t j = 0; j < 3; ++j)
        CHECK(out.at({0, c, 3 + i - 1, 2 + j - 1}) == k.at({0, c, i, j}));
}

TEST_CASE("convolve_place_2d: zero correlation gives zero output") {
  Rng rng(113);
  Tensor k = Tensor::uniform({2, 3, 3, 3}, rng, -1, 1);
  Tensor out = convolve_place_2d(Tensor::zeros({2, 5, 5}), k);
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("convolve_place_2d equals the flip-then-correlate oracle") {
  Rng rng(114);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = Tensor::uniform({2, 6, 5}, rng, -1, 1);
    Tensor k = Tensor::uniform({2, 3, 3, 3}, rng, -1, 1);
    CHECK(max_abs_diff(convolve_place_2d(a, k), flip_then_correlate(a, k)) <= 1e-12);
    // And via the op-level identity with flip_hw.
    CHECK(max_abs_diff(convolve_place_2d(a, k), correlate_place_2d(a, flip_hw(k))) <= 1e-12);
  }
}

TEST_CASE("convolve_place_2d rejects exemplar-count mismatch") {
  CHECK_THROWS_AS(convolve_place_2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({3, 1, 3, 3})),
                  ContractViolation);
}

TEST_CASE("bilinear_resize: identity, constancy, and the 2x2->4x4 oracle") {
  Rng rng(115);
  Tensor x = Tensor::uniform({2, 5, 7}, rng, -1, 1);
  CHECK(bitwise_equal(bilinear_resize(x, 5, 7), x));

  Tensor c = Tensor::full({1, 3, 3}, 0.37);
  Tensor up = bilinear_resize(c, 9, 5);
  for (double v : up.values()) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));

  Tensor small = Tensor::from_data({1, 2, 2}, {0, 1, 2, 3});
  Tensor big = bilinear_resize(small, 4, 4);
  // Oracle: direct evaluation of the half-pixel-center sampling formula.
  auto sample = [&](std::int64_t oy, std::int64_t ox) {
    auto tap = [](std::int64_t i, std::int64_t n_in, std::int64_t n_out, std::int64_t* lo, std::int64_t* hi,
                  double* w) {
      const double src = (static_cast<double>(i) + 0.5) * (static_cast<double>(n_in) / n_out) - 0.5;
      const double f = std::floor(src);
      *lo = std::clamp<std::int64_t>(static_cast<std::int64_t>(f), 0, n_in - 1);
      *hi = std::clamp<std::int64_t>(static_cast<std::int64_t>(f) + 1, 0, n_in - 1);
      *w = src - f;
    };
    std::int64_t y0, y1, x0, x1;
    double wy, wx;
    tap(oy, 2, 4, &y0, &y1, &wy);
    tap(ox, 2, 4, &x0, &x1, &wx);
    const double top = small.at({0, y0, x0}) * (1 - wx) + small.at({0, y0, x1}) * wx;
    const double bot = small.at({0, y1, x0}) * (1 - wx) + small.at({0, y1, x1}) * wx;
    return top * (1 - wy) + bot * wy;
  };
  for (std::int64_t y = 0; y < 4; ++y)
    for (std::int64_t x0 = 0; x0 < 4; ++x0)
      CHECK(big.at({0, y, x0}) == doctest::Approx(sample(y, x0)).epsilon(1e-12));
}

TEST_CASE("avg_pool_2x2 averages blocks and rejects odd extents") {
  Tensor x = Tensor::from_data({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor p = avg_pool_2x2(x);
  CHECK(p.shape() == Shape{1, 1, 2});
  CHECK(p.at({0, 0, 0}) == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(p.at({0, 0, 1}) == doctest::Approx(5.5).epsilon(1e-15));
  CHECK_THROWS_AS(avg_pool_2x2(Tensor::zeros({1, 3, 4})), ContractViolation);
}

TEST_CASE("max_pool_cells pools explicit ranges") {
  Tensor x = Tensor::from_data({1, 2, 3}, {1, 9, 2, 4, 0, 7});
  Tensor p = max_pool_cells(x, {{0, 2}}, {{0, 2}, {2, 3}});
  CHECK(p.shape() == Shape{1, 1, 2});
  CHECK(p.at({0, 0, 0}) == 9.0);
  CHECK(p.at({0, 0, 1}) == 7.0);
  CHECK_THROWS_AS(max_pool_cells(x, {{0, 0}}, {{0, 1}}), ContractViolation);
  CHECK_THROWS_AS(max_pool_cells(x, {{0, 3}}, {{0, 1}}), ContractViolation);
}
