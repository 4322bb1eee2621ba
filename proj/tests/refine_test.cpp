#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "corrcount/error.hpp"
#include "corrcount/ops.hpp"
#include "corrcount/refine.hpp"
#include "test_util.hpp"

using namespace corrcount;
using namespace corrcount::testutil;

TEST_CASE("one-hot correlation places the exemplar patch bitwise") {
  Rng rng(1);
  const std::int64_t C = 4, H = 9, W = 9, y0 = 4, x0 = 6;
  std::vector<double> hot(H * W, 0.0);
  hot[y0 * W + x0] = 1.0;
  Tensor a_n = Tensor::from_data({1, H, W}, std::move(hot));
  Tensor f_e = Tensor::uniform({1, C, 3, 3}, rng, -1, 1);
  Tensor f_c = correlated_feature_map(a_n, f_e);
  CHECK(f_c.shape() == Shape{C, H, W});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int64_t dy = y - y0, dx = x - x0;
        if (std::abs(dy) <= 1 && std::abs(dx) <= 1) {
          CHECK(f_c.at({c, y, x}) == f_e.at({0, c, 1 + dy, 1 + dx}));  // bitwise
        } else {
          CHECK(f_c.at({c, y, x}) == 0.0);
        }
      }
}

TEST_CASE("zero correlation gives a zero correlated feature map") {
  Rng rng(2);
  Tensor f_e = Tensor::uniform({3, 4, 3, 3}, rng, -1, 1);
  Tensor f_c = correlated_feature_map(Tensor::zeros({3, 7, 7}), f_e);
  for (double v : f_c.values()) CHECK(v == 0.0);
}

TEST_CASE("K=2 decomposes into the sum of single-exemplar results") {
  Rng rng(3);
  const std::int64_t C = 3, H = 6, W = 5;
  Tensor a1 = Tensor::uniform({1, H, W}, rng, 0, 1);
  Tensor a2 = Tensor::uniform({1, H, W}, rng, 0, 1);
  Tensor k1 = Tensor::uniform({1, C, 3, 3}, rng, -1, 1);
  Tensor k2 = Tensor::uniform({1, C, 3, 3}, rng, -1, 1);
  Tensor joint = correlated_feature_map(concat_channels({a1, a2}), concat_channels({k1, k2}));
  Tensor split = add(correlated_feature_map(a1, k1), correlated_feature_map(a2, k2));
  CHECK(max_abs_diff(joint, split) <= 1e-12);
}

TEST_CASE("correlated_feature_map is linear in the correlation") {
  Rng rng(4);
  Tensor a1 = Tensor::uniform({2, 5, 5}, rng, -1, 1);
  Tensor a2 = Tensor::uniform({2, 5, 5}, rng, -1, 1);
  Tensor f_e = Tensor::uniform({2, 3, 3, 3}, rng, -1, 1);
  const double alpha = 0.7, beta = -1.3;
  Tensor lhs = correlated_feature_map(add(mul(a1, alpha), mul(a2, beta)), f_e);
  Tensor rhs = add(mul(correlated_feature_map(a1, f_e), alpha), mul(correlated_feature_map(a2, f_e), beta));
  CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
}

TEST_CASE("no-flip variant matches per-exemplar correlation") {
  Rng rng(5);
  Tensor a = Tensor::uniform({2, 6, 6}, rng, -1, 1);
  Tensor f_e = Tensor::uniform({2, 3, 3, 3}, rng, -1, 1);
  Tensor noflip = correlated_feature_map(a, f_e, /*flip=*/false);
  Tensor flipped_kernel = correlated_feature_map(a, flip_hw(f_e), /*flip=*/true);
  CHECK(max_abs_diff(noflip, flipped_kernel) <= 1e-12);
}

TEST_CASE("fusion with zero f_c and zero bias reduces to layer norm of f_I") {
  Rng rng(6);
  const std::int64_t C = 5;
  RefinementParams p = RefinementParams::init(C, rng);
  Tensor f_I = Tensor::uniform({C, 6, 6}, rng, -1, 1);
  Tensor fused = fuse_refined(Tensor::zeros({C, 6, 6}), f_I, p);
  CHECK(bitwise_equal(fused, layer_norm(f_I, p.ln_gamma, p.ln_beta, p.eps, 0)));
}

TEST_CASE("fusion preserves spatial shape for any H,W >= 3") {
  Rng rng(7);
  const std::int64_t C = 3;
  RefinementParams p = RefinementParams::init(C, rng);
  for (const auto [h, w] : {std::pair<std::int64_t, std::int64_t>{3, 3}, {4, 7}, {9, 5}}) {
    Tensor f = Tensor::uniform({C, h, w}, rng, -1, 1);
    CHECK(fuse_refined(f, f, p).shape() == Shape{C, h, w});
  }
  CHECK_THROWS_AS(fuse_refined(Tensor::zeros({C, 4, 4}), Tensor::zeros({C, 4, 5}), p), ContractViolation);
}

TEST_CASE("fusion gradients match finite differences") {
  Rng rng(8);
  const std::int64_t C = 4;
  RefinementParams p = RefinementParams::init(C, rng);
  Tensor f_c = Tensor::uniform({C, 5, 5}, rng, -1, 1, true);
  Tensor f_I = Tensor::uniform({C, 5, 5}, rng, -1, 1, true);
  std::vector<Tensor> params{f_c, f_I, p.fusion_weight, p.fusion_bias, p.ln_gamma, p.ln_beta};
  auto loss = [&] {
    Tensor out = fuse_refined(f_c, f_I, p);
    return mean_all(mul(out, out));
  };
  CHECK(fd_max_rel_error(params, loss, 1e-4, 24) <= 1e-5);
}

namespace {

struct MiniSetup {
  Tensor f_I, f_e;
  DistillationParams distill;
  std::vector<RefinementParams> refine;
};

MiniSetup mini(std::uint64_t seed, std::int64_t C = 4, int shared_params = 1) {
  Rng rng(seed);
  MiniSetup m;
  m.f_I = Tensor::uniform({C, 8, 8}, rng, -1, 1);
  m.f_e = Tensor::uniform({2, C, 3, 3}, rng, -1, 1);
  m.distill = DistillationParams::init(C);
  for (int i = 0; i < shared_params; ++i) m.refine.push_back(RefinementParams::init(C, rng));
  return m;
}

}  // namespace

TEST_CASE("N=1 refinement equals the manual composition") {
  MiniSetup m = mini(9);
  RefinementOptions opt;
  opt.iterations = 1;
  Tensor loop = refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt);
  CorrelationStack st = distill(m.f_I, m.f_e, m.distill);
  Tensor manual = fuse_refined(correlated_feature_map(st.fused, m.f_e), m.f_I, m.refine[0]);
  CHECK(bitwise_equal(loop, manual));
}

TEST_CASE("shape is stationary across iteration counts") {
  MiniSetup m = mini(10);
  RefinementOptions opt1, opt4;
  opt1.iterations = 1;
  opt4.iterations = 4;
  Tensor one = refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt1);
  Tensor four = refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt4);
  CHECK(one.shape() == four.shape());
}

TEST_CASE("trace length equals the iteration count") {
  MiniSetup m = mini(11);
  RefinementOptions opt;
  opt.iterations = 3;
  IterationTrace trace;
  (void)refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt, &trace);
  CHECK(trace.stacks.size() == 3);
  CHECK(trace.refined.size() == 3);
}

TEST_CASE("per-iteration parameters need one entry per iteration") {
  MiniSetup m = mini(12, 4, 2);
  RefinementOptions opt;
  opt.iterations = 3;
  CHECK_THROWS_AS(refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt), ContractViolation);
  opt.iterations = 2;
  CHECK_NOTHROW(refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt));
}

TEST_CASE("non-finite intermediates abort with the iteration index") {
  MiniSetup m = mini(13);
  auto w = m.refine[0].fusion_weight.mutable_values();
  for (auto& v : w) v = 1e308;
  RefinementOptions opt;
  opt.iterations = 2;
  try {
    (void)refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("iteration 1") != std::string::npos);
  }
}

TEST_CASE("end-to-end gradients through two iterations") {
  MiniSetup m = mini(14, 3);
  Rng gt_rng(15);
  Tensor gt = Tensor::uniform({3, 8, 8}, gt_rng, -1, 1);
  RefinementOptions opt;
  opt.iterations = 2;
  std::vector<Tensor> params{m.refine[0].fusion_weight, m.refine[0].fusion_bias, m.refine[0].ln_gamma,
                             m.refine[0].ln_beta, m.distill.gamma, m.distill.beta};
  auto loss = [&] {
    Tensor out = refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt);
    Tensor diff = sub(out, gt);
    return mean_all(mul(diff, diff));
  };
  CHECK(fd_max_rel_error(params, loss, 1e-4, 20) <= 1e-5);
}

TEST_CASE("trace export writes one fused raster set per iteration") {
  MiniSetup m = mini(16);
  RefinementOptions opt;
  opt.iterations = 2;
  IterationTrace trace;
  (void)refine_iteratively(m.f_I, m.f_e, m.refine, m.distill, opt, &trace);
  const auto dir = std::filesystem::temp_directory_path() / "corrcount_refine_trace";
  export_trace(dir, trace);
  CHECK(std::filesystem::exists(dir / "iter1_fused.f32r"));
  CHECK(std::filesystem::exists(dir / "iter2_fused.f32r"));
}
