#include "corrcount/refine.hpp"

#include <cmath>

#include "corrcount/error.hpp"
#include "corrcount/ops.hpp"

namespace corrcount {

RefinementParams RefinementParams::init(std::int64_t channels, Rng& rng) {
  RefinementParams p;
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels * 9));
  p.fusion_weight = Tensor::uniform({channels, channels, 3, 3}, rng, -bound, bound, /*requires_grad=*/true);
  p.fusion_bias = Tensor::zeros({channels}, /*requires_grad=*/true);
  p.ln_gamma = Tensor::full({channels}, 1.0, /*requires_grad=*/true);
  p.ln_beta = Tensor::zeros({channels}, /*requires_grad=*/true);
  return p;
}

Tensor correlated_feature_map(const Tensor& A_n, const Tensor& f_e, bool flip) {
  Tensor placed = flip ? convolve_place_2d(A_n, f_e) : correlate_place_2d(A_n, f_e);
  return reduce_sum(placed, {0});
}

Tensor fuse_refined(const Tensor& f_c, const Tensor& f_I, const RefinementParams& params) {
  if (f_c.shape() != f_I.shape()) {
    throw ContractViolation("fuse_refined: shape mismatch " + shape_str(f_c.shape()) + " vs " +
                            shape_str(f_I.shape()));
  }
  Tensor conv = add_channel_bias(cross_correlate_2d(f_c, params.fusion_weight), params.fusion_bias);
  return layer_norm(add(f_I, conv), params.ln_gamma, params.ln_beta, params.eps, /*channel_dim=*/0);
}

Tensor refine_iteratively(const Tensor& f_I, const Tensor& f_e,
                          const std::vector<RefinementParams>& params,
                          const DistillationParams& distill_params, const RefinementOptions& opt,
                          IterationTrace* trace, const RepoolContext* repool) {
  if (opt.iterations < 1) throw ContractViolation("refine_iteratively: iterations must be >= 1");
  if (params.empty() || (params.size() != 1 && params.size() != static_cast<std::size_t>(opt.iterations))) {
    throw ContractViolation("refine_iteratively: params must hold one shared entry or one per iteration");
  }
  if (opt.repool && repool == nullptr) {
    throw ContractViolation("refine_iteratively: repool enabled without box context");
  }

  Tensor f = f_I;
  Tensor exemplars = f_e;
  for (int t = 0; t < opt.iterations; ++t) {
    const RefinementParams& step = params.size() == 1 ? params[0] : params[static_cast<std::size_t>(t)];
    CorrelationStack stack = distill(f, exemplars, distill_params, opt.exemplar_norm, opt.spatial_norm);
    Tensor f_c = correlated_feature_map(stack.fused, exemplars, opt.flip);
    f = fuse_refined(f_c, f, step);
    if (!f.all_finite()) {
      throw NumericalError("refine_iteratively: non-finite refined feature map at iteration " +
                           std::to_string(t + 1));
    }
    if (opt.repool) {
      exemplars = pool_exemplar_features(f, repool->boxes, repool->image_h, repool->image_w, f_e.dim(2),
                                         f_e.dim(3));
    }
    if (trace) {
      trace->stacks.push_back(stack);
      trace->refined.push_back(f);
    }
  }
  return f;
}

void export_trace(const std::filesystem::path& dir, const IterationTrace& trace) {
  for (std::size_t t = 0; t < trace.stacks.size(); ++t) {
    export_correlation(dir, "iter" + std::to_string(t + 1) + "_fused", trace.stacks[t].fused);
  }
}

}  // namespace corrcount
