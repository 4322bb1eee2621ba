#include "corrcount/distill.hpp"

#include <cmath>

#include "corrcount/error.hpp"
#include "corrcount/f32r.hpp"
#include "corrcount/ops.hpp"

namespace corrcount {

DistillationParams DistillationParams::init(std::int64_t channels) {
  DistillationParams p;
  p.gamma = Tensor::full({channels}, 1.0, /*requires_grad=*/true);
  p.beta = Tensor::zeros({channels}, /*requires_grad=*/true);
  return p;
}

double correlation_scale(std::int64_t He, std::int64_t We, std::int64_t C) {
  return std::sqrt(static_cast<double>(He * We * C));
}

Tensor raw_correlation(const Tensor& f_I, const Tensor& f_e, const DistillationParams& params) {
  if (f_I.rank() != 3 || f_e.rank() != 4 || f_I.dim(0) != f_e.dim(1)) {
    throw ContractViolation("raw_correlation: channel mismatch, f_I " + shape_str(f_I.shape()) + " vs f_e " +
                            shape_str(f_e.shape()));
  }
  Tensor ln_image = layer_norm(f_I, params.gamma, params.beta, params.eps, /*channel_dim=*/0);
  Tensor ln_exemplar = layer_norm(f_e, params.gamma, params.beta, params.eps, /*channel_dim=*/1);
  return cross_correlate_2d(ln_image, ln_exemplar);
}

Tensor exemplar_normalize(const Tensor& A, double s) {
  if (A.rank() != 3) throw ContractViolation("exemplar_normalize: correlation must be [K,H,W]");
  return softmax(div(A, s), /*dim=*/0);
}

Tensor spatial_normalize(const Tensor& A, double s) {
  if (A.rank() != 3) throw ContractViolation("spatial_normalize: correlation must be [K,H,W]");
  Tensor peak = reduce_max(A, {1, 2}, /*keepdim=*/true);
  Tensor shifted = sub(A, expand_from_keepdim(peak, A.shape()));
  return exp(div(shifted, s));
}

Tensor fuse_normalizations(const Tensor& A_e, const Tensor& A_s) {
  return mul(A_e, A_s);
}

CorrelationStack distill(const Tensor& f_I, const Tensor& f_e, const DistillationParams& params,
                         bool exemplar_norm, bool spatial_norm) {
  CorrelationStack stack;
  const double s = correlation_scale(f_e.dim(2), f_e.dim(3), f_e.dim(1));
  stack.raw = raw_correlation(f_I, f_e, params);
  if (exemplar_norm) stack.exemplar_normalized = exemplar_normalize(stack.raw, s);
  if (spatial_norm) stack.spatial_normalized = spatial_normalize(stack.raw, s);
  if (exemplar_norm && spatial_norm) {
    stack.fused = fuse_normalizations(stack.exemplar_normalized, stack.spatial_normalized);
  } else if (exemplar_norm) {
    stack.fused = stack.exemplar_normalized;
  } else if (spatial_norm) {
    stack.fused = stack.spatial_normalized;
  } else {
    stack.fused = div(stack.raw, s);
  }
  return stack;
}

void export_correlation(const std::filesystem::path& dir, const std::string& stem, const Tensor& comp) {
  if (comp.rank() != 3) throw ContractViolation("export_correlation: component must be [K,H,W]");
  std::filesystem::create_directories(dir);
  write_f32r(dir / (stem + ".f32r"), comp);
  const std::int64_t K = comp.dim(0), H = comp.dim(1), W = comp.dim(2);
  for (std::int64_t k = 0; k < K; ++k) {
    write_pgm(dir / (stem + "_k" + std::to_string(k) + ".pgm"), H, W,
              comp.values().subspan(static_cast<std::size_t>(k * H * W), static_cast<std::size_t>(H * W)));
  }
}

}  // namespace corrcount
