#pragma once

#include <cstdint>
#include <filesystem>

#include "corrcount/tensor.hpp"

namespace corrcount {

/// Parameters of the correlation-distillation step: one layer-norm instance
/// shared between the image and exemplar feature maps, plus the fixed
/// correlation scale s = sqrt(He*We*C).
struct DistillationParams {
  Tensor gamma;  // [C], trainable
  Tensor beta;   // [C], trainable
  double eps = 1e-5;

  static DistillationParams init(std::int64_t channels);
};

double correlation_scale(std::int64_t He, std::int64_t We, std::int64_t C);

/// Raw and normalized correlation maps of one distillation pass, all [K,H,W].
struct CorrelationStack {
  Tensor raw;                  // A
  Tensor exemplar_normalized;  // A_e, sums to 1 over exemplars per position
  Tensor spatial_normalized;   // A_s, per-exemplar spatial max exactly 1
  Tensor fused;                // A_n
};

/// A = LN(f_I) * LN(f_e): both inputs pass through the same layer-norm
/// instance (over channels, per spatial/kernel location), then sliding
/// cross-correlation with same padding.
Tensor raw_correlation(const Tensor& f_I, const Tensor& f_e, const DistillationParams& params);

/// Softmax over the exemplar dimension of A/s.
Tensor exemplar_normalize(const Tensor& A, double s);

/// exp(A/s) divided by its per-exemplar spatial maximum, evaluated as
/// exp((A - max A)/s) so large logits stay finite.
Tensor spatial_normalize(const Tensor& A, double s);

/// A_n = A_e (elementwise*) A_s.
Tensor fuse_normalizations(const Tensor& A_e, const Tensor& A_s);

/// Full distillation pass. Disabled normalizations drop out of the product;
/// with both disabled the raw correlation is used at scale A/s.
CorrelationStack distill(const Tensor& f_I, const Tensor& f_e, const DistillationParams& params,
                         bool exemplar_norm = true, bool spatial_norm = true);

/// Diagnostic export of one [K,H,W] correlation component: an F32R raster plus
/// one min-max-scaled PGM per exemplar ("<stem>_k0.pgm", ...).
void export_correlation(const std::filesystem::path& dir, const std::string& stem, const Tensor& comp);

}  // namespace corrcount
