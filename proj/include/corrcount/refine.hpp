#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "corrcount/backbone.hpp"
#include "corrcount/distill.hpp"
#include "corrcount/tensor.hpp"

namespace corrcount {

/// Trainable state of one feature-refinement step: a 3x3 C->C fusion
/// correlation with bias and the post-fusion layer-norm affine pair.
struct RefinementParams {
  Tensor fusion_weight;  // [C, C, 3, 3]
  Tensor fusion_bias;    // [C]
  Tensor ln_gamma;       // [C]
  Tensor ln_beta;        // [C]
  double eps = 1e-5;

  static RefinementParams init(std::int64_t channels, Rng& rng);
};

struct RefinementOptions {
  int iterations = 4;
  bool exemplar_norm = true;
  bool spatial_norm = true;
  bool flip = true;   // convolve with the flipped exemplar kernel (Fig. 4 semantics)
  bool repool = false;  // refresh f_e from the refined map each iteration
};

/// Optional per-iteration snapshots for diagnostics/export.
struct IterationTrace {
  std::vector<CorrelationStack> stacks;
  std::vector<Tensor> refined;
};

/// Exemplar features placed over the grid with A_n as weights:
/// f' = convolve_place_2d(A_n, f_e) (or the unflipped correlate variant),
/// summed over the exemplar dimension -> [C,H,W].
Tensor correlated_feature_map(const Tensor& A_n, const Tensor& f_e, bool flip = true);

/// f_I' = LN(f_I + correlate3x3(f_c) + bias), shapes preserved.
Tensor fuse_refined(const Tensor& f_c, const Tensor& f_I, const RefinementParams& params);

/// Where refreshed exemplar pooling (repool) gets its box geometry.
struct RepoolContext {
  std::vector<Box> boxes;  // image coordinates
  std::int64_t image_h = 0, image_w = 0;
};

/// N rounds of distill -> correlated-feature -> fuse. `params` holds either a
/// single shared entry or one entry per iteration. Aborts with the iteration
/// index if an intermediate goes non-finite.
Tensor refine_iteratively(const Tensor& f_I, const Tensor& f_e,
                          const std::vector<RefinementParams>& params,
                          const DistillationParams& distill_params, const RefinementOptions& opt,
                          IterationTrace* trace = nullptr, const RepoolContext* repool = nullptr);

/// Writes each traced iteration's fused correlation (F32R + per-exemplar PGM).
void export_trace(const std::filesystem::path& dir, const IterationTrace& trace);

}  // namespace corrcount
