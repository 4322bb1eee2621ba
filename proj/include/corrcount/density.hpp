#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "corrcount/rng.hpp"
#include "corrcount/tensor.hpp"

namespace corrcount {

struct DensityHeadConfig {
  std::int64_t in_channels = 56;
  std::int64_t feature_size = 32;  // H = W of the refined map
  std::int64_t image_size = 128;   // H_I = W_I; image_size/feature_size must be a power of two
  std::int64_t min_channels = 4;
};

/// Regression head: repeated {3x3 correlation (channels halved, floor, min 4),
/// ReLU, bilinear x2} blocks until image resolution, then a 1x1 correlation
/// to one channel and a final ReLU.
struct HeadParams {
  std::vector<Tensor> block_weights;  // [C_out, C_in, 3, 3]
  std::vector<Tensor> block_biases;   // [C_out]
  Tensor final_weight;                // [1, C_last, 1, 1]
  Tensor final_bias;                  // [1]
  DensityHeadConfig cfg;

  static HeadParams init(const DensityHeadConfig& cfg, Rng& rng);
};

/// f: [C,H,W] -> non-negative density map [H_I, W_I].
Tensor regress_density(const Tensor& f, const HeadParams& params);

struct GtKernelConfig {
  double sigma_scale = 0.25;     // sigma = scale * nearest-neighbor distance
  double sigma_min = 1.0;
  double sigma_max = 8.0;
  double singleton_sigma = 2.0;  // used when only one dot is present
  double window_sigmas = 3.0;    // half-width = ceil(window_sigmas * sigma)
};

/// Sum of per-dot truncated Gaussian kernels, each renormalized to sum exactly
/// 1 after boundary clipping, so the map sums to the dot count. Exactly
/// permutation-invariant in dot order. An empty dot list yields a zero map.
Tensor generate_gt_density(const std::vector<std::array<double, 2>>& dots, std::int64_t h,
                           std::int64_t w, const GtKernelConfig& kcfg = {});

/// Predicted count: plain sum of all density values.
double count_from_density(const Tensor& density);

/// Mean of squared per-pixel differences (differentiable).
Tensor mse_loss(const Tensor& predicted, const Tensor& target);

}  // namespace corrcount
