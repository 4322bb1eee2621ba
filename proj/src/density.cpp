#include "corrcount/density.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "corrcount/error.hpp"
#include "corrcount/ops.hpp"

namespace corrcount {

HeadParams HeadParams::init(const DensityHeadConfig& cfg, Rng& rng) {
  if (cfg.image_size % cfg.feature_size != 0) {
    throw ConfigError("density head: image size must be a power-of-two multiple of feature size");
  }
  std::int64_t ratio = cfg.image_size / cfg.feature_size;
  if ((ratio & (ratio - 1)) != 0 || ratio < 1) {
    throw ConfigError("density head: image/feature ratio " + std::to_string(ratio) +
                      " is not a power of two");
  }

  HeadParams p;
  p.cfg = cfg;
  std::int64_t c = cfg.in_channels;
  while (ratio > 1) {
    const std::int64_t next = std::max(cfg.min_channels, c / 2);
    const double bound = 1.0 / std::sqrt(static_cast<double>(c * 9));
    p.block_weights.push_back(Tensor::uniform({next, c, 3, 3}, rng, -bound, bound, /*requires_grad=*/true));
    p.block_biases.push_back(Tensor::zeros({next}, /*requires_grad=*/true));
    c = next;
    ratio /= 2;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  p.final_weight = Tensor::uniform({1, c, 1, 1}, rng, -bound, bound, /*requires_grad=*/true);
  p.final_bias = Tensor::zeros({1}, /*requires_grad=*/true);
  return p;
}

Tensor regress_density(const Tensor& f, const HeadParams& params) {
  if (f.rank() != 3 || f.dim(0) != params.cfg.in_channels || f.dim(1) != params.cfg.feature_size ||
      f.dim(2) != params.cfg.feature_size) {
    throw ContractViolation("regress_density: feature map " + shape_str(f.shape()) +
                            " does not match head configuration");
  }
  Tensor x = f;
  for (std::size_t b = 0; b < params.block_weights.size(); ++b) {
    x = relu(add_channel_bias(cross_correlate_2d(x, params.block_weights[b]), params.block_biases[b]));
    x = bilinear_resize(x, x.dim(1) * 2, x.dim(2) * 2);
  }
  x = add_channel_bias(cross_correlate_2d(x, params.final_weight), params.final_bias);
  x = relu(x);
  return reshape(x, {params.cfg.image_size, params.cfg.image_size});
}

Tensor generate_gt_density(const std::vector<std::array<double, 2>>& dots, std::int64_t h,
                           std::int64_t w, const GtKernelConfig& kcfg) {
  std::vector<double> map(static_cast<std::size_t>(h * w), 0.0);
  if (!dots.empty()) {
    for (const auto& d : dots) {
      if (d[0] < 0 || d[0] >= static_cast<double>(h) || d[1] < 0 || d[1] >= static_cast<double>(w)) {
        throw ContractViolation("generate_gt_density: dot outside the image");
      }
    }
    // Canonical order makes the accumulation exactly permutation-invariant.
    std::vector<std::size_t> order(dots.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (dots[a][0] != dots[b][0]) return dots[a][0] < dots[b][0];
      return dots[a][1] < dots[b][1];
    });

    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const auto& dot = dots[order[oi]];
      double sigma = kcfg.singleton_sigma;
      if (dots.size() > 1) {
        double nearest = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < dots.size(); ++j) {
          if (j == order[oi]) continue;
          const double dr = dots[j][0] - dot[0];
          const double dc = dots[j][1] - dot[1];
          nearest = std::min(nearest, std::sqrt(dr * dr + dc * dc));
        }
        sigma = std::clamp(kcfg.sigma_scale * nearest, kcfg.sigma_min, kcfg.sigma_max);
      }
      const auto half = static_cast<std::int64_t>(std::ceil(kcfg.window_sigmas * sigma));
      const auto cy = static_cast<std::int64_t>(std::floor(dot[0]));
      const auto cx = static_cast<std::int64_t>(std::floor(dot[1]));
      const std::int64_t y0 = std::max<std::int64_t>(0, cy - half);
      const std::int64_t y1 = std::min<std::int64_t>(h - 1, cy + half);
      const std::int64_t x0 = std::max<std::int64_t>(0, cx - half);
      const std::int64_t x1 = std::min<std::int64_t>(w - 1, cx + half);

      const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
      double total = 0.0;
      for (std::int64_t y = y0; y <= y1; ++y) {
        for (std::int64_t x = x0; x <= x1; ++x) {
          const double dy = static_cast<double>(y) - dot[0];
          const double dx = static_cast<double>(x) - dot[1];
          total += std::exp(-(dy * dy + dx * dx) * inv2s2);
        }
      }
      const double inv_total = 1.0 / total;
      for (std::int64_t y = y0; y <= y1; ++y) {
        for (std::int64_t x = x0; x <= x1; ++x) {
          const double dy = static_cast<double>(y) - dot[0];
          const double dx = static_cast<double>(x) - dot[1];
          map[static_cast<std::size_t>(y * w + x)] += std::exp(-(dy * dy + dx * dx) * inv2s2) * inv_total;
        }
      }
    }
  }
  return Tensor::from_data({h, w}, std::move(map));
}

double count_from_density(const Tensor& density) {
  double total = 0.0;
  for (double v : density.values()) total += v;
  return total;
}

Tensor mse_loss(const Tensor& predicted, const Tensor& target) {
  if (predicted.shape() != target.shape()) {
    throw ContractViolation("mse_loss: shape mismatch " + shape_str(predicted.shape()) + " vs " +
                            shape_str(target.shape()));
  }
  Tensor diff = sub(predicted, target);
  return mean_all(mul(diff, diff));
}

}  // namespace corrcount
