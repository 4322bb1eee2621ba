#pragma once

#include <cstdint>
#include <vector>

#include "corrcount/tensor.hpp"

namespace corrcount {

// ---- elementwise -----------------------------------------------------------
// Binary tensor forms require identical shapes; the only broadcasting offered
// is scalar-with-tensor (plus the explicit expand_from_keepdim op below).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double c);
Tensor sub(const Tensor& a, double c);
Tensor sub(double c, const Tensor& a);
Tensor mul(const Tensor& a, double c);
Tensor div(const Tensor& a, double c);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
/// Elementwise max against a scalar. Subgradient goes to `a` where a > c.
Tensor max_with(const Tensor& a, double c);
/// Elementwise max of two tensors. Ties route the subgradient to `a`.
Tensor max_with(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }

// ---- reductions -------------------------------------------------------------

/// Sum over `dims`. Reduced dims are removed, or kept as extent 1 with
/// `keepdim`. Empty `dims` is a contract violation.
Tensor reduce_sum(const Tensor& a, const std::vector<int>& dims, bool keepdim = false);
Tensor reduce_mean(const Tensor& a, const std::vector<int>& dims, bool keepdim = false);
/// Max reduction. The subgradient routes to the first maximal element of each
/// group in row-major order.
Tensor reduce_max(const Tensor& a, const std::vector<int>& dims, bool keepdim = false);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- structured -------------------------------------------------------------

/// Softmax along `dim`, computed with max-subtraction. Slices along `dim`
/// sum to 1.
Tensor softmax(const Tensor& a, int dim);

/// Standardizes over `channel_dim` (length must equal gamma/beta) at every
/// combination of the remaining indices, with eps-stabilized variance, then
/// applies y = gamma * xhat + beta.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps,
                  int channel_dim = 0);

/// Sliding cross-correlation with zero ("same") padding:
///   out(k,y,x) = sum_{c,i,j} x(c, y+i-He/2, x+j-We/2) * kernels(k,c,i,j)
/// x: [C,H,W], kernels: [K,C,He,We] with He,We odd -> [K,H,W].
Tensor cross_correlate_2d(const Tensor& x, const Tensor& kernels);

/// True per-exemplar convolution (cross-correlation with the both-axes-flipped
/// kernel), zero padding, no channel sum:
///   out(k,c,y,x) = sum_{i,j} a(k, y-(i-He/2), x-(j-We/2)) * kernels(k,c,i,j)
/// a: [K,H,W], kernels: [K,C,He,We] -> [K,C,H,W].
Tensor convolve_place_2d(const Tensor& a, const Tensor& kernels);

/// Per-exemplar cross-correlation (the no-flip ablation variant of
/// convolve_place_2d):
///   out(k,c,y,x) = sum_{i,j} a(k, y+i-He/2, x+j-We/2) * kernels(k,c,i,j)
Tensor correlate_place_2d(const Tensor& a, const Tensor& kernels);

/// Bilinear resampling of [C,H,W] to [C,out_h,out_w], half-pixel-center
/// (align-corners-false) convention. Resizing to the same size is an exact
/// copy.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

/// 2x2 average pooling with stride 2; H and W must be even.
Tensor avg_pool_2x2(const Tensor& x);

/// Concatenation along dim 0; trailing dims must match.
Tensor concat_channels(const std::vector<Tensor>& parts);

Tensor reshape(const Tensor& a, Shape shape);

/// Flips the last two dimensions (rank >= 2).
Tensor flip_hw(const Tensor& a);

/// Broadcasts a keepdim-reduced tensor back to `target`: every dim of `a`
/// must equal the target extent or 1. Backward sums over the expanded dims.
Tensor expand_from_keepdim(const Tensor& a, const Shape& target);

/// x: [C,H,W] plus per-channel bias [C].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

/// Max pooling over an explicit cell grid given as half-open [begin,end)
/// ranges per output row/column; ranges may overlap or repeat but must be
/// non-empty and within bounds. Output is [C,He,We]; the subgradient routes
/// to the first row-major maximum per cell.
using CellRange = std::pair<std::int64_t, std::int64_t>;
Tensor max_pool_cells(const Tensor& x, const std::vector<CellRange>& rows,
                      const std::vector<CellRange>& cols);

}  // namespace corrcount
