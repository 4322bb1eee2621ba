#include "corrcount/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "corrcount/error.hpp"

namespace corrcount {

namespace {

using detail::TensorNode;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  }
}

// dst(y,x) += w * src(y+sy, x+sx) over the overlap of the shifted planes.
inline void shifted_axpy(double w, const double* __restrict src, double* __restrict dst,
                         std::int64_t h, std::int64_t wid, std::int64_t sy, std::int64_t sx) {
  const std::int64_t y0 = std::max<std::int64_t>(0, -sy);
  const std::int64_t y1 = std::min<std::int64_t>(h, h - sy);
  const std::int64_t x0 = std::max<std::int64_t>(0, -sx);
  const std::int64_t x1 = std::min<std::int64_t>(wid, wid - sx);
  const std::int64_t len = x1 - x0;
  if (len <= 0) return;
  for (std::int64_t y = y0; y < y1; ++y) {
    const double* s = src + (y + sy) * wid + (x0 + sx);
    double* d = dst + y * wid + x0;
    for (std::int64_t i = 0; i < len; ++i) d[i] += w * s[i];
  }
}

// sum_{y,x} a(y,x) * b(y+sy, x+sx) over the overlap. The compiler cannot
// vectorize an FP reduction without reassociation licence, so the SIMD lanes
// and their final combination order are spelled out explicitly; the result is
// deterministic for a given build.
inline double shifted_dot(const double* __restrict a, const double* __restrict b, std::int64_t h,
                          std::int64_t wid, std::int64_t sy, std::int64_t sx) {
  const std::int64_t y0 = std::max<std::int64_t>(0, -sy);
  const std::int64_t y1 = std::min<std::int64_t>(h, h - sy);
  const std::int64_t x0 = std::max<std::int64_t>(0, -sx);
  const std::int64_t x1 = std::min<std::int64_t>(wid, wid - sx);
  const std::int64_t len = x1 - x0;
  if (len <= 0) return 0.0;
  double acc = 0.0;
#if defined(__AVX512F__)
  __m512d vacc = _mm512_setzero_pd();
  for (std::int64_t y = y0; y < y1; ++y) {
    const double* pa = a + y * wid + x0;
    const double* pb = b + (y + sy) * wid + (x0 + sx);
    std::int64_t i = 0;
    for (; i + 8 <= len; i += 8) {
      vacc = _mm512_fmadd_pd(_mm512_loadu_pd(pa + i), _mm512_loadu_pd(pb + i), vacc);
    }
    for (; i < len; ++i) acc += pa[i] * pb[i];
  }
  acc += _mm512_reduce_add_pd(vacc);
#elif defined(__AVX2__) && defined(__FMA__)
  __m256d vacc = _mm256_setzero_pd();
  for (std::int64_t y = y0; y < y1; ++y) {
    const double* pa = a + y * wid + x0;
    const double* pb = b + (y + sy) * wid + (x0 + sx);
    std::int64_t i = 0;
    for (; i + 4 <= len; i += 4) {
      vacc = _mm256_fmadd_pd(_mm256_loadu_pd(pa + i), _mm256_loadu_pd(pb + i), vacc);
    }
    for (; i < len; ++i) acc += pa[i] * pb[i];
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, vacc);
  acc += (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
#else
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  for (std::int64_t y = y0; y < y1; ++y) {
    const double* pa = a + y * wid + x0;
    const double* pb = b + (y + sy) * wid + (x0 + sx);
    std::int64_t i = 0;
    for (; i + 4 <= len; i += 4) {
      acc0 += pa[i] * pb[i];
      acc1 += pa[i + 1] * pb[i + 1];
      acc2 += pa[i + 2] * pb[i + 2];
      acc3 += pa[i + 3] * pb[i + 3];
    }
    for (; i < len; ++i) acc0 += pa[i] * pb[i];
  }
  acc = ((acc0 + acc1) + (acc2 + acc3));
#endif
  return acc;
}

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require_same_shape(name, a, b);
  const std::size_t n = static_cast<std::size_t>(a.numel());
  std::vector<double> out(n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_node(a.shape(), std::move(out), {a, b}, [an, bn, bwd](const TensorNode& self) {
    const double* g = self.grad.data();
    const std::size_t n = self.value.size();
    double* ga = an->requires_grad ? an->grad.data() : nullptr;
    double* gb = bn->requires_grad ? bn->grad.data() : nullptr;
    for (std::size_t i = 0; i < n; ++i) bwd(g[i], an->value[i], bn->value[i], self.value[i], ga ? &ga[i] : nullptr,
                                            gb ? &gb[i] : nullptr);
  });
}

std::vector<int> normalize_dims(const char* op, const Tensor& a, const std::vector<int>& dims) {
  if (dims.empty()) throw ContractViolation(std::string(op) + ": empty reduction dimension set");
  std::vector<int> d = dims;
  std::sort(d.begin(), d.end());
  d.erase(std::unique(d.begin(), d.end()), d.end());
  for (int x : d) {
    if (x < 0 || x >= a.rank()) {
      throw ContractViolation(std::string(op) + ": dim " + std::to_string(x) + " invalid for shape " +
                              shape_str(a.shape()));
    }
  }
  return d;
}

struct ReducePlan {
  Shape out_shape;                          // respecting keepdim
  std::vector<std::int64_t> out_stride;     // per input dim; 0 where reduced
  std::int64_t group = 1;                   // input elements per output element
  std::int64_t out_numel = 1;
};

ReducePlan plan_reduce(const Tensor& a, const std::vector<int>& dims, bool keepdim) {
  const Shape& s = a.shape();
  std::vector<bool> reduced(s.size(), false);
  for (int d : dims) reduced[static_cast<std::size_t>(d)] = true;

  ReducePlan p;
  Shape kept;  // output extents in input-dim order, 1 where reduced
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (reduced[d]) {
      p.group *= s[d];
      if (keepdim) p.out_shape.push_back(1);
      kept.push_back(1);
    } else {
      p.out_shape.push_back(s[d]);
      kept.push_back(s[d]);
    }
  }
  p.out_stride.assign(s.size(), 0);
  std::int64_t stride = 1;
  for (std::size_t d = s.size(); d-- > 0;) {
    if (!reduced[d]) {
      p.out_stride[d] = stride;
      stride *= s[d];
    }
  }
  p.out_numel = stride;
  return p;
}

// Calls fn(input_flat, output_flat) over the whole input in row-major order.
template <typename Fn>
void for_each_reduce_pair(const Shape& s, const std::vector<std::int64_t>& out_stride, Fn fn) {
  const std::size_t rank = s.size();
  const std::int64_t n = shape_numel(s);
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t out_flat = 0;
  for (std::int64_t flat = 0; flat < n; ++flat) {
    fn(flat, out_flat);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      out_flat += out_stride[d];
      if (idx[d] < s[d]) break;
      out_flat -= out_stride[d] * s[d];
      idx[d] = 0;
    }
  }
}

struct DimSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

DimSplit split_at(const Shape& s, int dim) {
  DimSplit p;
  for (int d = 0; d < static_cast<int>(s.size()); ++d) {
    if (d < dim) p.outer *= s[d];
    else if (d == dim) p.extent = s[d];
    else p.inner *= s[d];
  }
  return p;
}

void check_kernel_tensor(const char* op, const Tensor& kernels) {
  if (kernels.rank() != 4) {
    throw ContractViolation(std::string(op) + ": kernels must be rank-4 [K,C,He,We], got " +
                            shape_str(kernels.shape()));
  }
  if (kernels.dim(2) % 2 == 0 || kernels.dim(3) % 2 == 0) {
    throw ContractViolation(std::string(op) + ": kernel extents must be odd, got " + shape_str(kernels.shape()));
  }
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double, double* ga, double* gb) {
        if (ga) *ga += g / y;
        if (gb) *gb -= g * x / (y * y);
      });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_unary(const Tensor& a, Fwd fwd, Bwd bwd) {
  const std::size_t n = static_cast<std::size_t>(a.numel());
  std::vector<double> out(n);
  const double* av = a.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  auto an = a.node_ptr();
  return detail::make_node(a.shape(), std::move(out), {a}, [an, bwd](const TensorNode& self) {
    if (!an->requires_grad) return;
    const double* g = self.grad.data();
    double* ga = an->grad.data();
    const std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += bwd(g[i], an->value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, double c) {
  return elementwise_unary(a, [c](double x) { return x + c; }, [](double g, double, double) { return g; });
}
Tensor sub(const Tensor& a, double c) { return add(a, -c); }
Tensor sub(double c, const Tensor& a) {
  return elementwise_unary(a, [c](double x) { return c - x; }, [](double g, double, double) { return -g; });
}
Tensor mul(const Tensor& a, double c) {
  return elementwise_unary(a, [c](double x) { return x * c; }, [c](double g, double, double) { return g * c; });
}
Tensor div(const Tensor& a, double c) {
  return elementwise_unary(a, [c](double x) { return x / c; }, [c](double g, double, double) { return g / c; });
}

Tensor neg(const Tensor& a) {
  return elementwise_unary(a, [](double x) { return -x; }, [](double g, double, double) { return -g; });
}

Tensor exp(const Tensor& a) {
  return elementwise_unary(a, [](double x) { return std::exp(x); },
                           [](double g, double, double y) { return g * y; });
}

Tensor relu(const Tensor& a) {
  return elementwise_unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor max_with(const Tensor& a, double c) {
  return elementwise_unary(a, [c](double x) { return x > c ? x : c; },
                           [c](double g, double x, double) { return x > c ? g : 0.0; });
}

Tensor max_with(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "max_with", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double g, double x, double y, double, double* ga, double* gb) {
        if (x >= y) {
          if (ga) *ga += g;
        } else if (gb) {
          *gb += g;
        }
      });
}

// ---- reductions -------------------------------------------------------------

Tensor reduce_sum(const Tensor& a, const std::vector<int>& dims, bool keepdim) {
  const auto d = normalize_dims("reduce_sum", a, dims);
  const auto plan = plan_reduce(a, d, keepdim);
  std::vector<double> out(static_cast<std::size_t>(plan.out_numel), 0.0);
  const double* av = a.values().data();
  for_each_reduce_pair(a.shape(), plan.out_stride,
                       [&](std::int64_t in, std::int64_t o) { out[static_cast<std::size_t>(o)] += av[in]; });
  auto an = a.node_ptr();
  auto out_stride = plan.out_stride;
  return detail::make_node(plan.out_shape, std::move(out), {a}, [an, out_stride](const TensorNode& self) {
    if (!an->requires_grad) return;
    const double* g = self.grad.data();
    double* ga = an->grad.data();
    for_each_reduce_pair(an->shape, out_stride, [&](std::int64_t in, std::int64_t o) { ga[in] += g[o]; });
  });
}

Tensor reduce_mean(const Tensor& a, const std::vector<int>& dims, bool keepdim) {
  const auto d = normalize_dims("reduce_mean", a, dims);
  const auto plan = plan_reduce(a, d, keepdim);
  const double inv = 1.0 / static_cast<double>(plan.group);
  std::vector<double> out(static_cast<std::size_t>(plan.out_numel), 0.0);
  const double* av = a.values().data();
  for_each_reduce_pair(a.shape(), plan.out_stride,
                       [&](std::int64_t in, std::int64_t o) { out[static_cast<std::size_t>(o)] += av[in]; });
  for (auto& v : out) v *= inv;
  auto an = a.node_ptr();
  auto out_stride = plan.out_stride;
  return detail::make_node(plan.out_shape, std::move(out), {a}, [an, out_stride, inv](const TensorNode& self) {
    if (!an->requires_grad) return;
    const double* g = self.grad.data();
    double* ga = an->grad.data();
    for_each_reduce_pair(an->shape, out_stride,
                         [&](std::int64_t in, std::int64_t o) { ga[in] += g[o] * inv; });
  });
}

Tensor reduce_max(const Tensor& a, const std::vector<int>& dims, bool keepdim) {
  const auto d = normalize_dims("reduce_max", a, dims);
  const auto plan = plan_reduce(a, d, keepdim);
  const std::size_t on = static_cast<std::size_t>(plan.out_numel);
  std::vector<double> out(on, -std::numeric_limits<double>::infinity());
  // First row-major maximum per group wins (strict > keeps the first).
  std::vector<std::int64_t> argmax(on, -1);
  const double* av = a.values().data();
  for_each_reduce_pair(a.shape(), plan.out_stride, [&](std::int64_t in, std::int64_t o) {
    const auto uo = static_cast<std::size_t>(o);
    if (av[in] > out[uo]) {
      out[uo] = av[in];
      argmax[uo] = in;
    }
  });
  auto an = a.node_ptr();
  return detail::make_node(plan.out_shape, std::move(out), {a},
                           [an, argmax = std::move(argmax)](const TensorNode& self) {
                             if (!an->requires_grad) return;
                             const double* g = self.grad.data();
                             double* ga = an->grad.data();
                             for (std::size_t o = 0; o < argmax.size(); ++o) ga[argmax[o]] += g[o];
                           });
}

namespace {
std::vector<int> all_dims(const Tensor& a) {
  std::vector<int> d(static_cast<std::size_t>(a.rank()));
  for (int i = 0; i < a.rank(); ++i) d[static_cast<std::size_t>(i)] = i;
  return d;
}
}  // namespace

Tensor sum_all(const Tensor& a) {
  if (a.rank() == 0) return reshape(a, {});
  return reduce_sum(a, all_dims(a), false);
}

Tensor mean_all(const Tensor& a) {
  if (a.rank() == 0) return reshape(a, {});
  return reduce_mean(a, all_dims(a), false);
}

// ---- structured -------------------------------------------------------------

Tensor softmax(const Tensor& a, int dim) {
  if (dim < 0 || dim >= a.rank()) {
    throw ContractViolation("softmax: dim " + std::to_string(dim) + " invalid for shape " + shape_str(a.shape()));
  }
  const auto sp = split_at(a.shape(), dim);
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const double* av = a.values().data();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.extent * sp.inner + i;
      double mx = av[base];
      for (std::int64_t c = 1; c < sp.extent; ++c) mx = std::max(mx, av[base + c * sp.inner]);
      double z = 0.0;
      for (std::int64_t c = 0; c < sp.extent; ++c) {
        const double e = std::exp(av[base + c * sp.inner] - mx);
        out[static_cast<std::size_t>(base + c * sp.inner)] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::int64_t c = 0; c < sp.extent; ++c) out[static_cast<std::size_t>(base + c * sp.inner)] *= inv;
    }
  }
  auto an = a.node_ptr();
  return detail::make_node(a.shape(), std::move(out), {a}, [an, sp](const TensorNode& self) {
    if (!an->requires_grad) return;
    // ds_c = s_c * (g_c - sum_k g_k s_k)
    const double* g = self.grad.data();
    const double* s = self.value.data();
    double* ga = an->grad.data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.extent * sp.inner + i;
        double dot = 0.0;
        for (std::int64_t c = 0; c < sp.extent; ++c) {
          const std::int64_t p = base + c * sp.inner;
          dot += g[p] * s[p];
        }
        for (std::int64_t c = 0; c < sp.extent; ++c) {
          const std::int64_t p = base + c * sp.inner;
          ga[p] += s[p] * (g[p] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps, int channel_dim) {
  if (channel_dim < 0 || channel_dim >= a.rank()) {
    throw ContractViolation("layer_norm: channel_dim " + std::to_string(channel_dim) + " invalid for shape " +
                            shape_str(a.shape()));
  }
  const auto sp = split_at(a.shape(), channel_dim);
  if (gamma.rank() != 1 || gamma.dim(0) != sp.extent || beta.rank() != 1 || beta.dim(0) != sp.extent) {
    throw ContractViolation("layer_norm: gamma/beta must be [C] with C=" + std::to_string(sp.extent) +
                            ", got " + shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const double* av = a.values().data();
  const double* gm = gamma.values().data();
  const double* bt = beta.values().data();
  const double invC = 1.0 / static_cast<double>(sp.extent);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.extent * sp.inner + i;
      double mu = 0.0;
      for (std::int64_t c = 0; c < sp.extent; ++c) mu += av[base + c * sp.inner];
      mu *= invC;
      double var = 0.0;
      for (std::int64_t c = 0; c < sp.extent; ++c) {
        const double d = av[base + c * sp.inner] - mu;
        var += d * d;
      }
      var *= invC;
      const double inv_s = 1.0 / std::sqrt(var + eps);
      for (std::int64_t c = 0; c < sp.extent; ++c) {
        const std::int64_t p = base + c * sp.inner;
        out[static_cast<std::size_t>(p)] = gm[c] * ((av[p] - mu) * inv_s) + bt[c];
      }
    }
  }
  auto an = a.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  return detail::make_node(a.shape(), std::move(out), {a, gamma, beta},
                           [an, gn, bn, sp, eps, invC](const TensorNode& self) {
    const double* g = self.grad.data();
    const double* av = an->value.data();
    const double* gm = gn->value.data();
    double* ga = an->requires_grad ? an->grad.data() : nullptr;
    double* gg = gn->requires_grad ? gn->grad.data() : nullptr;
    double* gb = bn->requires_grad ? bn->grad.data() : nullptr;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.extent * sp.inner + i;
        double mu = 0.0;
        for (std::int64_t c = 0; c < sp.extent; ++c) mu += av[base + c * sp.inner];
        mu *= invC;
        double var = 0.0;
        for (std::int64_t c = 0; c < sp.extent; ++c) {
          const double d = av[base + c * sp.inner] - mu;
          var += d * d;
        }
        var *= invC;
        const double inv_s = 1.0 / std::sqrt(var + eps);
        // dL/dx = (1/s) * (gh - mean(gh) - xhat * mean(gh .* xhat)), gh = g*gamma
        double m1 = 0.0, m2 = 0.0;
        for (std::int64_t c = 0; c < sp.extent; ++c) {
          const std::int64_t p = base + c * sp.inner;
          const double xhat = (av[p] - mu) * inv_s;
          const double gh = g[p] * gm[c];
          m1 += gh;
          m2 += gh * xhat;
          if (gg) gg[c] += g[p] * xhat;
          if (gb) gb[c] += g[p];
        }
        if (ga) {
          m1 *= invC;
          m2 *= invC;
          for (std::int64_t c = 0; c < sp.extent; ++c) {
            const std::int64_t p = base + c * sp.inner;
            const double xhat = (av[p] - mu) * inv_s;
            ga[p] += inv_s * (g[p] * gm[c] - m1 - xhat * m2);
          }
        }
      }
    }
  });
}

Tensor cross_correlate_2d(const Tensor& x, const Tensor& kernels) {
  check_kernel_tensor("cross_correlate_2d", kernels);
  if (x.rank() != 3) {
    throw ContractViolation("cross_correlate_2d: input must be rank-3 [C,H,W], got " + shape_str(x.shape()));
  }
  if (x.dim(0) != kernels.dim(1)) {
    throw ContractViolation("cross_correlate_2d: channel mismatch, input " + shape_str(x.shape()) +
                            " vs kernels " + shape_str(kernels.shape()));
  }
  const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::int64_t K = kernels.dim(0), He = kernels.dim(2), We = kernels.dim(3);
  const std::int64_t ph = He / 2, pw = We / 2;
  const std::int64_t plane = H * W;

  std::vector<double> out(static_cast<std::size_t>(K * plane), 0.0);
  const double* xv = x.values().data();
  const double* kv = kernels.values().data();
  for (std::int64_t k = 0; k < K; ++k) {
    double* op = out.data() + k * plane;
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xp = xv + c * plane;
      const double* kp = kv + ((k * C + c) * He) * We;
      for (std::int64_t i = 0; i < He; ++i) {
        for (std::int64_t j = 0; j < We; ++j) {
          shifted_axpy(kp[i * We + j], xp, op, H, W, i - ph, j - pw);
        }
      }
    }
  }

  auto xn = x.node_ptr();
  auto kn = kernels.node_ptr();
  return detail::make_node({K, H, W}, std::move(out), {x, kernels},
                           [xn, kn, C, H, W, K, He, We, ph, pw, plane](const TensorNode& self) {
    const double* g = self.grad.data();
    const double* xv = xn->value.data();
    const double* kv = kn->value.data();
    if (xn->requires_grad) {
      double* gx = xn->grad.data();
      for (std::int64_t k = 0; k < K; ++k) {
        const double* gp = g + k * plane;
        for (std::int64_t c = 0; c < C; ++c) {
          double* gxp = gx + c * plane;
          const double* kp = kv + ((k * C + c) * He) * We;
          for (std::int64_t i = 0; i < He; ++i)
            for (std::int64_t j = 0; j < We; ++j)
              shifted_axpy(kp[i * We + j], gp, gxp, H, W, -(i - ph), -(j - pw));
        }
      }
    }
    if (kn->requires_grad) {
      double* gk = kn->grad.data();
      for (std::int64_t k = 0; k < K; ++k) {
        const double* gp = g + k * plane;
        for (std::int64_t c = 0; c < C; ++c) {
          const double* xp = xv + c * plane;
          double* gkp = gk + ((k * C + c) * He) * We;
          for (std::int64_t i = 0; i < He; ++i)
            for (std::int64_t j = 0; j < We; ++j)
              gkp[i * We + j] += shifted_dot(gp, xp, H, W, i - ph, j - pw);
        }
      }
    }
  });
}

namespace {

// Shared body of convolve_place_2d / correlate_place_2d; `sign` is -1 for the
// flipped (true convolution) variant and +1 for plain correlation.
Tensor place_2d(const char* name, const Tensor& a, const Tensor& kernels, int sign) {
  check_kernel_tensor(name, kernels);
  if (a.rank() != 3) {
    throw ContractViolation(std::string(name) + ": correlation input must be rank-3 [K,H,W], got " +
                            shape_str(a.shape()));
  }
  if (a.dim(0) != kernels.dim(0)) {
    throw ContractViolation(std::string(name) + ": exemplar count mismatch, " + shape_str(a.shape()) +
                            " vs kernels " + shape_str(kernels.shape()));
  }
  const std::int64_t K = a.dim(0), H = a.dim(1), W = a.dim(2);
  const std::int64_t C = kernels.dim(1), He = kernels.dim(2), We = kernels.dim(3);
  const std::int64_t ph = He / 2, pw = We / 2;
  const std::int64_t plane = H * W;

  std::vector<double> out(static_cast<std::size_t>(K * C * plane), 0.0);
  const double* av = a.values().data();
  const double* kv = kernels.values().data();
  for (std::int64_t k = 0; k < K; ++k) {
    const double* ap = av + k * plane;
    for (std::int64_t c = 0; c < C; ++c) {
      double* op = out.data() + (k * C + c) * plane;
      const double* kp = kv + ((k * C + c) * He) * We;
      for (std::int64_t i = 0; i < He; ++i)
        for (std::int64_t j = 0; j < We; ++j)
          shifted_axpy(kp[i * We + j], ap, op, H, W, sign * (i - ph), sign * (j - pw));
    }
  }

  auto an = a.node_ptr();
  auto kn = kernels.node_ptr();
  return detail::make_node({K, C, H, W}, std::move(out), {a, kernels},
                           [an, kn, K, C, H, W, He, We, ph, pw, plane, sign](const TensorNode& self) {
    const double* g = self.grad.data();
    const double* av = an->value.data();
    const double* kv = kn->value.data();
    if (an->requires_grad) {
      double* ga = an->grad.data();
      for (std::int64_t k = 0; k < K; ++k) {
        double* gap = ga + k * plane;
        for (std::int64_t c = 0; c < C; ++c) {
          const double* gp = g + (k * C + c) * plane;
          const double* kp = kv + ((k * C + c) * He) * We;
          for (std::int64_t i = 0; i < He; ++i)
            for (std::int64_t j = 0; j < We; ++j)
              shifted_axpy(kp[i * We + j], gp, gap, H, W, -sign * (i - ph), -sign * (j - pw));
        }
      }
    }
    if (kn->requires_grad) {
      double* gk = kn->grad.data();
      for (std::int64_t k = 0; k < K; ++k) {
        const double* ap = av + k * plane;
        for (std::int64_t c = 0; c < C; ++c) {
          const double* gp = g + (k * C + c) * plane;
          double* gkp = gk + ((k * C + c) * He) * We;
          for (std::int64_t i = 0; i < He; ++i)
            for (std::int64_t j = 0; j < We; ++j)
              gkp[i * We + j] += shifted_dot(gp, ap, H, W, sign * (i - ph), sign * (j - pw));
        }
      }
    }
  });
}

}  // namespace

Tensor convolve_place_2d(const Tensor& a, const Tensor& kernels) {
  return place_2d("convolve_place_2d", a, kernels, -1);
}

Tensor correlate_place_2d(const Tensor& a, const Tensor& kernels) {
  return place_2d("correlate_place_2d", a, kernels, +1);
}

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (x.rank() != 3) {
    throw ContractViolation("bilinear_resize: input must be rank-3 [C,H,W], got " + shape_str(x.shape()));
  }
  if (out_h < 1 || out_w < 1) throw ContractViolation("bilinear_resize: output extents must be >= 1");
  const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);

  if (out_h == H && out_w == W) {
    std::vector<double> out(x.values().begin(), x.values().end());
    auto xn = x.node_ptr();
    return detail::make_node(x.shape(), std::move(out), {x}, [xn](const TensorNode& self) {
      if (!xn->requires_grad) return;
      double* gx = xn->grad.data();
      const double* g = self.grad.data();
      for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i];
    });
  }

  // Sample coordinates under the half-pixel-center convention, with index
  // clamping at the borders.
  struct Tap {
    std::int64_t lo, hi;
    double w_hi;  // weight of `hi`; lo gets (1 - w_hi)
  };
  auto make_taps = [](std::int64_t in_n, std::int64_t out_n) {
    std::vector<Tap> taps(static_cast<std::size_t>(out_n));
    const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
    for (std::int64_t i = 0; i < out_n; ++i) {
      const double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      const double f = std::floor(src);
      const auto i0 = static_cast<std::int64_t>(f);
      taps[static_cast<std::size_t>(i)] = {std::clamp<std::int64_t>(i0, 0, in_n - 1),
                                           std::clamp<std::int64_t>(i0 + 1, 0, in_n - 1), src - f};
    }
    return taps;
  };
  const auto ty = make_taps(H, out_h);
  const auto tx = make_taps(W, out_w);

  std::vector<double> out(static_cast<std::size_t>(C * out_h * out_w));
  const double* xv = x.values().data();
  for (std::int64_t c = 0; c < C; ++c) {
    const double* xp = xv + c * H * W;
    double* op = out.data() + c * out_h * out_w;
    for (std::int64_t y = 0; y < out_h; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (std::int64_t xo = 0; xo < out_w; ++xo) {
        const Tap& b = tx[static_cast<std::size_t>(xo)];
        const double v00 = xp[a.lo * W + b.lo], v01 = xp[a.lo * W + b.hi];
        const double v10 = xp[a.hi * W + b.lo], v11 = xp[a.hi * W + b.hi];
        const double top = v00 + (v01 - v00) * b.w_hi;
        const double bot = v10 + (v11 - v10) * b.w_hi;
        op[y * out_w + xo] = top + (bot - top) * a.w_hi;
      }
    }
  }

  auto xn = x.node_ptr();
  return detail::make_node({C, out_h, out_w}, std::move(out), {x},
                           [xn, ty, tx, C, H, W, out_h, out_w](const TensorNode& self) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad.data();
    const double* g = self.grad.data();
    for (std::int64_t c = 0; c < C; ++c) {
      double* gxp = gx + c * H * W;
      const double* gp = g + c * out_h * out_w;
      for (std::int64_t y = 0; y < out_h; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        for (std::int64_t xo = 0; xo < out_w; ++xo) {
          const Tap& b = tx[static_cast<std::size_t>(xo)];
          const double gv = gp[y * out_w + xo];
          gxp[a.lo * W + b.lo] += gv * (1.0 - a.w_hi) * (1.0 - b.w_hi);
          gxp[a.lo * W + b.hi] += gv * (1.0 - a.w_hi) * b.w_hi;
          gxp[a.hi * W + b.lo] += gv * a.w_hi * (1.0 - b.w_hi);
          gxp[a.hi * W + b.hi] += gv * a.w_hi * b.w_hi;
        }
      }
    }
  });
}

Tensor avg_pool_2x2(const Tensor& x) {
  if (x.rank() != 3) {
    throw ContractViolation("avg_pool_2x2: input must be rank-3 [C,H,W], got " + shape_str(x.shape()));
  }
  const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ContractViolation("avg_pool_2x2: spatial extents must be even, got " + shape_str(x.shape()));
  }
  const std::int64_t oh = H / 2, ow = W / 2;
  std::vector<double> out(static_cast<std::size_t>(C * oh * ow));
  const double* xv = x.values().data();
  for (std::int64_t c = 0; c < C; ++c) {
    const double* xp = xv + c * H * W;
    double* op = out.data() + c * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xo = 0; xo < ow; ++xo)
        op[y * ow + xo] = 0.25 * (xp[(2 * y) * W + 2 * xo] + xp[(2 * y) * W + 2 * xo + 1] +
                                  xp[(2 * y + 1) * W + 2 * xo] + xp[(2 * y + 1) * W + 2 * xo + 1]);
  }
  auto xn = x.node_ptr();
  return detail::make_node({C, oh, ow}, std::move(out), {x}, [xn, C, H, W, oh, ow](const TensorNode& self) {
    if (!xn->requires_grad) return;
    double* gx = xn->grad.data();
    const double* g = self.grad.data();
    for (std::int64_t c = 0; c < C; ++c) {
      double* gxp = gx + c * H * W;
      const double* gp = g + c * oh * ow;
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xo = 0; xo < ow; ++xo) {
          const double q = 0.25 * gp[y * ow + xo];
          gxp[(2 * y) * W + 2 * xo] += q;
          gxp[(2 * y) * W + 2 * xo + 1] += q;
          gxp[(2 * y + 1) * W + 2 * xo] += q;
          gxp[(2 * y + 1) * W + 2 * xo + 1] += q;
        }
    }
  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractViolation("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw ContractViolation("concat_channels: inputs must have rank >= 1");
  std::int64_t total0 = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) {
      throw ContractViolation("concat_channels: rank mismatch " + shape_str(p.shape()) + " vs " +
                              shape_str(first));
    }
    for (int d = 1; d < p.rank(); ++d) {
      if (p.dim(d) != first[static_cast<std::size_t>(d)]) {
        throw ContractViolation("concat_channels: trailing dims mismatch " + shape_str(p.shape()) + " vs " +
                                shape_str(first));
      }
    }
    total0 += p.dim(0);
  }
  Shape out_shape = first;
  out_shape[0] = total0;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(shape_numel(out_shape)));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());

  std::vector<std::shared_ptr<TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return detail::make_node(out_shape, std::move(out), parts, [nodes](const TensorNode& self) {
    const double* g = self.grad.data();
    std::size_t off = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->value.size();
      if (n->requires_grad) {
        double* gn = n->grad.data();
        for (std::size_t i = 0; i < len; ++i) gn[i] += g[off + i];
      }
      off += len;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ContractViolation("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                            " changes element count");
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  auto an = a.node_ptr();
  return detail::make_node(std::move(shape), std::move(out), {a}, [an](const TensorNode& self) {
    if (!an->requires_grad) return;
    double* ga = an->grad.data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i];
  });
}

Tensor flip_hw(const Tensor& a) {
  if (a.rank() < 2) throw ContractViolation("flip_hw: rank must be >= 2, got " + shape_str(a.shape()));
  const std::int64_t W = a.dim(a.rank() - 1);
  const std::int64_t H = a.dim(a.rank() - 2);
  const std::int64_t plane = H * W;
  const std::int64_t outer = a.numel() / plane;
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const double* av = a.values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x)
        out[static_cast<std::size_t>(o * plane + y * W + x)] = av[o * plane + (H - 1 - y) * W + (W - 1 - x)];
  auto an = a.node_ptr();
  return detail::make_node(a.shape(), std::move(out), {a}, [an, outer, H, W, plane](const TensorNode& self) {
    if (!an->requires_grad) return;
    double* ga = an->grad.data();
    const double* g = self.grad.data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
          ga[o * plane + (H - 1 - y) * W + (W - 1 - x)] += g[o * plane + y * W + x];
  });
}

Tensor expand_from_keepdim(const Tensor& a, const Shape& target) {
  if (a.rank() != static_cast<int>(target.size())) {
    throw ContractViolation("expand_from_keepdim: rank mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(target));
  }
  std::vector<std::int64_t> in_stride(target.size(), 0);
  std::int64_t stride = 1;
  for (std::size_t d = target.size(); d-- > 0;) {
    const std::int64_t ad = a.shape()[d];
    if (ad != target[d] && ad != 1) {
      throw ContractViolation("expand_from_keepdim: dim " + std::to_string(d) + " of " + shape_str(a.shape()) +
                              " incompatible with " + shape_str(target));
    }
    in_stride[d] = (ad == 1 && target[d] != 1) ? 0 : stride;
    stride *= ad;
  }
  std::vector<double> out(static_cast<std::size_t>(shape_numel(target)));
  const double* av = a.values().data();
  for_each_reduce_pair(target, in_stride,
                       [&](std::int64_t o, std::int64_t in) { out[static_cast<std::size_t>(o)] = av[in]; });
  auto an = a.node_ptr();
  Shape tgt = target;
  return detail::make_node(tgt, std::move(out), {a}, [an, tgt, in_stride](const TensorNode& self) {
    if (!an->requires_grad) return;
    double* ga = an->grad.data();
    const double* g = self.grad.data();
    for_each_reduce_pair(tgt, in_stride, [&](std::int64_t o, std::int64_t in) { ga[in] += g[o]; });
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0)) {
    throw ContractViolation("add_channel_bias: want [C,H,W] + [C], got " + shape_str(x.shape()) + " + " +
                            shape_str(bias.shape()));
  }
  return add(x, expand_from_keepdim(reshape(bias, {bias.dim(0), 1, 1}), x.shape()));
}

Tensor max_pool_cells(const Tensor& x, const std::vector<CellRange>& rows,
                      const std::vector<CellRange>& cols) {
  if (x.rank() != 3) {
    throw ContractViolation("max_pool_cells: input must be rank-3 [C,H,W], got " + shape_str(x.shape()));
  }
  const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto check_ranges = [](const std::vector<CellRange>& r, std::int64_t limit, const char* which) {
    if (r.empty()) throw ContractViolation(std::string("max_pool_cells: no ") + which + " cells");
    for (const auto& [b, e] : r) {
      if (b < 0 || e > limit || e <= b) {
        throw ContractViolation(std::string("max_pool_cells: bad ") + which + " cell [" + std::to_string(b) +
                                "," + std::to_string(e) + ")");
      }
    }
  };
  check_ranges(rows, H, "row");
  check_ranges(cols, W, "col");
  const std::int64_t He = static_cast<std::int64_t>(rows.size());
  const std::int64_t We = static_cast<std::int64_t>(cols.size());

  std::vector<double> out(static_cast<std::size_t>(C * He * We));
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(C * He * We));
  const double* xv = x.values().data();
  for (std::int64_t c = 0; c < C; ++c) {
    const double* xp = xv + c * H * W;
    for (std::int64_t gy = 0; gy < He; ++gy) {
      for (std::int64_t gx = 0; gx < We; ++gx) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_at = -1;
        for (std::int64_t y = rows[static_cast<std::size_t>(gy)].first; y < rows[static_cast<std::size_t>(gy)].second;
             ++y)
          for (std::int64_t xq = cols[static_cast<std::size_t>(gx)].first;
               xq < cols[static_cast<std::size_t>(gx)].second; ++xq) {
            if (xp[y * W + xq] > best) {
              best = xp[y * W + xq];
              best_at = c * H * W + y * W + xq;
            }
          }
        const std::size_t o = static_cast<std::size_t>((c * He + gy) * We + gx);
        out[o] = best;
        argmax[o] = best_at;
      }
    }
  }
  auto xn = x.node_ptr();
  return detail::make_node({C, He, We}, std::move(out), {x},
                           [xn, argmax = std::move(argmax)](const TensorNode& self) {
                             if (!xn->requires_grad) return;
                             double* gx = xn->grad.data();
                             const double* g = self.grad.data();
                             for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
                           });
}

}  // namespace corrcount
