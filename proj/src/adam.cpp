#include "corrcount/adam.hpp"

#include <cmath>

#include "corrcount/error.hpp"

namespace corrcount {

AdamOptimizer::AdamOptimizer(AdamConfig cfg, const std::vector<Tensor>& params,
                             std::vector<std::string> param_names)
    : cfg_(cfg), names_(std::move(param_names)) {
  // lr == 0 is admitted as an explicit no-op schedule (fixed-point training).
  if (cfg_.lr < 0.0) throw ConfigError("adam: lr must be non-negative");
  if (cfg_.beta1 <= 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 <= 0.0 || cfg_.beta2 >= 1.0) {
    throw ConfigError("adam: betas must lie in (0,1)");
  }
  if (cfg_.eps <= 0.0) throw ConfigError("adam: eps must be positive");
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
  if (names_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) names_.push_back("param" + std::to_string(i));
  }
}

void AdamOptimizer::step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ContractViolation("adam: parameter/gradient count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != m_[i].size()) {
      throw ContractViolation("adam: gradient size mismatch for " + names_[i]);
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) {
        throw NumericalError("adam: non-finite gradient for parameter " + names_[i] + ", update aborted");
      }
    }
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto pv = params[i].mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      pv[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace corrcount
