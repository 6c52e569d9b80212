#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gsa/error.hpp"
#include "gsa/numerics/params.hpp"

namespace gsa {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam. Moment accumulators are created lazily on the first step.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

  void reset() {
    m_.clear();
    v_.clear();
    step_ = 0;
  }

  /// Applies one update. All gradients are validated before any parameter changes.
  void step(TensorSet<T>& params, std::span<const Tensor<T>> grads) {
    if (grads.size() != params.size()) {
      throw Error(ErrorCode::kShape, "adam: " + std::to_string(grads.size()) +
                                         " gradients for " + std::to_string(params.size()) +
                                         " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (grads[i].shape() != params[i].value.shape()) {
        throw Error(ErrorCode::kShape, "adam: gradient for '" + params[i].name + "' has shape " +
                                           shape_str(grads[i].shape()) + ", parameter " +
                                           shape_str(params[i].value.shape()));
      }
      if (!grads[i].all_finite()) {
        throw Error(ErrorCode::kNonFinite,
                    "adam: non-finite gradient for parameter '" + params[i].name + "'");
      }
    }
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.shape());
        v_.emplace_back(p.value.shape());
      }
    }
    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const double lr = config_.learning_rate, eps = config_.epsilon;
    for (std::size_t i = 0; i < params.size(); ++i) {
      T* p = params[i].value.data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const T* gr = grads[i].data();
      for (std::size_t j = 0; j < params[i].value.size(); ++j) {
        const double gj = gr[j];
        const double mj = b1 * m[j] + (1.0 - b1) * gj;
        const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + eps);
        p[j] = static_cast<T>(p[j] - update);
      }
    }
  }

 private:
  AdamConfig config_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::uint64_t step_ = 0;
};

}  // namespace gsa
