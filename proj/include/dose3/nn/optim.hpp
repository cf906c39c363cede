#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dose3/error.hpp"
#include "dose3/nn/tensor.hpp"

namespace dose3::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are indexed like the parameter
/// list they were created for.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg.lr >= 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) ||
        !(cfg.eps > 0.0)) {
      throw Error(ErrorKind::ConfigError, "invalid optimizer settings");
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }

  void restore(std::int64_t step, std::vector<std::vector<float>> m, std::vector<std::vector<float>> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  void step(std::vector<Parameter>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.numel(), 0.0f);
        v_.emplace_back(p.value.numel(), 0.0f);
      }
    }
    if (m_.size() != params.size()) throw Error(ErrorKind::ShapeError, "optimizer state does not match parameters");
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float lr_t = static_cast<float>(cfg_.lr / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    const float eps = static_cast<float>(cfg_.eps);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      if (p.grad.size() != p.value.numel()) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.grad.size(); ++i) {
        const float g = p.grad[i];
        m[i] = b1 * m[i] + (1.0f - b1) * g;
        v[i] = b2 * v[i] + (1.0f - b2) * g * g;
        p.value.data[i] -= lr_t * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace dose3::nn
