#pragma once

#include "skelsplat/math.hpp"

namespace skelsplat {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

/// Adam over a flat parameter block of fixed size.
class Adam {
 public:
  Adam() = default;
  Adam(int size, const AdamConfig& cfg) : cfg_(cfg), m_(VecX::Zero(size)), v_(VecX::Zero(size)) {}

  void step(double* params, const double* grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (Eigen::Index k = 0; k < m_.size(); ++k) {
      m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * grad[k];
      v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * grad[k] * grad[k];
      params[k] -= cfg_.lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + cfg_.eps);
    }
  }

  template <typename Derived>
  void step(Eigen::DenseBase<Derived>& params, const Eigen::DenseBase<Derived>& grad) {
    step(params.derived().data(), grad.derived().data());
  }

  int size() const { return static_cast<int>(m_.size()); }
  int steps() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

 private:
  AdamConfig cfg_;
  VecX m_, v_;
  int t_ = 0;
};

}  // namespace skelsplat
