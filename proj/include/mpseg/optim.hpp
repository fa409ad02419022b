#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "mpseg/nn/tensor.hpp"

namespace mpseg {

/// Adam with L2 weight decay folded into the gradient.
template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
  };

  Adam(nn::ParamList<T> params, Options opt) : params_(nn::unique_params(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.param->size(), 0.0);
      v_.emplace_back(p.param->size(), 0.0);
    }
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  std::int64_t steps() const { return step_; }

  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k].param;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]) + opt_.weight_decay * p.value[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value[i] = static_cast<T>(p.value[i] - opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

  // Serialization hooks for checkpoints.
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::int64_t s) { step_ = s; }

 private:
  nn::ParamList<T> params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t step_ = 0;
};

/// Single-cycle cosine annealing from `base` at epoch 0 to `floor` at `total_epochs`.
inline double cosine_lr(double base, double floor, std::int64_t epoch, std::int64_t total_epochs) {
  if (total_epochs <= 0) return base;
  const double t = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(total_epochs));
  return floor + (base - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace mpseg
