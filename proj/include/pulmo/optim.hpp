#pragma once

#include <cmath>
#include <vector>

#include "pulmo/layers.hpp"

namespace pulmo {

// Stochastic gradient descent with classical momentum:
//   v <- mu * v + g;  p <- p - lr * v
template <class T>
class Sgd {
 public:
  Sgd(std::vector<NamedParam<T>> params, T lr, T momentum)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (auto& p : params_) velocity_.push_back(ArrX<T>::Zero(p.tensor.size()));
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.tensor.ensure_grad();
      p.tensor.grad().setZero();
    }
  }

  // Global L2 gradient clipping: when the joint norm exceeds max_norm, every
  // gradient is rescaled by max_norm / norm. Returns the pre-clip norm.
  T clip_global_norm(T max_norm) {
    double sq = 0;
    for (auto& p : params_) {
      p.tensor.ensure_grad();
      sq += static_cast<double>(p.tensor.grad().square().sum());
    }
    const T norm = static_cast<T>(std::sqrt(sq));
    if (norm > max_norm && norm > T(0)) {
      const T s = max_norm / norm;
      for (auto& p : params_) p.tensor.grad() *= s;
    }
    return norm;
  }

  T grad_norm() const {
    double sq = 0;
    for (const auto& p : params_)
      if (p.tensor.grad().size() == p.tensor.size()) sq += static_cast<double>(p.tensor.grad().square().sum());
    return static_cast<T>(std::sqrt(sq));
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i].tensor;
      t.ensure_grad();
      velocity_[i] = momentum_ * velocity_[i] + t.grad();
      t.value() -= lr_ * velocity_[i];
    }
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }

 private:
  std::vector<NamedParam<T>> params_;
  std::vector<ArrX<T>> velocity_;
  T lr_, momentum_;
};

}  // namespace pulmo
