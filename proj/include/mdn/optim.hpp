#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mdn/tensor.hpp"

namespace mdn {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// One Adam update with bias correction. `step` is 1-based.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v,
               std::size_t step, const AdamHyper& hp) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
  }
  if (step == 0) throw ShapeError("adam_step: step is 1-based");
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const T step_size = static_cast<T>(hp.lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(hp.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    params[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
  }
}

// Adam over a fixed parameter list; parameters without a gradient are
// treated as having a zero gradient.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, AdamHyper hp = {})
      : params_(std::move(params)), hp_(hp) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void set_lr(double lr) { hp_.lr = lr; }
  double lr() const { return hp_.lr; }
  std::size_t steps() const { return step_; }

  void step() {
    ++step_;
    std::vector<T> zero;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      std::span<const T> g = p.grad();
      if (!p.has_grad()) {
        zero.assign(p.numel(), T(0));
        g = zero;
      }
      adam_step<T>(p.mutable_data(), g, m_[i], v_[i], step_, hp_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamHyper hp_;
  std::size_t step_ = 0;
};

}  // namespace mdn
