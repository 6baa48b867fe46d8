#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "irpatch/tensor.hpp"

namespace irpatch {

/// Heavy-ball SGD: v <- momentum * v + g; theta <- theta - lr * v.
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr > 0) || momentum < 0 || momentum >= 1) throw std::invalid_argument("sgd: need lr > 0 and 0 <= momentum < 1");
  }

  /// `params[i]` is updated with `grads[i]`; velocity buffers are created on first use.
  void step(std::vector<Tensor*> params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("sgd: parameter/gradient count mismatch");
    if (velocity_.empty()) {
      for (const Tensor* p : params) velocity_.emplace_back(p->shape(), 0.0);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& v = velocity_[k];
      Tensor& p = *params[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + grads[k][i];
        p[i] -= lr_ * v[i];
      }
    }
  }

  double lr() const noexcept { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0;
  for (const Tensor& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.values()) v *= s;
    }
  }
  return norm;
}

}  // namespace irpatch
