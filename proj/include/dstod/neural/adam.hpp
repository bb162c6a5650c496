#pragma once

#include <map>
#include <utility>
#include <vector>

#include "dstod/neural/tensor.hpp"

namespace dstod::nn {

/// Bias-corrected Adam. Moments are keyed by (store address, tensor index),
/// so the same stores must be passed on every step.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParameterStore<T>*>& stores);

  long steps() const { return t_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct Moments {
    Matrix<T> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::pair<const void*, std::size_t>, Moments> moments_;
};

}  // namespace dstod::nn
