#include "dstod/neural/adam.hpp"

#include <cmath>

namespace dstod::nn {

template <typename T>
void Adam<T>::step(const std::vector<ParameterStore<T>*>& stores) {
  ++t_;
  const T b1 = static_cast<T>(beta1_);
  const T b2 = static_cast<T>(beta2_);
  const T c1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
  const T lr = static_cast<T>(lr_);
  const T eps = static_cast<T>(eps_);
  for (auto* store : stores) {
    for (std::size_t i = 0; i < store->size(); ++i) {
      auto& p = (*store)[i];
      if (p.frozen) continue;
      auto& mo = moments_[{store, i}];
      if (mo.m.size() == 0) {
        mo.m = Matrix<T>::Zero(p.value.rows(), p.value.cols());
        mo.v = Matrix<T>::Zero(p.value.rows(), p.value.cols());
      }
      if (mo.m.rows() != p.grad.rows() || mo.m.cols() != p.grad.cols()) {
        throw Error("adam: moment shape mismatch for '" + p.name + "'");
      }
      mo.m = b1 * mo.m + (T(1) - b1) * p.grad;
      mo.v = b2 * mo.v + (T(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -= lr * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + eps);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace dstod::nn
