#pragma once

#include <string>

#include "dstod/neural/tensor.hpp"

namespace dstod::nn {

enum class Activation { relu, gelu };
enum class Compose { none, single, stack, fuse };

std::string to_string(Activation a);
std::string to_string(Compose c);
Activation parse_activation(const std::string& s);
Compose parse_compose(const std::string& s);

/// Indices of one adapter's tensors inside the host store. Bias indices are
/// npos in bias-free mode.
struct AdapterRefs {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t down_w = npos;  // h x m
  std::size_t down_b = npos;  // 1 x m
  std::size_t up_w = npos;    // m x h
  std::size_t up_b = npos;    // 1 x h
};

template <typename T>
struct AdapterCache {
  Matrix<T> input;
  Matrix<T> pre;  // input * D + b_D
  Matrix<T> act;  // g(pre)
  Matrix<T> out;
};

template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

/// out = g(input * D + b_D) * U + b_U + residual, row-wise.
template <typename T>
Matrix<T> adapter_apply(const ParameterStore<T>& store, const AdapterRefs& refs, Activation g,
                        const Matrix<T>& input, const Matrix<T>& residual, AdapterCache<T>* cache);

/// Accumulates parameter grads; returns d_input. d_residual equals d_out.
template <typename T>
Matrix<T> adapter_backward(ParameterStore<T>& store, const AdapterRefs& refs, Activation g,
                           const AdapterCache<T>& cache, const Matrix<T>& d_out);

}  // namespace dstod::nn
