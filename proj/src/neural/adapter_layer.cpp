#include "dstod/neural/adapter_layer.hpp"

#include <cmath>

namespace dstod::nn {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

std::string to_string(Compose c) {
  switch (c) {
    case Compose::none: return "none";
    case Compose::single: return "single";
    case Compose::stack: return "stack";
    case Compose::fuse: return "fuse";
  }
  return "none";
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw Error("unknown activation '" + s + "'");
}

Compose parse_compose(const std::string& s) {
  if (s == "none") return Compose::none;
  if (s == "single") return Compose::single;
  if (s == "stack") return Compose::stack;
  if (s == "fuse") return Compose::fuse;
  throw Error("unknown composition '" + s + "'");
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

namespace {

template <typename T>
Matrix<T> activate(const Matrix<T>& x, Activation g) {
  if (g == Activation::relu) return x.cwiseMax(T(0));
  return x.unaryExpr([](T v) { return gelu(v); });
}

template <typename T>
Matrix<T> activate_grad(const Matrix<T>& x, Activation g) {
  if (g == Activation::relu) return x.unaryExpr([](T v) { return v > T(0) ? T(1) : T(0); });
  return x.unaryExpr([](T v) { return gelu_grad(v); });
}

}  // namespace

template <typename T>
Matrix<T> adapter_apply(const ParameterStore<T>& store, const AdapterRefs& refs, Activation g,
                        const Matrix<T>& input, const Matrix<T>& residual, AdapterCache<T>* cache) {
  Matrix<T> pre = input * store[refs.down_w].value;
  if (refs.down_b != AdapterRefs::npos) add_row_bias(pre, store[refs.down_b].value);
  Matrix<T> act = activate(pre, g);
  Matrix<T> out = act * store[refs.up_w].value;
  if (refs.up_b != AdapterRefs::npos) add_row_bias(out, store[refs.up_b].value);
  out += residual;
  if (cache != nullptr) {
    cache->input = input;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
    cache->out = out;
  }
  return out;
}

template <typename T>
Matrix<T> adapter_backward(ParameterStore<T>& store, const AdapterRefs& refs, Activation g,
                           const AdapterCache<T>& cache, const Matrix<T>& d_out) {
  accumulate_weight_grad(store[refs.up_w], cache.act, d_out);
  if (refs.up_b != AdapterRefs::npos) accumulate_bias_grad(store[refs.up_b], d_out);
  Matrix<T> d_pre = (d_out * store[refs.up_w].value.transpose()).cwiseProduct(activate_grad(cache.pre, g));
  accumulate_weight_grad(store[refs.down_w], cache.input, d_pre);
  if (refs.down_b != AdapterRefs::npos) accumulate_bias_grad(store[refs.down_b], d_pre);
  return d_pre * store[refs.down_w].value.transpose();
}

#define DSTOD_INSTANTIATE(T)                                                                             \
  template T gelu<T>(T);                                                                                 \
  template T gelu_grad<T>(T);                                                                            \
  template Matrix<T> adapter_apply<T>(const ParameterStore<T>&, const AdapterRefs&, Activation,         \
                                      const Matrix<T>&, const Matrix<T>&, AdapterCache<T>*);             \
  template Matrix<T> adapter_backward<T>(ParameterStore<T>&, const AdapterRefs&, Activation,            \
                                         const AdapterCache<T>&, const Matrix<T>&);
DSTOD_INSTANTIATE(float)
DSTOD_INSTANTIATE(double)
#undef DSTOD_INSTANTIATE

}  // namespace dstod::nn
