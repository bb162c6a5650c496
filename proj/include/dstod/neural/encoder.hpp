#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dstod/neural/adapter_layer.hpp"
#include "dstod/neural/tensor.hpp"
#include "dstod/neural/vocab.hpp"
#include "dstod/rng.hpp"
#include "json.hpp"

namespace dstod::nn {

struct EncoderConfig {
  int layers = 2;
  int hidden = 64;
  int heads = 4;
  int ffn = 256;
  int max_len = 256;
  int vocab_size = 0;
  double dropout = 0.1;
  double init_std = 0.02;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

/// Closed-form number of base encoder parameters (embeddings, layers, pooler).
std::size_t parameter_count(const EncoderConfig& c);

struct AdapterConfig {
  int bottleneck = 4;
  Activation activation = Activation::relu;
  bool bias = true;

  void validate(int hidden) const;
  nlohmann::json to_json() const;
  static AdapterConfig from_json(const nlohmann::json& j);
};

struct AdapterBankRefs {
  std::string name;
  AdapterConfig config;
  std::vector<AdapterRefs> layers;
};

struct AdapterSetup {
  Compose compose = Compose::none;
  std::vector<AdapterBankRefs> banks;   // every bank registered on the model
  std::vector<std::size_t> active;      // indices into banks, in composition order
  std::vector<std::size_t> fusion;      // per-layer logits tensor (fuse only)
};

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
};

template <typename T>
struct LayerTrace {
  Matrix<T> input;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // one (T x T) matrix per head
  Matrix<T> context;
  Matrix<T> attn_drop;  // scaled keep mask, empty when dropout is off
  LayerNormCache<T> ln1;
  Matrix<T> a;
  Matrix<T> ffn_pre, ffn_act;
  Matrix<T> ffn_drop;
  Matrix<T> r;
  LayerNormCache<T> ln2_hook;  // h = LN2(r) seen by adapters
  Matrix<T> hook;
  std::vector<AdapterCache<T>> adapters;
  Matrix<T> fusion_weights;
  Matrix<T> composed;  // adapter composition output fed to LN2
  LayerNormCache<T> ln2;
  Matrix<T> output;
};

template <typename T>
struct EncoderTrace {
  bool recorded = false;
  std::vector<int> ids;
  std::vector<int> segments;
  std::vector<int> mask;
  Matrix<T> emb_drop;
  LayerNormCache<T> emb_ln;
  std::vector<LayerTrace<T>> layers;
  Matrix<T> hidden;  // T x h
  Matrix<T> pooled;  // 1 x h, tanh(hidden[CLS] * W + b)
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gamma, const Matrix<T>& beta, LayerNormCache<T>* cache);

/// Returns dL/dx and accumulates gamma/beta grads.
template <typename T>
Matrix<T> layer_norm_backward(Parameter<T>& gamma, Parameter<T>& beta, const LayerNormCache<T>& cache,
                              const Matrix<T>& dy);

inline constexpr double kLayerNormEps = 1e-5;

/// Post-norm transformer encoder with a tanh pooler and an adapter hook in
/// every layer.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  AdapterSetup& adapters() { return adapters_; }
  const AdapterSetup& adapters() const { return adapters_; }

  /// Dropout is applied only when `training` is true and rng is given.
  EncoderTrace<T> forward(const EncodedSequence& seq, bool training = false, Rng* rng = nullptr) const;

  /// Accumulates gradients for d(loss)/d(hidden) and d(loss)/d(pooled).
  /// Either may be an empty matrix, meaning zero.
  void backward(const EncoderTrace<T>& trace, const Matrix<T>& d_hidden, const Matrix<T>& d_pooled);

  std::size_t token_embedding_index() const { return tok_; }

  template <typename U>
  Encoder<U> cast() const;

  // Used by cast() and checkpoint loading.
  void rebuild_index();

 private:
  template <typename U>
  friend class Encoder;

  struct LayerRefs {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  Matrix<T> compose_forward(std::size_t layer, const Matrix<T>& hook, const Matrix<T>& r, LayerTrace<T>& lt) const;
  void compose_backward(std::size_t layer, const LayerTrace<T>& lt, const Matrix<T>& d_comp, Matrix<T>& d_hook,
                        Matrix<T>& d_r);

  EncoderConfig config_;
  ParameterStore<T> params_;
  AdapterSetup adapters_;
  std::size_t tok_ = 0, pos_ = 0, seg_ = 0, emb_g_ = 0, emb_b_ = 0, pool_w_ = 0, pool_b_ = 0;
  std::vector<LayerRefs> layers_;
};

template <typename T>
template <typename U>
Encoder<U> Encoder<T>::cast() const {
  Encoder<U> out;
  out.config_ = config_;
  out.params_ = params_.template cast<U>();
  out.adapters_ = adapters_;
  out.rebuild_index();
  return out;
}

}  // namespace dstod::nn
