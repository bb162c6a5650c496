#include "dstod/neural/encoder.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace dstod::nn {

void EncoderConfig::validate() const {
  if (layers < 1) throw ValidationError("encoder: layers must be >= 1");
  if (hidden < 1 || heads < 1 || hidden % heads != 0) {
    throw ValidationError("encoder: hidden size must be divisible by heads");
  }
  if (ffn < 1) throw ValidationError("encoder: ffn size must be >= 1");
  if (max_len < 2) throw ValidationError("encoder: max_len must be >= 2");
  if (vocab_size <= Vocab::kNumSpecial) throw ValidationError("encoder: vocab too small");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("encoder: dropout must be in [0,1)");
  if (!(init_std > 0.0)) throw ValidationError("encoder: init_std must be positive");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"layers", layers}, {"hidden", hidden},         {"heads", heads},     {"ffn", ffn},
          {"max_len", max_len}, {"vocab_size", vocab_size}, {"dropout", dropout}, {"init_std", init_std}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.layers = j.value("layers", c.layers);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.ffn = j.value("ffn", c.ffn);
  c.max_len = j.value("max_len", c.max_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dropout = j.value("dropout", c.dropout);
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

std::size_t parameter_count(const EncoderConfig& c) {
  const std::size_t h = static_cast<std::size_t>(c.hidden);
  const std::size_t f = static_cast<std::size_t>(c.ffn);
  const std::size_t embeddings =
      (static_cast<std::size_t>(c.vocab_size) + static_cast<std::size_t>(c.max_len) + 2) * h + 2 * h;
  const std::size_t layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
  const std::size_t pooler = h * h + h;
  return embeddings + static_cast<std::size_t>(c.layers) * layer + pooler;
}

void AdapterConfig::validate(int hidden) const {
  if (bottleneck < 1) throw ValidationError("adapter: bottleneck must be >= 1");
  if (bottleneck >= hidden) throw ValidationError("adapter: bottleneck m must be < hidden size h");
}

nlohmann::json AdapterConfig::to_json() const {
  return {{"bottleneck", bottleneck}, {"activation", to_string(activation)}, {"bias", bias}};
}

AdapterConfig AdapterConfig::from_json(const nlohmann::json& j) {
  AdapterConfig c;
  c.bottleneck = j.value("bottleneck", c.bottleneck);
  c.activation = parse_activation(j.value("activation", std::string("relu")));
  c.bias = j.value("bias", true);
  return c;
}

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gamma, const Matrix<T>& beta, LayerNormCache<T>* cache) {
  const T n = static_cast<T>(x.cols());
  Eigen::Matrix<T, Eigen::Dynamic, 1> mean = x.rowwise().sum() / n;
  Matrix<T> centered = x.colwise() - mean;
  Eigen::Matrix<T, Eigen::Dynamic, 1> var = centered.cwiseAbs2().rowwise().sum() / n;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv =
      (var.array() + static_cast<T>(kLayerNormEps)).rsqrt().matrix();
  Matrix<T> xhat = centered.array().colwise() * inv.array();
  Matrix<T> y = xhat.array().rowwise() * gamma.row(0).array();
  y.rowwise() += beta.row(0);
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(Parameter<T>& gamma, Parameter<T>& beta, const LayerNormCache<T>& cache,
                              const Matrix<T>& dy) {
  if (!gamma.frozen) gamma.grad.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
  if (!beta.frozen) beta.grad.row(0) += dy.colwise().sum();
  const T n = static_cast<T>(dy.cols());
  Matrix<T> dxhat = dy.array().rowwise() * gamma.value.row(0).array();
  Eigen::Matrix<T, Eigen::Dynamic, 1> s1 = dxhat.rowwise().sum();
  Eigen::Matrix<T, Eigen::Dynamic, 1> s2 = dxhat.cwiseProduct(cache.xhat).rowwise().sum();
  Matrix<T> dx = n * dxhat;
  dx.colwise() -= s1;
  dx -= (cache.xhat.array().colwise() * s2.array()).matrix();
  dx = dx.array().colwise() * (cache.inv_std.array() / n);
  return dx;
}

namespace {

template <typename T>
void fill_normal(Matrix<T>& m, Rng& rng, double std) {
  std::normal_distribution<double> dist(0.0, std);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix<T> m(rows, cols);
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : T(0);
  return m;
}

template <typename T>
Matrix<T> softmax_row(const Matrix<T>& logits) {
  Matrix<T> w = (logits.array() - logits.maxCoeff()).exp().matrix();
  return w / w.sum();
}

}  // namespace

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const int h = config_.hidden;
  Rng rng(mix_seed(seed, 0x656e636f646572ULL));
  const double sd = config_.init_std;
  auto weight = [&](const std::string& name, int rows, int cols) {
    auto i = params_.add(name, rows, cols);
    fill_normal(params_[i].value, rng, sd);
  };
  auto norm = [&](const std::string& prefix) {
    params_.add(prefix + ".gamma", 1, h);
    params_[params_.size() - 1].value.setOnes();
    params_.add(prefix + ".beta", 1, h);
  };
  weight("embeddings.token", config_.vocab_size, h);
  weight("embeddings.position", config_.max_len, h);
  weight("embeddings.segment", 2, h);
  norm("embeddings.norm");
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    for (const char* n : {"query", "key", "value", "output"}) {
      weight(p + "attention." + n + ".weight", h, h);
      params_.add(p + "attention." + n + ".bias", 1, h);
    }
    norm(p + "attention.norm");
    weight(p + "ffn.in.weight", h, config_.ffn);
    params_.add(p + "ffn.in.bias", 1, config_.ffn);
    weight(p + "ffn.out.weight", config_.ffn, h);
    params_.add(p + "ffn.out.bias", 1, h);
    norm(p + "ffn.norm");
  }
  weight("pooler.weight", h, h);
  params_.add("pooler.bias", 1, h);
  rebuild_index();
}

template <typename T>
void Encoder<T>::rebuild_index() {
  tok_ = params_.index_of("embeddings.token");
  pos_ = params_.index_of("embeddings.position");
  seg_ = params_.index_of("embeddings.segment");
  emb_g_ = params_.index_of("embeddings.norm.gamma");
  emb_b_ = params_.index_of("embeddings.norm.beta");
  pool_w_ = params_.index_of("pooler.weight");
  pool_b_ = params_.index_of("pooler.bias");
  layers_.clear();
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    auto ix = [&](const std::string& n) { return params_.index_of(p + n); };
    layers_.push_back(LayerRefs{ix("attention.query.weight"), ix("attention.query.bias"),
                                ix("attention.key.weight"), ix("attention.key.bias"),
                                ix("attention.value.weight"), ix("attention.value.bias"),
                                ix("attention.output.weight"), ix("attention.output.bias"),
                                ix("attention.norm.gamma"), ix("attention.norm.beta"),
                                ix("ffn.in.weight"), ix("ffn.in.bias"),
                                ix("ffn.out.weight"), ix("ffn.out.bias"),
                                ix("ffn.norm.gamma"), ix("ffn.norm.beta")});
  }
}

template <typename T>
Matrix<T> Encoder<T>::compose_forward(std::size_t layer, const Matrix<T>& hook, const Matrix<T>& r,
                                      LayerTrace<T>& lt) const {
  const auto& active = adapters_.active;
  lt.adapters.assign(active.size(), {});
  auto refs = [&](std::size_t j) -> const AdapterRefs& { return adapters_.banks[active[j]].layers[layer]; };
  auto act = [&](std::size_t j) { return adapters_.banks[active[j]].config.activation; };
  switch (adapters_.compose) {
    case Compose::single:
      return adapter_apply(params_, refs(0), act(0), hook, r, &lt.adapters[0]);
    case Compose::stack: {
      Matrix<T> a = adapter_apply(params_, refs(0), act(0), hook, r, &lt.adapters[0]);
      for (std::size_t j = 1; j < active.size(); ++j) {
        a = adapter_apply(params_, refs(j), act(j), a, a, &lt.adapters[j]);
      }
      return a;
    }
    case Compose::fuse: {
      lt.fusion_weights = softmax_row<T>(params_[adapters_.fusion[layer]].value);
      Matrix<T> out = Matrix<T>::Zero(r.rows(), r.cols());
      for (std::size_t j = 0; j < active.size(); ++j) {
        out += lt.fusion_weights(0, static_cast<Eigen::Index>(j)) *
               adapter_apply(params_, refs(j), act(j), hook, r, &lt.adapters[j]);
      }
      return out;
    }
    case Compose::none:
      break;
  }
  return r;
}

template <typename T>
void Encoder<T>::compose_backward(std::size_t layer, const LayerTrace<T>& lt, const Matrix<T>& d_comp,
                                  Matrix<T>& d_hook, Matrix<T>& d_r) {
  const auto& active = adapters_.active;
  auto refs = [&](std::size_t j) -> const AdapterRefs& { return adapters_.banks[active[j]].layers[layer]; };
  auto act = [&](std::size_t j) { return adapters_.banks[active[j]].config.activation; };
  switch (adapters_.compose) {
    case Compose::single:
      d_hook = adapter_backward(params_, refs(0), act(0), lt.adapters[0], d_comp);
      d_r = d_comp;
      return;
    case Compose::stack: {
      Matrix<T> d_a = d_comp;
      for (std::size_t j = active.size() - 1; j >= 1; --j) {
        d_a += adapter_backward(params_, refs(j), act(j), lt.adapters[j], d_a);
      }
      d_hook = adapter_backward(params_, refs(0), act(0), lt.adapters[0], d_a);
      d_r = d_a;
      return;
    }
    case Compose::fuse: {
      const auto n = static_cast<Eigen::Index>(active.size());
      d_hook = Matrix<T>::Zero(d_comp.rows(), d_comp.cols());
      d_r = Matrix<T>::Zero(d_comp.rows(), d_comp.cols());
      Matrix<T> dw(1, n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const T w = lt.fusion_weights(0, j);
        const auto ju = static_cast<std::size_t>(j);
        dw(0, j) = d_comp.cwiseProduct(lt.adapters[ju].out).sum();
        Matrix<T> d_out = w * d_comp;
        d_hook += adapter_backward(params_, refs(ju), act(ju), lt.adapters[ju], d_out);
        d_r += d_out;
      }
      auto& logits = params_[adapters_.fusion[layer]];
      if (!logits.frozen) {
        const T mean = lt.fusion_weights.cwiseProduct(dw).sum();
        logits.grad += lt.fusion_weights.cwiseProduct((dw.array() - mean).matrix());
      }
      return;
    }
    case Compose::none:
      break;
  }
  d_r = d_comp;
}

template <typename T>
EncoderTrace<T> Encoder<T>::forward(const EncodedSequence& seq, bool training, Rng* rng) const {
  const int n = seq.length();
  if (n < 1) throw Error("encoder forward: empty sequence");
  if (n > config_.max_len) throw Error("encoder forward: sequence longer than max_len");
  if (static_cast<int>(seq.segments.size()) != n || static_cast<int>(seq.mask.size()) != n) {
    throw Error("encoder forward: ids/segments/mask length mismatch");
  }
  const int h = config_.hidden;
  const int heads = config_.heads;
  const int dk = h / heads;
  const bool drop = training && rng != nullptr && config_.dropout > 0.0;

  EncoderTrace<T> tr;
  tr.ids = seq.ids;
  tr.segments = seq.segments;
  tr.mask = seq.mask;

  Matrix<T> key_bias = Matrix<T>::Zero(1, n);
  bool any = false;
  for (int t = 0; t < n; ++t) {
    if (seq.mask[static_cast<std::size_t>(t)] == 0) {
      key_bias(0, t) = -std::numeric_limits<T>::infinity();
    } else {
      any = true;
    }
  }
  if (!any) throw Error("encoder forward: attention mask has no valid position");

  const auto& tok = params_[tok_].value;
  const auto& pos = params_[pos_].value;
  const auto& seg = params_[seg_].value;
  Matrix<T> x(n, h);
  for (int t = 0; t < n; ++t) {
    const int id = seq.ids[static_cast<std::size_t>(t)];
    const int s = seq.segments[static_cast<std::size_t>(t)];
    if (id < 0 || id >= config_.vocab_size) throw Error("encoder forward: token id out of range");
    if (s < 0 || s > 1) throw Error("encoder forward: segment id must be 0 or 1");
    x.row(t) = tok.row(id) + pos.row(t) + seg.row(s);
  }
  x = layer_norm<T>(x, params_[emb_g_].value, params_[emb_b_].value, &tr.emb_ln);
  if (drop) {
    tr.emb_drop = dropout_mask<T>(n, h, config_.dropout, *rng);
    x = x.cwiseProduct(tr.emb_drop);
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  tr.layers.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& R = layers_[l];
    auto& lt = tr.layers[l];
    lt.input = x;
    lt.q = x * params_[R.wq].value;
    add_row_bias(lt.q, params_[R.bq].value);
    lt.k = x * params_[R.wk].value;
    add_row_bias(lt.k, params_[R.bk].value);
    lt.v = x * params_[R.wv].value;
    add_row_bias(lt.v, params_[R.bv].value);
    lt.context.resize(n, h);
    lt.probs.resize(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      Matrix<T> s = scale * (lt.q.middleCols(hd * dk, dk) * lt.k.middleCols(hd * dk, dk).transpose());
      s.rowwise() += key_bias.row(0);
      Eigen::Matrix<T, Eigen::Dynamic, 1> mx = s.rowwise().maxCoeff();
      Matrix<T> p = (s.colwise() - mx).array().exp().matrix();
      Eigen::Matrix<T, Eigen::Dynamic, 1> z = p.rowwise().sum();
      p = p.array().colwise() / z.array();
      lt.context.middleCols(hd * dk, dk) = p * lt.v.middleCols(hd * dk, dk);
      lt.probs[static_cast<std::size_t>(hd)] = std::move(p);
    }
    Matrix<T> attn = lt.context * params_[R.wo].value;
    add_row_bias(attn, params_[R.bo].value);
    if (drop) {
      lt.attn_drop = dropout_mask<T>(n, h, config_.dropout, *rng);
      attn = attn.cwiseProduct(lt.attn_drop);
    }
    lt.a = layer_norm<T>(x + attn, params_[R.ln1_g].value, params_[R.ln1_b].value, &lt.ln1);
    lt.ffn_pre = lt.a * params_[R.w1].value;
    add_row_bias(lt.ffn_pre, params_[R.b1].value);
    lt.ffn_act = lt.ffn_pre.unaryExpr([](T v) { return gelu(v); });
    Matrix<T> f = lt.ffn_act * params_[R.w2].value;
    add_row_bias(f, params_[R.b2].value);
    if (drop) {
      lt.ffn_drop = dropout_mask<T>(n, h, config_.dropout, *rng);
      f = f.cwiseProduct(lt.ffn_drop);
    }
    lt.r = lt.a + f;
    if (adapters_.compose == Compose::none) {
      lt.output = layer_norm<T>(lt.r, params_[R.ln2_g].value, params_[R.ln2_b].value, &lt.ln2);
    } else {
      lt.hook = layer_norm<T>(lt.r, params_[R.ln2_g].value, params_[R.ln2_b].value, &lt.ln2_hook);
      lt.composed = compose_forward(l, lt.hook, lt.r, lt);
      lt.output = layer_norm<T>(lt.composed, params_[R.ln2_g].value, params_[R.ln2_b].value, &lt.ln2);
    }
    x = lt.output;
  }
  tr.hidden = x;
  tr.pooled = x.row(0) * params_[pool_w_].value + params_[pool_b_].value;
  tr.pooled = tr.pooled.array().tanh().matrix();
  tr.recorded = true;
  return tr;
}

template <typename T>
void Encoder<T>::backward(const EncoderTrace<T>& tr, const Matrix<T>& d_hidden, const Matrix<T>& d_pooled) {
  if (!tr.recorded) throw Error("encoder backward: no recorded forward pass");
  const Eigen::Index n = tr.hidden.rows();
  const int h = config_.hidden;
  const int heads = config_.heads;
  const int dk = h / heads;
  if (d_hidden.size() != 0 && (d_hidden.rows() != n || d_hidden.cols() != h)) {
    throw Error("encoder backward: d_hidden shape mismatch");
  }
  if (d_pooled.size() != 0 && (d_pooled.rows() != 1 || d_pooled.cols() != h)) {
    throw Error("encoder backward: d_pooled shape mismatch");
  }

  Matrix<T> dx = d_hidden.size() != 0 ? d_hidden : Matrix<T>::Zero(n, h);
  if (d_pooled.size() != 0) {
    Matrix<T> dz = d_pooled.cwiseProduct((T(1) - tr.pooled.array().square()).matrix());
    Matrix<T> cls = tr.hidden.row(0);
    accumulate_weight_grad(params_[pool_w_], cls, dz);
    accumulate_bias_grad(params_[pool_b_], dz);
    dx.row(0) += dz * params_[pool_w_].value.transpose();
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& R = layers_[li];
    const auto& lt = tr.layers[li];
    Matrix<T> d_r;
    if (adapters_.compose == Compose::none) {
      d_r = layer_norm_backward(params_[R.ln2_g], params_[R.ln2_b], lt.ln2, dx);
    } else {
      Matrix<T> d_comp = layer_norm_backward(params_[R.ln2_g], params_[R.ln2_b], lt.ln2, dx);
      Matrix<T> d_hook;
      compose_backward(li, lt, d_comp, d_hook, d_r);
      d_r += layer_norm_backward(params_[R.ln2_g], params_[R.ln2_b], lt.ln2_hook, d_hook);
    }
    Matrix<T> d_a = d_r;
    Matrix<T> d_f = lt.ffn_drop.size() != 0 ? Matrix<T>(d_r.cwiseProduct(lt.ffn_drop)) : d_r;
    accumulate_weight_grad(params_[R.w2], lt.ffn_act, d_f);
    accumulate_bias_grad(params_[R.b2], d_f);
    Matrix<T> d_pre = (d_f * params_[R.w2].value.transpose())
                          .cwiseProduct(lt.ffn_pre.unaryExpr([](T v) { return gelu_grad(v); }));
    accumulate_weight_grad(params_[R.w1], lt.a, d_pre);
    accumulate_bias_grad(params_[R.b1], d_pre);
    d_a.noalias() += d_pre * params_[R.w1].value.transpose();

    Matrix<T> d_s1 = layer_norm_backward(params_[R.ln1_g], params_[R.ln1_b], lt.ln1, d_a);
    dx = d_s1;
    Matrix<T> d_attn = lt.attn_drop.size() != 0 ? Matrix<T>(d_s1.cwiseProduct(lt.attn_drop)) : d_s1;
    accumulate_weight_grad(params_[R.wo], lt.context, d_attn);
    accumulate_bias_grad(params_[R.bo], d_attn);
    Matrix<T> d_ctx = d_attn * params_[R.wo].value.transpose();

    Matrix<T> dq(n, h), dk_m(n, h), dv(n, h);
    for (int hd = 0; hd < heads; ++hd) {
      const auto& p = lt.probs[static_cast<std::size_t>(hd)];
      Matrix<T> dch = d_ctx.middleCols(hd * dk, dk);
      Matrix<T> dp = dch * lt.v.middleCols(hd * dk, dk).transpose();
      dv.middleCols(hd * dk, dk) = p.transpose() * dch;
      Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
      Matrix<T> ds = p.cwiseProduct((dp.colwise() - rs));
      ds *= scale;
      dq.middleCols(hd * dk, dk) = ds * lt.k.middleCols(hd * dk, dk);
      dk_m.middleCols(hd * dk, dk) = ds.transpose() * lt.q.middleCols(hd * dk, dk);
    }
    accumulate_weight_grad(params_[R.wq], lt.input, dq);
    accumulate_bias_grad(params_[R.bq], dq);
    accumulate_weight_grad(params_[R.wk], lt.input, dk_m);
    accumulate_bias_grad(params_[R.bk], dk_m);
    accumulate_weight_grad(params_[R.wv], lt.input, dv);
    accumulate_bias_grad(params_[R.bv], dv);
    dx.noalias() += dq * params_[R.wq].value.transpose();
    dx.noalias() += dk_m * params_[R.wk].value.transpose();
    dx.noalias() += dv * params_[R.wv].value.transpose();
  }

  if (tr.emb_drop.size() != 0) dx = dx.cwiseProduct(tr.emb_drop);
  Matrix<T> de = layer_norm_backward(params_[emb_g_], params_[emb_b_], tr.emb_ln, dx);
  auto& tok = params_[tok_];
  auto& pos = params_[pos_];
  auto& seg = params_[seg_];
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto tu = static_cast<std::size_t>(t);
    if (!tok.frozen) tok.grad.row(tr.ids[tu]) += de.row(t);
    if (!pos.frozen) pos.grad.row(t) += de.row(t);
    if (!seg.frozen) seg.grad.row(tr.segments[tu]) += de.row(t);
  }
}

template Matrix<float> layer_norm<float>(const Matrix<float>&, const Matrix<float>&, const Matrix<float>&,
                                         LayerNormCache<float>*);
template Matrix<double> layer_norm<double>(const Matrix<double>&, const Matrix<double>&, const Matrix<double>&,
                                           LayerNormCache<double>*);
template Matrix<float> layer_norm_backward<float>(Parameter<float>&, Parameter<float>&,
                                                  const LayerNormCache<float>&, const Matrix<float>&);
template Matrix<double> layer_norm_backward<double>(Parameter<double>&, Parameter<double>&,
                                                    const LayerNormCache<double>&, const Matrix<double>&);
template class Encoder<float>;
template class Encoder<double>;

}  // namespace dstod::nn
