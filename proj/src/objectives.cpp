#include "dstod/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include "dstod/error.hpp"
#include "dstod/neural/adam.hpp"

namespace dstod {

using nn::EncodedSequence;
using nn::EncoderTrace;
using nn::ParameterStore;

ScoreLoss nce_loss(const std::vector<double>& scores, std::size_t true_index) {
  if (true_index >= scores.size()) throw Error("nce_loss: true index out of range");
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double s : scores) z += std::exp(s - mx);
  ScoreLoss out;
  out.loss = -(scores[true_index] - mx - std::log(z));
  out.grad.resize(scores.size());
  out.rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out.grad[i] = std::exp(scores[i] - mx) / z - (i == true_index ? 1.0 : 0.0);
    if (i != true_index && scores[i] >= scores[true_index]) ++out.rank;
  }
  return out;
}

ScoreLoss bce_loss(double score, int label) {
  if (label != 0 && label != 1) throw Error("bce_loss: label must be 0 or 1");
  // softplus(x) = log(1 + e^x), evaluated without overflow
  auto softplus = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  ScoreLoss out;
  out.loss = label == 1 ? softplus(-score) : softplus(score);
  const double p = score >= 0 ? 1.0 / (1.0 + std::exp(-score)) : std::exp(score) / (1.0 + std::exp(score));
  out.grad = {p - label};
  out.rank = (score > 0) == (label == 1) ? 1 : 2;
  return out;
}

ScoreLoss softmax_cross_entropy(const std::vector<double>& logits, std::size_t label) {
  return nce_loss(logits, label);
}

std::string to_string(ScoreMode m) { return m == ScoreMode::dual_encoder_dot ? "dual_encoder_dot" : "linear_on_cls"; }

ScoreMode parse_score_mode(const std::string& s) {
  if (s == "dual_encoder_dot" || s == "dual") return ScoreMode::dual_encoder_dot;
  if (s == "linear_on_cls" || s == "linear") return ScoreMode::linear_on_cls;
  throw Error("unknown scoring mode '" + s + "'");
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::mlm: return "mlm";
    case Objective::rs_class: return "rs-class";
    case Objective::rs_contrast: return "rs-contrast";
  }
  return "mlm";
}

Objective parse_objective(const std::string& s) {
  if (s == "mlm") return Objective::mlm;
  if (s == "rs-class" || s == "rs_class") return Objective::rs_class;
  if (s == "rs-contrast" || s == "rs_contrast") return Objective::rs_contrast;
  throw Error("unknown objective '" + s + "'");
}

namespace {

template <typename T>
void fill_normal(Matrix<T>& m, Rng& rng, double sd) {
  std::normal_distribution<double> d(0.0, sd);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(d(rng));
}

template <typename T>
double dot(const Matrix<T>& a, const Matrix<T>& b) {
  return static_cast<double>(a.cwiseProduct(b).sum());
}

}  // namespace

template <typename T>
MlmHead<T>::MlmHead(const nn::EncoderConfig& c, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6d6c6dULL));
  auto w = params_.add("mlm.transform.weight", c.hidden, c.hidden);
  fill_normal(params_[w].value, rng, c.init_std);
  params_.add("mlm.transform.bias", 1, c.hidden);
  auto g = params_.add("mlm.norm.gamma", 1, c.hidden);
  params_[g].value.setOnes();
  params_.add("mlm.norm.beta", 1, c.hidden);
  params_.add("mlm.output.bias", 1, c.vocab_size);
}

template <typename T>
LossValue mlm_loss(Encoder<T>& enc, MlmHead<T>& head, const std::vector<nn::MaskedSequence>& batch, bool backward,
                   Rng* dropout, double grad_scale) {
  LossValue lv;
  for (const auto& m : batch) lv.count += static_cast<std::size_t>(m.selected());
  if (lv.count == 0) return lv;
  auto& hp = head.params();
  auto& W = hp.at("mlm.transform.weight");
  auto& b = hp.at("mlm.transform.bias");
  auto& gamma = hp.at("mlm.norm.gamma");
  auto& beta = hp.at("mlm.norm.beta");
  auto& ob = hp.at("mlm.output.bias");
  auto& E = enc.params()[enc.token_embedding_index()];
  const double scale = grad_scale / static_cast<double>(lv.count);
  double total = 0.0;
  for (const auto& m : batch) {
    std::vector<Eigen::Index> pos;
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      if (m.labels[i] != nn::kIgnoreLabel) pos.push_back(static_cast<Eigen::Index>(i));
    }
    if (pos.empty()) continue;
    auto tr = enc.forward(m.seq, dropout != nullptr, dropout);
    const auto k = static_cast<Eigen::Index>(pos.size());
    Matrix<T> X(k, tr.hidden.cols());
    for (Eigen::Index i = 0; i < k; ++i) X.row(i) = tr.hidden.row(pos[static_cast<std::size_t>(i)]);
    Matrix<T> Z = X * W.value;
    nn::add_row_bias(Z, b.value);
    Matrix<T> G = Z.unaryExpr([](T v) { return nn::gelu(v); });
    nn::LayerNormCache<T> ln;
    Matrix<T> Y = nn::layer_norm<T>(G, gamma.value, beta.value, &ln);
    Matrix<T> logits = Y * E.value.transpose();
    nn::add_row_bias(logits, ob.value);
    Matrix<T> dlogits(k, logits.cols());
    for (Eigen::Index i = 0; i < k; ++i) {
      const int label = m.labels[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])];
      const T mx = logits.row(i).maxCoeff();
      auto e = (logits.row(i).array() - mx).exp();
      const T z = e.sum();
      total += -(static_cast<double>(logits(i, label) - mx) - std::log(static_cast<double>(z)));
      if (backward) {
        dlogits.row(i) = e / z;
        dlogits(i, label) -= T(1);
      }
    }
    if (!backward) continue;
    dlogits *= static_cast<T>(scale);
    nn::accumulate_bias_grad(ob, dlogits);
    if (!E.frozen) E.grad.noalias() += dlogits.transpose() * Y;
    Matrix<T> dY = dlogits * E.value;
    Matrix<T> dG = nn::layer_norm_backward(gamma, beta, ln, dY);
    Matrix<T> dZ = dG.cwiseProduct(Z.unaryExpr([](T v) { return nn::gelu_grad(v); }));
    nn::accumulate_weight_grad(W, X, dZ);
    nn::accumulate_bias_grad(b, dZ);
    Matrix<T> dX = dZ * W.value.transpose();
    Matrix<T> d_hidden = Matrix<T>::Zero(tr.hidden.rows(), tr.hidden.cols());
    for (Eigen::Index i = 0; i < k; ++i) d_hidden.row(pos[static_cast<std::size_t>(i)]) = dX.row(i);
    enc.backward(tr, d_hidden, {});
  }
  lv.loss = total / static_cast<double>(lv.count);
  return lv;
}

template <typename T>
ScoringHead<T>::ScoringHead(ScoreMode m, int hidden, std::uint64_t seed, const std::string& prefix) : mode(m) {
  if (mode == ScoreMode::linear_on_cls) {
    Rng rng(mix_seed(seed, 0x7273ULL));
    auto w = params.add(prefix + ".weight", hidden, 1);
    fill_normal(params[w].value, rng, 0.02);
    params.add(prefix + ".bias", 1, 1);
  }
}

template <typename T>
std::vector<double> ScoreTape<T>::forward(const Encoder<T>& enc, const ScoringHead<T>& head,
                                          const nn::TextCodec& codec, const std::string& context,
                                          const std::vector<std::string>& candidates, Rng* dropout) {
  mode_ = head.mode;
  const bool train = dropout != nullptr;
  candidates_.clear();
  std::vector<double> scores;
  scores.reserve(candidates.size());
  if (mode_ == ScoreMode::dual_encoder_dot) {
    context_ = enc.forward(codec.single(context), train, dropout);
    for (const auto& c : candidates) {
      candidates_.push_back(enc.forward(codec.single(c), train, dropout));
      scores.push_back(dot(context_.pooled, candidates_.back().pooled));
    }
  } else {
    const auto& w = head.params[0].value;
    const double bias = static_cast<double>(head.params[1].value(0, 0));
    for (const auto& c : candidates) {
      candidates_.push_back(enc.forward(codec.pair(context, c), train, dropout));
      scores.push_back(static_cast<double>((candidates_.back().pooled * w)(0, 0)) + bias);
    }
  }
  return scores;
}

template <typename T>
void ScoreTape<T>::backward(Encoder<T>& enc, ScoringHead<T>& head, const std::vector<double>& d_scores) {
  if (d_scores.size() != candidates_.size()) throw Error("score backward: gradient count mismatch");
  if (mode_ == ScoreMode::dual_encoder_dot) {
    Matrix<T> d_ctx = Matrix<T>::Zero(1, context_.pooled.cols());
    for (std::size_t i = 0; i < candidates_.size(); ++i) {
      const T d = static_cast<T>(d_scores[i]);
      if (d == T(0)) continue;
      d_ctx += d * candidates_[i].pooled;
      enc.backward(candidates_[i], {}, Matrix<T>(d * context_.pooled));
    }
    enc.backward(context_, {}, d_ctx);
  } else {
    auto& w = head.params[0];
    auto& b = head.params[1];
    for (std::size_t i = 0; i < candidates_.size(); ++i) {
      const T d = static_cast<T>(d_scores[i]);
      if (!w.frozen) w.grad += d * candidates_[i].pooled.transpose();
      if (!b.frozen) b.grad(0, 0) += d;
      enc.backward(candidates_[i], {}, Matrix<T>(d * w.value.transpose()));
    }
  }
}

template <typename T>
LossValue rs_class_loss(Encoder<T>& enc, ScoringHead<T>& head, const nn::TextCodec& codec,
                        const std::vector<RSInstance>& instances, bool backward, Rng* dropout, double grad_scale) {
  LossValue lv;
  lv.count = instances.size();
  if (instances.empty()) return lv;
  const double scale = grad_scale / static_cast<double>(instances.size());
  double total = 0.0, correct = 0.0;
  ScoreTape<T> tape;
  std::size_t i = 0;
  while (i < instances.size()) {
    // consecutive instances sharing a context are scored against one context encoding
    std::size_t j = i;
    std::vector<std::string> responses;
    while (j < instances.size() && instances[j].context == instances[i].context &&
           (head.mode == ScoreMode::dual_encoder_dot || j == i)) {
      responses.push_back(instances[j].response);
      ++j;
    }
    auto scores = tape.forward(enc, head, codec, instances[i].context, responses, dropout);
    std::vector<double> grads(scores.size());
    for (std::size_t q = 0; q < scores.size(); ++q) {
      const int label = instances[i + q].label == RsLabel::positive ? 1 : 0;
      auto l = bce_loss(scores[q], label);
      total += l.loss;
      correct += l.rank == 1 ? 1.0 : 0.0;
      grads[q] = l.grad[0] * scale;
    }
    if (backward) tape.backward(enc, head, grads);
    i = j;
  }
  lv.loss = total / static_cast<double>(lv.count);
  lv.accuracy = correct / static_cast<double>(lv.count);
  return lv;
}

template <typename T>
LossValue rs_contrast_loss(Encoder<T>& enc, ScoringHead<T>& head, const nn::TextCodec& codec, const NCEGroup& group,
                           bool backward, Rng* dropout, double grad_scale) {
  ScoreTape<T> tape;
  auto scores = tape.forward(enc, head, codec, group.context, group.responses, dropout);
  auto l = nce_loss(scores, group.true_index);
  if (backward) {
    for (double& g : l.grad) g *= grad_scale;
    tape.backward(enc, head, l.grad);
  }
  LossValue lv;
  lv.loss = l.loss;
  lv.count = 1;
  lv.mean_rank = static_cast<double>(l.rank);
  lv.reciprocal_rank = 1.0 / static_cast<double>(l.rank);
  return lv;
}

bool EarlyStopper::update(double metric) {
  ++epochs_;
  const bool improved = epochs_ == 1 || (higher_ ? metric > best_ : metric < best_);
  if (improved) {
    best_ = metric;
    best_epoch_ = epochs_;
    bad_ = 0;
  } else {
    ++bad_;
  }
  return improved;
}

std::size_t SpecializationData::train_size() const {
  switch (objective) {
    case Objective::mlm: return mlm_train.size();
    case Objective::rs_class: return cls_train.size();
    case Objective::rs_contrast: return nce_train.size();
  }
  return 0;
}

std::size_t SpecializationData::dev_size() const {
  return objective == Objective::mlm ? mlm_dev.size() : nce_dev.size();
}

template <typename Item>
std::pair<std::vector<Item>, std::vector<Item>> split_train_dev(const std::vector<Item>& items, double dev_fraction,
                                                                std::uint64_t seed) {
  if (items.size() < 2) throw Error("train/dev split needs at least 2 items");
  if (!(dev_fraction > 0.0 && dev_fraction < 1.0)) throw Error("dev fraction must be in (0,1)");
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0x646576ULL));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_dev = static_cast<std::size_t>(std::lround(dev_fraction * static_cast<double>(items.size())));
  n_dev = std::clamp<std::size_t>(n_dev, 1, items.size() - 1);
  std::vector<bool> is_dev(items.size(), false);
  for (std::size_t i = 0; i < n_dev; ++i) is_dev[idx[i]] = true;
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (std::size_t i = 0; i < items.size(); ++i) (is_dev[i] ? out.second : out.first).push_back(items[i]);
  return out;
}

template std::pair<std::vector<std::string>, std::vector<std::string>> split_train_dev(
    const std::vector<std::string>&, double, std::uint64_t);
template std::pair<std::vector<DialogTriple>, std::vector<DialogTriple>> split_train_dev(
    const std::vector<DialogTriple>&, double, std::uint64_t);

SpecializationData prepare_mlm(const std::vector<CorpusLine>& corpus, const Schedule& schedule) {
  std::vector<std::string> lines;
  lines.reserve(corpus.size());
  for (const auto& c : corpus) lines.push_back(c.text);
  SpecializationData d;
  d.objective = Objective::mlm;
  std::tie(d.mlm_train, d.mlm_dev) = split_train_dev(lines, schedule.dev_fraction, schedule.seed);
  return d;
}

SpecializationData prepare_rs(Objective objective, const std::vector<DialogTriple>& triples,
                              const Schedule& schedule) {
  if (objective == Objective::mlm) throw Error("prepare_rs: objective must be rs-class or rs-contrast");
  SpecializationData d;
  d.objective = objective;
  auto [train, dev] = split_train_dev(triples, schedule.dev_fraction, schedule.seed);
  auto train_sampling = sample_rs_instances(train, ResponsePool::from_triples(train), mix_seed(schedule.seed, 11));
  auto dev_sampling = sample_rs_instances(dev, ResponsePool::from_triples(dev), mix_seed(schedule.seed, 12));
  if (objective == Objective::rs_class) {
    d.cls_train = train_sampling.flatten();
  } else {
    d.nce_train = build_nce_groups(train_sampling, mix_seed(schedule.seed, 13));
  }
  d.cls_dev = dev_sampling.flatten();
  d.nce_dev = build_nce_groups(dev_sampling, mix_seed(schedule.seed, 14));
  return d;
}

template <typename T>
double clip_gradients(const std::vector<ParameterStore<T>*>& stores, double max_norm) {
  double sq = 0.0;
  for (auto* s : stores)
    for (const auto& p : *s)
      if (!p.frozen) sq += static_cast<double>(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto* s : stores)
      for (auto& p : *s)
        if (!p.frozen) p.grad *= f;
  }
  return norm;
}

namespace {

template <typename T>
double mean_reciprocal_rank(Encoder<T>& enc, ScoringHead<T>& head, const nn::TextCodec& codec,
                            const std::vector<NCEGroup>& groups) {
  if (groups.empty()) throw Error("dev set is empty");
  double total = 0.0;
  for (const auto& g : groups) total += rs_contrast_loss(enc, head, codec, g, false).reciprocal_rank;
  return total / static_cast<double>(groups.size());
}

// Units of consecutive same-context instances stay together when shuffling.
std::vector<std::pair<std::size_t, std::size_t>> context_units(const std::vector<RSInstance>& xs) {
  std::vector<std::pair<std::size_t, std::size_t>> units;
  std::size_t i = 0;
  while (i < xs.size()) {
    std::size_t j = i + 1;
    while (j < xs.size() && xs[j].context == xs[i].context) ++j;
    units.emplace_back(i, j);
    i = j;
  }
  return units;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

template <typename T>
std::string SpecializeResult<T>::log_text() const {
  std::string out;
  for (const auto& r : runs) {
    for (const auto& e : r.epochs) {
      out += "lr=" + fmt("%.0e", r.lr) + " epoch=" + std::to_string(e.epoch) +
             " train_loss=" + fmt("%.6f", e.train_loss) + " dev=" + fmt("%.6f", e.dev_metric) +
             (e.improved ? " *" : "") + "\n";
    }
    if (r.diverged) out += "lr=" + fmt("%.0e", r.lr) + " aborted: " + r.note + "\n";
  }
  if (!runs.empty()) {
    const auto& b = runs[best_run];
    out += "best lr=" + fmt("%.0e", b.lr) + " epoch=" + std::to_string(b.best_epoch) +
           " dev=" + fmt("%.6f", b.best_dev) + "\n";
  }
  return out;
}

template <typename T>
SpecializeResult<T> specialize(const Encoder<T>& model, const SpecializationData& data, const nn::TextCodec& codec,
                               const Schedule& sch, ScoreMode mode, std::ostream* progress) {
  if (sch.lrs.empty()) throw Error("specialize: no learning rate given");
  if (sch.epochs < 1 || sch.batch < 1 || sch.patience < 1) throw Error("specialize: invalid schedule");
  if (data.train_size() == 0 || data.dev_size() == 0) throw Error("specialize: empty train or dev data");
  const bool is_mlm = data.objective == Objective::mlm;
  const int vocab_size = model.config().vocab_size;

  std::vector<EncodedSequence> mlm_train, mlm_dev;
  std::vector<nn::MaskedSequence> mlm_dev_masked;
  if (is_mlm) {
    for (const auto& l : data.mlm_train) mlm_train.push_back(codec.single(l));
    for (const auto& l : data.mlm_dev) mlm_dev.push_back(codec.single(l));
    mlm_dev_masked = nn::mask_tokens(mlm_dev, vocab_size, mix_seed(sch.seed, 0x6465766d61736bULL), sch.mask_prob);
  }
  const auto units = context_units(data.cls_train);

  SpecializeResult<T> result;
  bool have_best = false;
  for (std::size_t li = 0; li < sch.lrs.size(); ++li) {
    const double lr = sch.lrs[li];
    Encoder<T> enc = model;
    MlmHead<T> mlm_head;
    ScoringHead<T> rs_head;
    if (is_mlm) {
      mlm_head = MlmHead<T>(model.config(), mix_seed(sch.seed, 21));
    } else {
      rs_head = ScoringHead<T>(mode, model.config().hidden, mix_seed(sch.seed, 22));
    }
    std::vector<ParameterStore<T>*> stores{&enc.params(), is_mlm ? &mlm_head.params() : &rs_head.params};
    nn::Adam<T> adam(lr);
    EarlyStopper stopper(sch.patience, !is_mlm);
    Encoder<T> best_enc = enc;
    MlmHead<T> best_mlm = mlm_head;
    ScoringHead<T> best_rs = rs_head;
    RunLog run;
    run.lr = lr;

    auto dev_metric = [&]() {
      if (is_mlm) return mlm_loss(enc, mlm_head, mlm_dev_masked, false).loss;
      return mean_reciprocal_rank(enc, rs_head, codec, data.nce_dev);
    };

    for (int epoch = 1; epoch <= sch.epochs && !run.diverged; ++epoch) {
      const std::uint64_t es = mix_seed(sch.seed, 1000 * (li + 1) + static_cast<std::uint64_t>(epoch));
      Rng order(mix_seed(es, 1));
      Rng drop(mix_seed(es, 2));
      double loss_sum = 0.0;
      std::size_t n_batches = 0;
      auto step = [&](double batch_loss) {
        if (!std::isfinite(batch_loss)) {
          run.diverged = true;
          run.note = "non-finite training loss in epoch " + std::to_string(epoch);
          return false;
        }
        if (sch.clip_norm > 0.0) clip_gradients(stores, sch.clip_norm);
        adam.step(stores);
        loss_sum += batch_loss;
        ++n_batches;
        return true;
      };
      const auto B = static_cast<std::size_t>(sch.batch);
      if (is_mlm) {
        auto masked = nn::mask_tokens(mlm_train, vocab_size, mix_seed(es, 3), sch.mask_prob);
        std::shuffle(masked.begin(), masked.end(), order);
        for (std::size_t s = 0; s < masked.size() && !run.diverged; s += B) {
          std::vector<nn::MaskedSequence> batch(masked.begin() + static_cast<std::ptrdiff_t>(s),
                                                masked.begin() + static_cast<std::ptrdiff_t>(std::min(masked.size(), s + B)));
          for (auto* st : stores) st->zero_grad();
          auto lv = mlm_loss(enc, mlm_head, batch, true, &drop);
          if (lv.count == 0) continue;
          step(lv.loss);
        }
      } else if (data.objective == Objective::rs_class) {
        auto shuffled_units = units;
        std::shuffle(shuffled_units.begin(), shuffled_units.end(), order);
        std::vector<RSInstance> flat;
        flat.reserve(data.cls_train.size());
        for (auto [a, b] : shuffled_units)
          for (std::size_t i = a; i < b; ++i) flat.push_back(data.cls_train[i]);
        for (std::size_t s = 0; s < flat.size() && !run.diverged; s += B) {
          std::vector<RSInstance> batch(flat.begin() + static_cast<std::ptrdiff_t>(s),
                                        flat.begin() + static_cast<std::ptrdiff_t>(std::min(flat.size(), s + B)));
          for (auto* st : stores) st->zero_grad();
          step(rs_class_loss(enc, rs_head, codec, batch, true, &drop).loss);
        }
      } else {
        std::vector<std::size_t> idx(data.nce_train.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), order);
        for (std::size_t s = 0; s < idx.size() && !run.diverged; s += B) {
          const std::size_t e = std::min(idx.size(), s + B);
          for (auto* st : stores) st->zero_grad();
          double total = 0.0;
          for (std::size_t i = s; i < e; ++i) {
            total += rs_contrast_loss(enc, rs_head, codec, data.nce_train[idx[i]], true, &drop,
                                      1.0 / static_cast<double>(e - s))
                         .loss;
          }
          step(total / static_cast<double>(e - s));
        }
      }
      if (run.diverged) break;
      EpochLog log;
      log.epoch = epoch;
      log.train_loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
      log.dev_metric = dev_metric();
      if (!std::isfinite(log.dev_metric)) {
        run.diverged = true;
        run.note = "non-finite dev metric in epoch " + std::to_string(epoch);
        break;
      }
      log.improved = stopper.update(log.dev_metric);
      if (log.improved) {
        best_enc = enc;
        best_mlm = mlm_head;
        best_rs = rs_head;
      }
      run.epochs.push_back(log);
      if (progress != nullptr) {
        *progress << to_string(data.objective) << " lr=" << fmt("%.0e", lr) << " epoch " << epoch
                  << " loss " << fmt("%.4f", log.train_loss) << " dev " << fmt("%.4f", log.dev_metric) << std::endl;
      }
      if (stopper.should_stop()) break;
    }
    run.best_dev = stopper.best();
    run.best_epoch = stopper.best_epoch();
    const bool usable = !run.epochs.empty();
    result.runs.push_back(run);
    if (!usable) continue;
    const bool better = !have_best || (is_mlm ? run.best_dev < result.runs[result.best_run].best_dev
                                              : run.best_dev > result.runs[result.best_run].best_dev);
    if (better) {
      have_best = true;
      result.best_run = result.runs.size() - 1;
      result.model = best_enc;
      if (is_mlm) {
        result.mlm_head = best_mlm;
      } else {
        result.rs_head = best_rs;
      }
    }
  }
  if (!have_best) throw Error("specialize: every learning rate diverged");
  return result;
}

#define DSTOD_INSTANTIATE(T)                                                                                   \
  template class MlmHead<T>;                                                                                   \
  template LossValue mlm_loss<T>(Encoder<T>&, MlmHead<T>&, const std::vector<nn::MaskedSequence>&, bool, Rng*, \
                                 double);                                                                      \
  template struct ScoringHead<T>;                                                                              \
  template class ScoreTape<T>;                                                                                 \
  template LossValue rs_class_loss<T>(Encoder<T>&, ScoringHead<T>&, const nn::TextCodec&,                      \
                                      const std::vector<RSInstance>&, bool, Rng*, double);                     \
  template LossValue rs_contrast_loss<T>(Encoder<T>&, ScoringHead<T>&, const nn::TextCodec&, const NCEGroup&,  \
                                         bool, Rng*, double);                                                  \
  template double clip_gradients<T>(const std::vector<ParameterStore<T>*>&, double);                           \
  template struct SpecializeResult<T>;                                                                         \
  template SpecializeResult<T> specialize<T>(const Encoder<T>&, const SpecializationData&, const nn::TextCodec&, \
                                             const Schedule&, ScoreMode, std::ostream*);
DSTOD_INSTANTIATE(float)
DSTOD_INSTANTIATE(double)
#undef DSTOD_INSTANTIATE

}  // namespace dstod
