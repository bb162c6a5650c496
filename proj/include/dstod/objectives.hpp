#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dstod/corpus_builder.hpp"
#include "dstod/neural/encoder.hpp"
#include "dstod/neural/masking.hpp"
#include "dstod/neural/vocab.hpp"

namespace dstod {

using nn::Encoder;
using nn::Matrix;

struct LossValue {
  double loss = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;         // rs-class, threshold 0.5
  double mean_rank = 0.0;        // rs-contrast, rank of the true response
  double reciprocal_rank = 0.0;  // rs-contrast, mean of 1/rank
};

/// Loss of one item together with d(loss)/d(scores).
struct ScoreLoss {
  double loss = 0.0;
  std::vector<double> grad;
  std::size_t rank = 0;
};

/// -log softmax(scores)[true_index], evaluated with max subtraction. Rank is
/// 1 + number of other scores >= the true score.
ScoreLoss nce_loss(const std::vector<double>& scores, std::size_t true_index);

/// Binary cross-entropy of sigmoid(score) against label.
ScoreLoss bce_loss(double score, int label);

/// Cross-entropy of softmax(logits) against `label`.
ScoreLoss softmax_cross_entropy(const std::vector<double>& logits, std::size_t label);

/// Prediction head for masked tokens: dense + GELU + layer norm, then logits
/// through the encoder's token embedding plus an output bias.
template <typename T>
class MlmHead {
 public:
  MlmHead() = default;
  MlmHead(const nn::EncoderConfig& config, std::uint64_t seed);

  nn::ParameterStore<T>& params() { return params_; }
  const nn::ParameterStore<T>& params() const { return params_; }

 private:
  nn::ParameterStore<T> params_;
};

/// Mean cross-entropy over selected positions. With `backward`, gradients of
/// loss * grad_scale are accumulated into encoder and head.
template <typename T>
LossValue mlm_loss(Encoder<T>& enc, MlmHead<T>& head, const std::vector<nn::MaskedSequence>& batch, bool backward,
                   Rng* dropout = nullptr, double grad_scale = 1.0);

enum class ScoreMode { dual_encoder_dot, linear_on_cls };
std::string to_string(ScoreMode m);
ScoreMode parse_score_mode(const std::string& s);

/// f(c, r). Dual encoder: <pool(c), pool(r)>, no parameters. Linear: w . pool([c; r]) + b.
template <typename T>
struct ScoringHead {
  ScoreMode mode = ScoreMode::dual_encoder_dot;
  nn::ParameterStore<T> params;

  ScoringHead() = default;
  ScoringHead(ScoreMode mode, int hidden, std::uint64_t seed, const std::string& prefix = "rs");
};

/// Scores candidates for one context and keeps the traces needed to
/// backpropagate d(loss)/d(scores).
template <typename T>
class ScoreTape {
 public:
  std::vector<double> forward(const Encoder<T>& enc, const ScoringHead<T>& head, const nn::TextCodec& codec,
                              const std::string& context, const std::vector<std::string>& candidates,
                              Rng* dropout = nullptr);
  void backward(Encoder<T>& enc, ScoringHead<T>& head, const std::vector<double>& d_scores);

 private:
  ScoreMode mode_ = ScoreMode::dual_encoder_dot;
  nn::EncoderTrace<T> context_;
  std::vector<nn::EncoderTrace<T>> candidates_;
};

/// Mean BCE over instances (label 1 for positives, 0 for both negative kinds).
template <typename T>
LossValue rs_class_loss(Encoder<T>& enc, ScoringHead<T>& head, const nn::TextCodec& codec,
                        const std::vector<RSInstance>& instances, bool backward, Rng* dropout = nullptr,
                        double grad_scale = 1.0);

/// NCE over one group; LossValue carries the rank of the true response.
template <typename T>
LossValue rs_contrast_loss(Encoder<T>& enc, ScoringHead<T>& head, const nn::TextCodec& codec, const NCEGroup& group,
                           bool backward, Rng* dropout = nullptr, double grad_scale = 1.0);

/// Counted non-improvement early stopping.
class EarlyStopper {
 public:
  EarlyStopper(int patience, bool higher_is_better) : patience_(patience), higher_(higher_is_better) {}

  /// Records a dev metric; returns true if it improved on the best so far.
  bool update(double metric);
  bool should_stop() const { return bad_ >= patience_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int epochs() const { return epochs_; }

 private:
  int patience_;
  bool higher_;
  double best_ = 0.0;
  int best_epoch_ = 0;
  int epochs_ = 0;
  int bad_ = 0;
};

enum class Objective { mlm, rs_class, rs_contrast };
std::string to_string(Objective o);
Objective parse_objective(const std::string& s);

inline const std::vector<double> kLrGrid = {1e-4, 5e-5, 1e-5, 1e-6};

struct Schedule {
  int epochs = 30;
  int batch = 32;
  std::vector<double> lrs = {1e-4};  // kLrGrid for a grid search
  int patience = 3;
  double dev_fraction = 0.05;
  double mask_prob = 0.15;
  std::uint64_t seed = 1;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

/// Train/dev material for one objective.
struct SpecializationData {
  Objective objective = Objective::mlm;
  std::vector<std::string> mlm_train, mlm_dev;
  std::vector<RSInstance> cls_train, cls_dev;
  std::vector<NCEGroup> nce_train, nce_dev;

  std::size_t train_size() const;
  std::size_t dev_size() const;
};

/// Seeded split; dev gets round(dev_fraction * n) items, at least 1.
template <typename Item>
std::pair<std::vector<Item>, std::vector<Item>> split_train_dev(const std::vector<Item>& items, double dev_fraction,
                                                                std::uint64_t seed);

SpecializationData prepare_mlm(const std::vector<CorpusLine>& corpus, const Schedule& schedule);
/// Triples are split first, then negatives are sampled within each part.
SpecializationData prepare_rs(Objective objective, const std::vector<DialogTriple>& triples, const Schedule& schedule);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_metric = 0.0;
  bool improved = false;
};

struct RunLog {
  double lr = 0.0;
  std::vector<EpochLog> epochs;
  bool diverged = false;
  std::string note;
  double best_dev = 0.0;
  int best_epoch = 0;
};

template <typename T>
struct SpecializeResult {
  Encoder<T> model;
  std::optional<MlmHead<T>> mlm_head;
  std::optional<ScoringHead<T>> rs_head;
  std::vector<RunLog> runs;
  std::size_t best_run = 0;

  /// Deterministic text rendering of every run.
  std::string log_text() const;
};

/// Trains whatever is trainable in `model` (freeze flags decide between full
/// and adapter specialization). One run per learning rate; the best dev run
/// wins (lowest dev loss for MLM, highest dev MRR for RS).
template <typename T>
SpecializeResult<T> specialize(const Encoder<T>& model, const SpecializationData& data, const nn::TextCodec& codec,
                               const Schedule& schedule, ScoreMode mode = ScoreMode::dual_encoder_dot,
                               std::ostream* progress = nullptr);

/// Scales all trainable gradients so their global L2 norm is at most max_norm.
template <typename T>
double clip_gradients(const std::vector<nn::ParameterStore<T>*>& stores, double max_norm);

}  // namespace dstod
