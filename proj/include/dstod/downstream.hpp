#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dstod/adapters.hpp"
#include "dstod/dialog_data.hpp"
#include "dstod/objectives.hpp"
#include "json.hpp"

namespace dstod {

enum class Task { dst, rr };
std::string to_string(Task t);
Task parse_task(const std::string& s);

using SlotKey = Ontology::Key;
using TurnPrediction = std::map<SlotKey, std::string>;

/// Lowercased and trimmed; the form compared by joint goal accuracy.
std::string normalize_value(std::string_view value);

// -- DST ---------------------------------------------------------------------

/// For every (domain, slot): score(v) = pool(history) W e_v + q . e_v with
/// e_v = pool(value string). W starts as the identity, q at zero.
template <typename T>
class DstHead {
 public:
  DstHead() = default;
  DstHead(const Ontology& ontology, const std::vector<SlotKey>& slots, int hidden);

  const std::vector<SlotKey>& slots() const { return slots_; }
  /// Ontology values in ontology order, then "none".
  const std::vector<std::string>& candidates(std::size_t slot) const { return candidates_[slot]; }
  nn::ParameterStore<T>& params() { return params_; }
  const nn::ParameterStore<T>& params() const { return params_; }
  std::size_t bilinear(std::size_t slot) const { return 2 * slot; }
  std::size_t query(std::size_t slot) const { return 2 * slot + 1; }

  nlohmann::json to_json() const;  // slots and candidates, for checkpoints
  static DstHead from_json(const nlohmann::json& j, nn::ParameterStore<T> params);

 private:
  std::vector<SlotKey> slots_;
  std::vector<std::vector<std::string>> candidates_;
  nn::ParameterStore<T> params_;
};

struct DstTurn {
  std::string dialog_id;
  std::size_t turn = 0;
  std::vector<std::string> history;  // utterances 0..turn
  TurnPrediction gold;               // completed with "none"
};

/// One item per user turn of every annotated dialog.
std::vector<DstTurn> dst_turns(const std::vector<Dialog>& dialogs, const std::vector<SlotKey>& slots);

/// Mean over turns of the summed per-slot cross entropy against the gold
/// values (slots whose gold value is outside the ontology are skipped).
/// Accumulates gradients when `backward`; dropout is on when `dropout` is set.
template <typename T>
double dst_loss(Encoder<T>& model, DstHead<T>& head, const nn::TextCodec& codec, const std::vector<DstTurn>& batch,
                bool backward, Rng* dropout = nullptr);

/// Argmax per slot; ties go to the earliest candidate.
template <typename T>
TurnPrediction dst_forward(const Encoder<T>& model, const DstHead<T>& head, const nn::TextCodec& codec,
                           const std::vector<std::string>& history, const Ontology& ontology);

/// Fraction of turns whose every slot matches. Missing entries count as "none".
double joint_goal_accuracy(const std::vector<TurnPrediction>& predictions, const std::vector<TurnPrediction>& gold,
                           const std::vector<SlotKey>& slots);

template <typename T>
double evaluate_dst(const Encoder<T>& model, const DstHead<T>& head, const nn::TextCodec& codec,
                    const std::vector<DstTurn>& turns, std::vector<TurnPrediction>* predictions = nullptr);

// -- RR ----------------------------------------------------------------------

/// 1 + number of candidates scoring >= the gold (ties counted against it).
std::size_t rr_rank(const std::vector<double>& scores, std::size_t gold_index);
double recall_at_1(const std::vector<std::size_t>& ranks);

struct RrItem {
  std::string dialog_id;
  std::vector<std::string> history;  // utterances before the response
  std::string gold;
  std::vector<std::string> candidates;  // gold first, then distractors
  std::size_t gold_index = 0;
};

/// One item per system turn after the first utterance. With pool_size > 0,
/// distractors are distinct system responses of the same dialogs (seeded).
std::vector<RrItem> rr_items(const std::vector<Dialog>& dialogs, std::size_t pool_size, std::uint64_t seed);

template <typename T>
std::size_t rr_rank(const Encoder<T>& model, const ScoringHead<T>& head, const nn::TextCodec& codec,
                    const RrItem& item);

/// NCE per item over the batch's gold responses plus `negatives`
/// (duplicates merged), averaged over items.
template <typename T>
double rr_loss(Encoder<T>& model, ScoringHead<T>& head, const nn::TextCodec& codec, const std::vector<RrItem>& batch,
               const std::vector<std::string>& negatives, bool backward, Rng* dropout = nullptr);

/// Up to n distinct draws from `pool`.
std::vector<std::string> sample_negatives(const std::vector<std::string>& pool, std::size_t n, Rng& rng);

template <typename T>
double evaluate_rr(const Encoder<T>& model, const ScoringHead<T>& head, const nn::TextCodec& codec,
                   const std::vector<RrItem>& items, std::vector<std::size_t>* ranks = nullptr);

// -- reports -----------------------------------------------------------------

struct EvalReport {
  std::string task;
  std::vector<std::string> domains;
  std::string metric;  // "jga" or "R_<pool>@1"
  double value = 0.0;
  std::size_t n_items = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string label;  // free-form run label (fraction, variant, ...)

  void validate() const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  static std::string tsv_header();
  std::string tsv_row() const;
};

// -- fine-tuning -------------------------------------------------------------

struct FinetuneOptions {
  int epochs = 300;
  int batch = 0;  // 0: 6 for DST, 24 for RR
  double lr = 5e-5;
  int patience = 10;
  std::uint64_t seed = 1;
  std::size_t rr_pool = 20;
  std::size_t rr_negatives = 16;  // sampled negatives per RR batch, besides in-batch golds
  ScoreMode mode = ScoreMode::dual_encoder_dot;
  bool train_adapters = false;
  bool freeze_base = false;
  double clip_norm = 0.0;
  std::ostream* progress = nullptr;

  int batch_for(Task task) const { return batch > 0 ? batch : (task == Task::dst ? 6 : 24); }
  nlohmann::json to_json() const;
};

struct TaskData {
  std::set<std::string> domains;
  std::vector<Dialog> train, dev, test;
  Ontology ontology;

  std::vector<SlotKey> slots() const { return ontology.slots_for(domains); }
};

template <typename T>
struct FinetuneResult {
  Encoder<T> model;
  std::optional<DstHead<T>> dst_head;
  std::optional<ScoringHead<T>> rr_head;
  EvalReport report;       // test
  EvalReport dev_report;   // best dev
  std::vector<double> dev_history;
  int epochs_run = 0;
};

/// Trains base (unless freeze_base), heads and fusion logits; adapters only
/// with train_adapters. Early-stops on dev JGA / dev R@1 and reports on test.
template <typename T>
FinetuneResult<T> finetune(const Encoder<T>& model, Task task, const TaskData& data, const nn::TextCodec& codec,
                           const FinetuneOptions& options);

// -- experiment harnesses ----------------------------------------------------

inline const std::vector<double> kFewShotPercents = {5, 10, 20, 30, 50, 70, 100};

/// max(1, round(percent * n / 100)).
std::size_t few_shot_size(std::size_t n, double percent);

/// Seeded nested subset: the dialogs are ranked once by a seeded shuffle and
/// the first few_shot_size(...) are kept in their original order.
std::vector<Dialog> few_shot_subset(const std::vector<Dialog>& train, double percent, std::uint64_t seed);

template <typename T>
std::vector<EvalReport> few_shot_curve(const Encoder<T>& model, Task task, const TaskData& data,
                                       const nn::TextCodec& codec, const FinetuneOptions& options,
                                       const std::vector<double>& percents = kFewShotPercents);

struct TransferMatrix {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  std::vector<std::vector<double>> specialized;  // [source][target]
  std::vector<double> baseline;                  // [target]
  std::vector<std::vector<double>> delta;        // specialized - baseline

  nlohmann::json to_json() const;
  std::string tsv() const;
};

template <typename T>
TransferMatrix cross_domain_matrix(const std::map<std::string, Encoder<T>>& specialized, const Encoder<T>& baseline,
                                   const std::vector<std::string>& sources,
                                   const std::map<std::string, TaskData>& targets, Task task,
                                   const nn::TextCodec& codec, const FinetuneOptions& options);

enum class MultiDomainVariant { full_ft, stack, fuse };
std::string to_string(MultiDomainVariant v);
MultiDomainVariant parse_variant(const std::string& s);

inline const std::vector<std::vector<std::string>> kMultiDomainPresets = {
    {"hotel", "train"}, {"attraction", "train"}, {"hotel", "taxi", "restaurant"}};

/// Dialogs whose domain set intersects `domains`.
std::vector<Dialog> select_covering(const std::vector<Dialog>& dialogs, const std::set<std::string>& domains);

template <typename T>
struct MultiDomainInputs {
  const Encoder<T>* base = nullptr;
  std::map<std::string, std::vector<DialogTriple>> triples;  // full_ft corpora per domain
  std::map<std::string, AdapterBank<T>> banks;               // stack / fuse
  Schedule specialization;                                   // full_ft RS-Class schedule
};

/// full_ft: RS-Class specialization on the concatenated corpora, then
/// fine-tuning. stack / fuse: inject the domains' banks (in domain order),
/// then fine-tuning.
template <typename T>
FinetuneResult<T> multi_domain_run(const std::vector<std::string>& domains, MultiDomainVariant variant,
                                   const MultiDomainInputs<T>& inputs, Task task, const TaskData& data,
                                   const nn::TextCodec& codec, const FinetuneOptions& options);

}  // namespace dstod
