#include "dstod/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "dstod/digest.hpp"
#include "dstod/error.hpp"
#include "dstod/neural/adam.hpp"
#include "dstod/rng.hpp"
#include "dstod/text.hpp"

namespace dstod {

using nn::EncoderTrace;
using nn::ParameterStore;

std::string to_string(Task t) { return t == Task::dst ? "dst" : "rr"; }

Task parse_task(const std::string& s) {
  if (s == "dst") return Task::dst;
  if (s == "rr") return Task::rr;
  throw ValidationError("unknown task '" + s + "' (expected dst or rr)");
}

std::string to_string(MultiDomainVariant v) {
  switch (v) {
    case MultiDomainVariant::full_ft: return "full-ft";
    case MultiDomainVariant::stack: return "stack";
    case MultiDomainVariant::fuse: return "fuse";
  }
  return "?";
}

MultiDomainVariant parse_variant(const std::string& s) {
  if (s == "full-ft") return MultiDomainVariant::full_ft;
  if (s == "stack") return MultiDomainVariant::stack;
  if (s == "fuse") return MultiDomainVariant::fuse;
  throw ValidationError("unknown multi-domain variant '" + s + "' (expected full-ft, stack or fuse)");
}

std::string normalize_value(std::string_view value) {
  std::size_t b = 0, e = value.size();
  while (b < e && std::isspace(static_cast<unsigned char>(value[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(value[e - 1]))) --e;
  std::string out(value.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

namespace {

template <typename T>
double dot(const Matrix<T>& a, const Matrix<T>& b) {
  return static_cast<double>((a.array() * b.array()).sum());
}

std::string slot_name(const SlotKey& k) { return k.first + "." + k.second; }

}  // namespace

// -- DST head ----------------------------------------------------------------

template <typename T>
DstHead<T>::DstHead(const Ontology& ontology, const std::vector<SlotKey>& slots, int hidden) : slots_(slots) {
  if (slots.empty()) throw ValidationError("dst head: no slots");
  for (const auto& k : slots_) {
    if (!ontology.contains(k.first, k.second)) throw ValidationError("dst head: slot " + slot_name(k) + " not in ontology");
    auto cands = ontology.values(k.first, k.second);
    cands.push_back(Ontology::kNone);
    candidates_.push_back(std::move(cands));
    auto w = params_.add("dst." + slot_name(k) + ".W", hidden, hidden);
    params_[w].value.setIdentity();
    params_.add("dst." + slot_name(k) + ".query", 1, hidden);
  }
}

template <typename T>
nlohmann::json DstHead<T>::to_json() const {
  auto arr = nlohmann::json::array();
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    arr.push_back({{"domain", slots_[i].first}, {"slot", slots_[i].second}, {"candidates", candidates_[i]}});
  }
  return arr;
}

template <typename T>
DstHead<T> DstHead<T>::from_json(const nlohmann::json& j, ParameterStore<T> params) {
  DstHead head;
  for (const auto& s : j) {
    SlotKey k{s.at("domain").get<std::string>(), s.at("slot").get<std::string>()};
    head.slots_.push_back(k);
    head.candidates_.push_back(s.at("candidates").get<std::vector<std::string>>());
    if (!params.find("dst." + slot_name(k) + ".W") || !params.find("dst." + slot_name(k) + ".query"))
      throw ValidationError("dst head: missing tensors for slot " + slot_name(k));
  }
  // reorder to the W/query layout the index helpers expect
  for (const auto& k : head.slots_) {
    for (const char* part : {".W", ".query"}) {
      const auto& src = params.at("dst." + slot_name(k) + part);
      auto i = head.params_.add(src.name, src.value.rows(), src.value.cols());
      head.params_[i].value = src.value;
      head.params_[i].frozen = src.frozen;
    }
  }
  return head;
}

std::vector<DstTurn> dst_turns(const std::vector<Dialog>& dialogs, const std::vector<SlotKey>& slots) {
  std::vector<DstTurn> out;
  for (const auto& d : dialogs) {
    if (!d.states) throw ValidationError("dialog " + d.id + " has no state annotation");
    std::vector<std::string> history;
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      history.push_back(d.turns[t].text);
      if (d.turns[t].speaker != Speaker::user) continue;
      DstTurn turn{d.id, t, history, {}};
      for (const auto& k : slots) turn.gold[k] = Ontology::kNone;
      for (const auto& sv : (*d.states)[t]) {
        SlotKey k{sv.domain, sv.slot};
        if (turn.gold.count(k)) turn.gold[k] = sv.value;
      }
      out.push_back(std::move(turn));
    }
  }
  return out;
}

double joint_goal_accuracy(const std::vector<TurnPrediction>& predictions, const std::vector<TurnPrediction>& gold,
                           const std::vector<SlotKey>& slots) {
  if (predictions.size() != gold.size())
    throw ValidationError("joint goal accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(gold.size()) + " gold turns");
  if (gold.empty()) return 0.0;
  auto get = [](const TurnPrediction& p, const SlotKey& k) {
    auto it = p.find(k);
    return it == p.end() ? std::string(Ontology::kNone) : normalize_value(it->second);
  };
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    bool ok = true;
    for (const auto& k : slots) {
      if (get(predictions[i], k) != get(gold[i], k)) {
        ok = false;
        break;
      }
    }
    hits += ok;
  }
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

namespace {

/// Pooled encodings of every distinct candidate string of a head.
template <typename T>
struct ValueTable {
  std::vector<std::string> texts;
  std::vector<std::vector<std::size_t>> slot_rows;  // per slot, row per candidate
  std::vector<EncoderTrace<T>> traces;
  Matrix<T> pooled;

  ValueTable(const DstHead<T>& head) {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t s = 0; s < head.slots().size(); ++s) {
      std::vector<std::size_t> rows;
      for (const auto& c : head.candidates(s)) {
        auto [it, fresh] = index.emplace(c, texts.size());
        if (fresh) texts.push_back(c);
        rows.push_back(it->second);
      }
      slot_rows.push_back(std::move(rows));
    }
  }

  void encode(const Encoder<T>& enc, const nn::TextCodec& codec, Rng* dropout, bool keep_traces) {
    const bool train = dropout != nullptr;
    traces.clear();
    pooled.resize(static_cast<Eigen::Index>(texts.size()), enc.config().hidden);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      auto tr = enc.forward(codec.single(texts[i]), train, dropout);
      pooled.row(static_cast<Eigen::Index>(i)) = tr.pooled;
      if (keep_traces) traces.push_back(std::move(tr));
    }
  }

  Matrix<T> slot_matrix(std::size_t s) const {
    Matrix<T> e(static_cast<Eigen::Index>(slot_rows[s].size()), pooled.cols());
    for (std::size_t i = 0; i < slot_rows[s].size(); ++i)
      e.row(static_cast<Eigen::Index>(i)) = pooled.row(static_cast<Eigen::Index>(slot_rows[s][i]));
    return e;
  }
};

template <typename T>
Matrix<T> slot_scores(const DstHead<T>& head, std::size_t s, const Matrix<T>& pooled, const Matrix<T>& values) {
  Matrix<T> u = pooled * head.params()[head.bilinear(s)].value + head.params()[head.query(s)].value;
  return u * values.transpose();
}

template <typename T>
std::size_t argmax_first(const Matrix<T>& row) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < row.cols(); ++i) {
    if (row(0, i) > row(0, static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
  }
  return best;
}

template <typename T>
TurnPrediction predict_turn(const Encoder<T>& model, const DstHead<T>& head, const nn::TextCodec& codec,
                            const ValueTable<T>& table, const std::vector<std::string>& history) {
  auto tr = model.forward(codec.history(history));
  TurnPrediction pred;
  for (std::size_t s = 0; s < head.slots().size(); ++s) {
    auto scores = slot_scores(head, s, tr.pooled, table.slot_matrix(s));
    pred[head.slots()[s]] = head.candidates(s)[argmax_first(scores)];
  }
  return pred;
}

template <typename T>
double dst_batch_loss(Encoder<T>& enc, DstHead<T>& head, const nn::TextCodec& codec,
                      const std::vector<const DstTurn*>& batch, bool backward, Rng* dropout) {
  if (batch.empty()) return 0.0;
  ValueTable<T> table(head);
  table.encode(enc, codec, dropout, backward);
  const double scale = 1.0 / static_cast<double>(batch.size());
  Matrix<T> d_values = Matrix<T>::Zero(table.pooled.rows(), table.pooled.cols());
  double total = 0.0;
  for (const auto* turn : batch) {
    auto tr = enc.forward(codec.history(turn->history), dropout != nullptr, dropout);
    Matrix<T> d_pooled = Matrix<T>::Zero(1, tr.pooled.cols());
    for (std::size_t s = 0; s < head.slots().size(); ++s) {
      const auto& gold = turn->gold.at(head.slots()[s]);
      const auto& cands = head.candidates(s);
      std::size_t g = cands.size();
      for (std::size_t c = 0; c < cands.size(); ++c) {
        if (normalize_value(cands[c]) == normalize_value(gold)) {
          g = c;
          break;
        }
      }
      if (g == cands.size()) continue;  // value outside the ontology: no target
      const auto values = table.slot_matrix(s);
      auto& W = head.params()[head.bilinear(s)];
      auto& q = head.params()[head.query(s)];
      Matrix<T> u = tr.pooled * W.value + q.value;
      Matrix<T> scores = u * values.transpose();
      std::vector<double> logits(static_cast<std::size_t>(scores.cols()));
      for (std::size_t c = 0; c < logits.size(); ++c) logits[c] = static_cast<double>(scores(0, static_cast<Eigen::Index>(c)));
      auto sl = softmax_cross_entropy(logits, g);
      total += sl.loss;
      if (!backward) continue;
      Matrix<T> ds(1, scores.cols());
      for (std::size_t c = 0; c < logits.size(); ++c) ds(0, static_cast<Eigen::Index>(c)) = static_cast<T>(sl.grad[c] * scale);
      Matrix<T> du = ds * values;  // 1 x h
      Matrix<T> d_vals = ds.transpose() * u;  // k x h
      for (std::size_t c = 0; c < table.slot_rows[s].size(); ++c)
        d_values.row(static_cast<Eigen::Index>(table.slot_rows[s][c])) += d_vals.row(static_cast<Eigen::Index>(c));
      if (!W.frozen) W.grad += tr.pooled.transpose() * du;
      if (!q.frozen) q.grad += du;
      d_pooled += du * W.value.transpose();
    }
    if (backward) enc.backward(tr, {}, d_pooled);
  }
  for (std::size_t i = 0; i < table.traces.size(); ++i) {
    Matrix<T> d = d_values.row(static_cast<Eigen::Index>(i));
    if (d.isZero(0)) continue;
    enc.backward(table.traces[i], {}, d);
  }
  return total * scale;
}

}  // namespace

template <typename T>
double dst_loss(Encoder<T>& model, DstHead<T>& head, const nn::TextCodec& codec, const std::vector<DstTurn>& batch,
                bool backward, Rng* dropout) {
  std::vector<const DstTurn*> ptrs;
  for (const auto& t : batch) ptrs.push_back(&t);
  return dst_batch_loss(model, head, codec, ptrs, backward, dropout);
}

template <typename T>
TurnPrediction dst_forward(const Encoder<T>& model, const DstHead<T>& head, const nn::TextCodec& codec,
                           const std::vector<std::string>& history, const Ontology& ontology) {
  for (std::size_t s = 0; s < head.slots().size(); ++s) {
    const auto& k = head.slots()[s];
    if (!ontology.contains(k.first, k.second)) throw ValidationError("dst: slot " + slot_name(k) + " not in ontology");
  }
  ValueTable<T> table(head);
  table.encode(model, codec, nullptr, false);
  return predict_turn(model, head, codec, table, history);
}

template <typename T>
double evaluate_dst(const Encoder<T>& model, const DstHead<T>& head, const nn::TextCodec& codec,
                    const std::vector<DstTurn>& turns, std::vector<TurnPrediction>* predictions) {
  ValueTable<T> table(head);
  table.encode(model, codec, nullptr, false);
  std::vector<TurnPrediction> preds, gold;
  preds.reserve(turns.size());
  for (const auto& t : turns) {
    preds.push_back(predict_turn(model, head, codec, table, t.history));
    gold.push_back(t.gold);
  }
  const double jga = joint_goal_accuracy(preds, gold, head.slots());
  if (predictions) *predictions = std::move(preds);
  return jga;
}

// -- RR ----------------------------------------------------------------------

std::size_t rr_rank(const std::vector<double>& scores, std::size_t gold_index) {
  if (gold_index >= scores.size()) throw ValidationError("rr rank: gold index outside the candidate list");
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != gold_index && scores[i] >= scores[gold_index]) ++rank;
  }
  return rank;
}

double recall_at_1(const std::vector<std::size_t>& ranks) {
  if (ranks.empty()) throw ValidationError("recall@1 of an empty ranking");
  return static_cast<double>(std::count(ranks.begin(), ranks.end(), std::size_t{1})) /
         static_cast<double>(ranks.size());
}

std::vector<RrItem> rr_items(const std::vector<Dialog>& dialogs, std::size_t pool_size, std::uint64_t seed) {
  std::vector<RrItem> items;
  std::vector<std::string> responses;
  std::set<std::string> seen;
  for (const auto& d : dialogs) {
    for (std::size_t t = 1; t < d.turns.size(); ++t) {
      if (d.turns[t].speaker != Speaker::system) continue;
      RrItem item;
      item.dialog_id = d.id;
      for (std::size_t i = 0; i < t; ++i) item.history.push_back(d.turns[i].text);
      item.gold = d.turns[t].text;
      if (seen.insert(item.gold).second) responses.push_back(item.gold);
      items.push_back(std::move(item));
    }
  }
  if (pool_size == 0) return items;
  if (responses.size() < pool_size)
    throw ValidationError("rr: " + std::to_string(responses.size()) + " distinct responses, pool of " +
                          std::to_string(pool_size) + " requested");
  Rng rng(mix_seed(seed, 0x7272));
  for (auto& item : items) {
    item.candidates = {item.gold};
    std::set<std::string> used{item.gold};
    while (item.candidates.size() < pool_size) {
      const auto& r = responses[uniform_index(rng, responses.size())];
      if (used.insert(r).second) item.candidates.push_back(r);
    }
    item.gold_index = 0;
  }
  return items;
}

namespace {

std::string join_history(const std::vector<std::string>& h) {
  std::string out;
  for (const auto& u : h) {
    if (!out.empty()) out += ' ';
    out += u;
  }
  return out;
}

template <typename T>
std::vector<double> rr_scores(const Encoder<T>& model, const ScoringHead<T>& head, const nn::TextCodec& codec,
                              const RrItem& item, std::unordered_map<std::string, Matrix<T>>* cache) {
  std::vector<double> scores;
  if (head.mode == ScoreMode::dual_encoder_dot) {
    auto ctx = model.forward(codec.history(item.history));
    for (const auto& c : item.candidates) {
      Matrix<T> pooled;
      if (cache) {
        auto it = cache->find(c);
        if (it == cache->end()) it = cache->emplace(c, model.forward(codec.single(c)).pooled).first;
        pooled = it->second;
      } else {
        pooled = model.forward(codec.single(c)).pooled;
      }
      scores.push_back(dot(ctx.pooled, pooled));
    }
  } else {
    ScoreTape<T> tape;
    scores = tape.forward(model, head, codec, join_history(item.history), item.candidates);
  }
  return scores;
}

}  // namespace

template <typename T>
std::size_t rr_rank(const Encoder<T>& model, const ScoringHead<T>& head, const nn::TextCodec& codec,
                    const RrItem& item) {
  if (item.candidates.empty()) throw ValidationError("rr: item without candidates");
  if (item.gold_index >= item.candidates.size() || item.candidates[item.gold_index] != item.gold)
    throw ValidationError("rr: gold response missing from the candidate list of dialog " + item.dialog_id);
  return rr_rank(rr_scores<T>(model, head, codec, item, nullptr), item.gold_index);
}

template <typename T>
double evaluate_rr(const Encoder<T>& model, const ScoringHead<T>& head, const nn::TextCodec& codec,
                   const std::vector<RrItem>& items, std::vector<std::size_t>* ranks) {
  std::unordered_map<std::string, Matrix<T>> cache;
  std::vector<std::size_t> out;
  out.reserve(items.size());
  for (const auto& item : items) {
    if (item.gold_index >= item.candidates.size() || item.candidates[item.gold_index] != item.gold)
      throw ValidationError("rr: gold response missing from the candidate list of dialog " + item.dialog_id);
    out.push_back(rr_rank(rr_scores(model, head, codec, item, &cache), item.gold_index));
  }
  const double r1 = recall_at_1(out);
  if (ranks) *ranks = std::move(out);
  return r1;
}

namespace {

template <typename T>
double rr_batch_loss(Encoder<T>& enc, ScoringHead<T>& head, const nn::TextCodec& codec,
                     const std::vector<const RrItem*>& batch, const std::vector<std::string>& negatives, bool backward,
                     Rng* dropout) {
  if (batch.empty()) return 0.0;
  std::vector<std::string> cands;
  std::unordered_map<std::string, std::size_t> where;
  auto add = [&](const std::string& s) {
    if (where.emplace(s, cands.size()).second) cands.push_back(s);
  };
  for (const auto* it : batch) add(it->gold);
  for (const auto& n : negatives) add(n);

  const bool train = dropout != nullptr;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  if (head.mode == ScoreMode::dual_encoder_dot) {
    std::vector<EncoderTrace<T>> ctx, resp;
    for (const auto* it : batch) ctx.push_back(enc.forward(codec.history(it->history), train, dropout));
    for (const auto& c : cands) resp.push_back(enc.forward(codec.single(c), train, dropout));
    std::vector<Matrix<T>> d_resp(resp.size(), Matrix<T>::Zero(1, enc.config().hidden));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::vector<double> scores;
      for (const auto& r : resp) scores.push_back(dot(ctx[i].pooled, r.pooled));
      auto sl = nce_loss(scores, where.at(batch[i]->gold));
      total += sl.loss;
      if (!backward) continue;
      Matrix<T> d_ctx = Matrix<T>::Zero(1, enc.config().hidden);
      for (std::size_t j = 0; j < resp.size(); ++j) {
        const T g = static_cast<T>(sl.grad[j] * scale);
        d_ctx += g * resp[j].pooled;
        d_resp[j] += g * ctx[i].pooled;
      }
      enc.backward(ctx[i], {}, d_ctx);
    }
    if (backward)
      for (std::size_t j = 0; j < resp.size(); ++j) enc.backward(resp[j], {}, d_resp[j]);
  } else {
    for (const auto* it : batch) {
      ScoreTape<T> tape;
      auto scores = tape.forward(enc, head, codec, join_history(it->history), cands, dropout);
      auto sl = nce_loss(scores, where.at(it->gold));
      total += sl.loss;
      if (!backward) continue;
      for (auto& g : sl.grad) g *= scale;
      tape.backward(enc, head, sl.grad);
    }
  }
  return total * scale;
}

std::string config_digest(Task task, const std::set<std::string>& domains, const FinetuneOptions& o,
                          const std::string& model_tag) {
  nlohmann::json j = o.to_json();
  j["task"] = to_string(task);
  j["domains"] = domains;
  j["model"] = model_tag;
  return sha256_hex(j.dump()).substr(0, 16);
}

template <typename T>
std::string model_tag(const Encoder<T>& m) {
  std::ostringstream os;
  os << m.config().to_json().dump() << '|' << static_cast<int>(m.adapters().compose) << '|';
  for (const auto& b : m.adapters().banks) os << b.name << ',';
  double sum = 0.0;
  for (const auto& p : m.params()) sum += static_cast<double>(p.value.sum());
  os << '|' << sum;
  return os.str();
}

}  // namespace

template <typename T>
double rr_loss(Encoder<T>& model, ScoringHead<T>& head, const nn::TextCodec& codec, const std::vector<RrItem>& batch,
               const std::vector<std::string>& negatives, bool backward, Rng* dropout) {
  std::vector<const RrItem*> ptrs;
  for (const auto& t : batch) ptrs.push_back(&t);
  return rr_batch_loss(model, head, codec, ptrs, negatives, backward, dropout);
}

std::vector<std::string> sample_negatives(const std::vector<std::string>& pool, std::size_t n, Rng& rng) {
  std::vector<std::string> out;
  if (pool.empty()) return out;
  std::set<std::string> used;
  for (std::size_t tries = 0; out.size() < std::min(n, pool.size()) && tries < 20 * (n + 1); ++tries) {
    const auto& r = pool[uniform_index(rng, pool.size())];
    if (used.insert(r).second) out.push_back(r);
  }
  return out;
}

// -- reports -----------------------------------------------------------------

void EvalReport::validate() const {
  if (task != "dst" && task != "rr") throw ValidationError("report: unknown task '" + task + "'");
  if (metric.empty()) throw ValidationError("report: empty metric");
  if (!std::isfinite(value) || value < 0.0 || value > 1.0) throw ValidationError("report: metric outside [0, 1]");
}

nlohmann::json EvalReport::to_json() const {
  return {{"task", task},   {"domains", domains},       {"metric", metric},
          {"value", value}, {"n_items", n_items},       {"seed", seed},
          {"config_digest", config_digest}, {"label", label}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.task = j.at("task").get<std::string>();
  r.domains = j.at("domains").get<std::vector<std::string>>();
  r.metric = j.at("metric").get<std::string>();
  r.value = j.at("value").get<double>();
  r.n_items = j.at("n_items").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.label = j.value("label", "");
  r.validate();
  return r;
}

std::string EvalReport::tsv_header() { return "task\tdomains\tlabel\tmetric\tvalue\tn_items\tseed\tconfig_digest"; }

std::string EvalReport::tsv_row() const {
  std::string doms;
  for (const auto& d : domains) doms += (doms.empty() ? "" : "+") + d;
  std::ostringstream os;
  os.precision(6);
  os << task << '\t' << doms << '\t' << (label.empty() ? "-" : label) << '\t' << metric << '\t' << std::fixed
     << value << '\t' << n_items << '\t' << seed << '\t' << config_digest;
  return os.str();
}

nlohmann::json FinetuneOptions::to_json() const {
  return {{"epochs", epochs},
          {"batch", batch},
          {"lr", lr},
          {"patience", patience},
          {"seed", seed},
          {"rr_pool", rr_pool},
          {"rr_negatives", rr_negatives},
          {"mode", dstod::to_string(mode)},
          {"train_adapters", train_adapters},
          {"freeze_base", freeze_base},
          {"clip_norm", clip_norm}};
}

// -- fine-tuning -------------------------------------------------------------

template <typename T>
FinetuneResult<T> finetune(const Encoder<T>& model, Task task, const TaskData& data, const nn::TextCodec& codec,
                           const FinetuneOptions& o) {
  if (o.epochs < 1 || o.patience < 1 || o.lr <= 0.0) throw ValidationError("finetune: invalid options");
  if (data.train.empty() || data.dev.empty() || data.test.empty())
    throw ValidationError("finetune: empty train, dev or test split");
  const auto B = static_cast<std::size_t>(o.batch_for(task));
  const int h = model.config().hidden;

  FinetuneResult<T> res{model, std::nullopt, std::nullopt, {}, {}, {}, 0};
  Encoder<T>& enc = res.model;
  for (auto& p : enc.params()) {
    if (is_adapter_tensor(p.name)) {
      p.frozen = !o.train_adapters;
    } else if (is_fusion_tensor(p.name)) {
      p.frozen = false;
    } else {
      p.frozen = o.freeze_base;
    }
  }

  std::vector<SlotKey> slots;
  std::vector<DstTurn> dst_train, dst_dev, dst_test;
  std::vector<RrItem> rr_train, rr_dev, rr_test;
  std::vector<std::string> response_pool;
  DstHead<T> dst_head;
  ScoringHead<T> rr_head;
  if (task == Task::dst) {
    slots = data.slots();
    if (slots.empty()) throw ValidationError("finetune: ontology has no slots for the selected domains");
    dst_train = dst_turns(data.train, slots);
    dst_dev = dst_turns(data.dev, slots);
    dst_test = dst_turns(data.test, slots);
    dst_head = DstHead<T>(data.ontology, slots, h);
  } else {
    rr_train = rr_items(data.train, 0, o.seed);
    rr_dev = rr_items(data.dev, o.rr_pool, mix_seed(o.seed, 1));
    rr_test = rr_items(data.test, o.rr_pool, mix_seed(o.seed, 2));
    std::set<std::string> seen;
    for (const auto& it : rr_train)
      if (seen.insert(it.gold).second) response_pool.push_back(it.gold);
    rr_head = ScoringHead<T>(o.mode, h, mix_seed(o.seed, 3), "rr");
  }
  const std::size_t n_train = task == Task::dst ? dst_train.size() : rr_train.size();
  if (n_train == 0) throw ValidationError("finetune: no training items");

  std::vector<ParameterStore<T>*> stores{&enc.params(), task == Task::dst ? &dst_head.params() : &rr_head.params};
  nn::Adam<T> adam(o.lr);
  EarlyStopper stopper(o.patience, true);
  Encoder<T> best_enc = enc;
  DstHead<T> best_dst = dst_head;
  ScoringHead<T> best_rr = rr_head;
  auto dev_metric = [&]() {
    return task == Task::dst ? evaluate_dst(enc, dst_head, codec, dst_dev) : evaluate_rr(enc, rr_head, codec, rr_dev);
  };

  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= o.epochs; ++epoch) {
    const auto es = mix_seed(o.seed, 5000 + static_cast<std::uint64_t>(epoch));
    Rng shuffle_rng(mix_seed(es, 1)), drop(mix_seed(es, 2)), neg(mix_seed(es, 3));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t s = 0; s < n_train; s += B) {
      for (auto* st : stores) st->zero_grad();
      double loss;
      if (task == Task::dst) {
        std::vector<const DstTurn*> batch;
        for (std::size_t i = s; i < std::min(n_train, s + B); ++i) batch.push_back(&dst_train[order[i]]);
        loss = dst_batch_loss(enc, dst_head, codec, batch, true, &drop);
      } else {
        std::vector<const RrItem*> batch;
        for (std::size_t i = s; i < std::min(n_train, s + B); ++i) batch.push_back(&rr_train[order[i]]);
        loss = rr_batch_loss(enc, rr_head, codec, batch, sample_negatives(response_pool, o.rr_negatives, neg), true, &drop);
      }
      if (!std::isfinite(loss)) throw Error("finetune: non-finite training loss in epoch " + std::to_string(epoch));
      if (o.clip_norm > 0.0) clip_gradients(stores, o.clip_norm);
      adam.step(stores);
      loss_sum += loss;
      ++n_batches;
    }
    const double dev = dev_metric();
    res.dev_history.push_back(dev);
    res.epochs_run = epoch;
    const bool improved = stopper.update(dev);
    if (improved) {
      best_enc = enc;
      best_dst = dst_head;
      best_rr = rr_head;
    }
    if (o.progress) {
      *o.progress << to_string(task) << " epoch " << epoch << " loss " << loss_sum / static_cast<double>(n_batches)
                  << " dev " << dev << (improved ? " *" : "") << '\n';
    }
    if (stopper.should_stop()) break;
  }

  enc = std::move(best_enc);
  std::vector<std::string> doms(data.domains.begin(), data.domains.end());
  const auto digest = config_digest(task, data.domains, o, model_tag(model));
  auto make = [&](double v, std::size_t n) {
    EvalReport r;
    r.task = to_string(task);
    r.domains = doms;
    r.metric = task == Task::dst ? "jga" : "R_" + std::to_string(o.rr_pool) + "@1";
    r.value = v;
    r.n_items = n;
    r.seed = o.seed;
    r.config_digest = digest;
    return r;
  };
  if (task == Task::dst) {
    res.dst_head = std::move(best_dst);
    res.report = make(evaluate_dst(enc, *res.dst_head, codec, dst_test), dst_test.size());
    res.dev_report = make(stopper.best(), dst_dev.size());
  } else {
    res.rr_head = std::move(best_rr);
    res.report = make(evaluate_rr(enc, *res.rr_head, codec, rr_test), rr_test.size());
    res.dev_report = make(stopper.best(), rr_dev.size());
  }
  res.dev_report.label = "dev";
  return res;
}

// -- experiment harnesses ----------------------------------------------------

std::size_t few_shot_size(std::size_t n, double percent) {
  if (!(percent > 0.0) || percent > 100.0) throw ValidationError("few-shot percentage must be in (0, 100]");
  if (n == 0) throw ValidationError("few-shot: empty training set");
  const auto k = static_cast<std::size_t>(std::lround(percent * static_cast<double>(n) / 100.0));
  return std::clamp<std::size_t>(k, 1, n);
}

std::vector<Dialog> few_shot_subset(const std::vector<Dialog>& train, double percent, std::uint64_t seed) {
  const auto k = few_shot_size(train.size(), percent);
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0x66657773));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::vector<Dialog> out;
  out.reserve(k);
  for (auto i : idx) out.push_back(train[i]);
  return out;
}

template <typename T>
std::vector<EvalReport> few_shot_curve(const Encoder<T>& model, Task task, const TaskData& data,
                                       const nn::TextCodec& codec, const FinetuneOptions& options,
                                       const std::vector<double>& percents) {
  std::vector<EvalReport> out;
  for (double p : percents) {
    TaskData sub = data;
    sub.train = few_shot_subset(data.train, p, options.seed);
    auto r = finetune(model, task, sub, codec, options).report;
    std::ostringstream label;
    label << p << "%:" << sub.train.size();
    r.label = label.str();
    out.push_back(std::move(r));
  }
  return out;
}

nlohmann::json TransferMatrix::to_json() const {
  return {{"sources", sources}, {"targets", targets}, {"specialized", specialized}, {"baseline", baseline},
          {"delta", delta}};
}

std::string TransferMatrix::tsv() const {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed << "source\\target";
  for (const auto& t : targets) os << '\t' << t;
  os << '\n';
  for (std::size_t s = 0; s < sources.size(); ++s) {
    os << sources[s];
    for (std::size_t t = 0; t < targets.size(); ++t) os << '\t' << delta[s][t];
    os << '\n';
  }
  return os.str();
}

template <typename T>
TransferMatrix cross_domain_matrix(const std::map<std::string, Encoder<T>>& specialized, const Encoder<T>& baseline,
                                   const std::vector<std::string>& sources,
                                   const std::map<std::string, TaskData>& targets, Task task,
                                   const nn::TextCodec& codec, const FinetuneOptions& options) {
  std::vector<std::string> missing;
  for (const auto& s : sources)
    if (!specialized.count(s)) missing.push_back(s);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ValidationError("cross-domain: missing specialized checkpoints for: " + list);
  }
  TransferMatrix m;
  m.sources = sources;
  for (const auto& [name, _] : targets) m.targets.push_back(name);
  for (const auto& t : m.targets) m.baseline.push_back(finetune(baseline, task, targets.at(t), codec, options).report.value);
  for (const auto& s : sources) {
    std::vector<double> row, drow;
    for (std::size_t ti = 0; ti < m.targets.size(); ++ti) {
      const double v = finetune(specialized.at(s), task, targets.at(m.targets[ti]), codec, options).report.value;
      row.push_back(v);
      drow.push_back(v - m.baseline[ti]);
    }
    m.specialized.push_back(std::move(row));
    m.delta.push_back(std::move(drow));
  }
  return m;
}

std::vector<Dialog> select_covering(const std::vector<Dialog>& dialogs, const std::set<std::string>& domains) {
  std::vector<Dialog> out;
  for (const auto& d : dialogs) {
    if (std::any_of(d.domains.begin(), d.domains.end(), [&](const auto& x) { return domains.count(x) > 0; }))
      out.push_back(d);
  }
  return out;
}

template <typename T>
FinetuneResult<T> multi_domain_run(const std::vector<std::string>& domains, MultiDomainVariant variant,
                                   const MultiDomainInputs<T>& in, Task task, const TaskData& data,
                                   const nn::TextCodec& codec, const FinetuneOptions& options) {
  if (in.base == nullptr) throw ValidationError("multi-domain: no base model");
  if (domains.size() < 2) throw ValidationError("multi-domain: need at least two domains");
  Encoder<T> model = *in.base;
  if (variant == MultiDomainVariant::full_ft) {
    std::vector<DialogTriple> all;
    for (const auto& d : domains) {
      auto it = in.triples.find(d);
      if (it == in.triples.end()) throw ValidationError("multi-domain: no corpus for domain '" + d + "'");
      all.insert(all.end(), it->second.begin(), it->second.end());
    }
    auto spec = prepare_rs(Objective::rs_class, all, in.specialization);
    model = specialize(*in.base, spec, codec, in.specialization, options.mode, options.progress).model;
  } else {
    std::vector<AdapterBank<T>> banks;
    for (const auto& d : domains) {
      auto it = in.banks.find(d);
      if (it == in.banks.end()) throw ValidationError("multi-domain: no adapter bank for domain '" + d + "'");
      banks.push_back(it->second);
    }
    model = inject(*in.base, banks, variant == MultiDomainVariant::stack ? nn::Compose::stack : nn::Compose::fuse);
  }
  TaskData sub = data;
  sub.domains = std::set<std::string>(domains.begin(), domains.end());
  sub.train = select_covering(data.train, sub.domains);
  sub.dev = select_covering(data.dev, sub.domains);
  sub.test = select_covering(data.test, sub.domains);
  auto res = finetune(model, task, sub, codec, options);
  res.report.label = to_string(variant);
  return res;
}

#define DSTOD_INSTANTIATE(T)                                                                                        \
  template class DstHead<T>;                                                                                        \
  template double dst_loss<T>(Encoder<T>&, DstHead<T>&, const nn::TextCodec&, const std::vector<DstTurn>&, bool,  \
                              Rng*);                                                                            \
  template double rr_loss<T>(Encoder<T>&, ScoringHead<T>&, const nn::TextCodec&, const std::vector<RrItem>&,      \
                             const std::vector<std::string>&, bool, Rng*);                                      \
  template TurnPrediction dst_forward<T>(const Encoder<T>&, const DstHead<T>&, const nn::TextCodec&,               \
                                         const std::vector<std::string>&, const Ontology&);                        \
  template double evaluate_dst<T>(const Encoder<T>&, const DstHead<T>&, const nn::TextCodec&,                      \
                                  const std::vector<DstTurn>&, std::vector<TurnPrediction>*);                      \
  template std::size_t rr_rank<T>(const Encoder<T>&, const ScoringHead<T>&, const nn::TextCodec&, const RrItem&);  \
  template double evaluate_rr<T>(const Encoder<T>&, const ScoringHead<T>&, const nn::TextCodec&,                   \
                                 const std::vector<RrItem>&, std::vector<std::size_t>*);                           \
  template FinetuneResult<T> finetune<T>(const Encoder<T>&, Task, const TaskData&, const nn::TextCodec&,           \
                                         const FinetuneOptions&);                                                  \
  template std::vector<EvalReport> few_shot_curve<T>(const Encoder<T>&, Task, const TaskData&,                     \
                                                     const nn::TextCodec&, const FinetuneOptions&,                 \
                                                     const std::vector<double>&);                                  \
  template TransferMatrix cross_domain_matrix<T>(const std::map<std::string, Encoder<T>>&, const Encoder<T>&,      \
                                                 const std::vector<std::string>&,                                  \
                                                 const std::map<std::string, TaskData>&, Task,                     \
                                                 const nn::TextCodec&, const FinetuneOptions&);                    \
  template FinetuneResult<T> multi_domain_run<T>(const std::vector<std::string>&, MultiDomainVariant,              \
                                                 const MultiDomainInputs<T>&, Task, const TaskData&,               \
                                                 const nn::TextCodec&, const FinetuneOptions&);
DSTOD_INSTANTIATE(float)
DSTOD_INSTANTIATE(double)
#undef DSTOD_INSTANTIATE

}  // namespace dstod
