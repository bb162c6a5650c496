#include "dstod/grad_suite.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include "dstod/adapters.hpp"
#include "dstod/downstream.hpp"
#include "dstod/error.hpp"
#include "dstod/neural/masking.hpp"
#include "dstod/objectives.hpp"

namespace dstod {

namespace {

const std::vector<std::string> kLines = {
    "i need a taxi to the station",        "the taxi leaves at five",
    "a cheap hotel near the centre",       "free parking and wifi",
    "book it for two nights please",       "your cab is a red car",
    "to the airport at six",               "the hotel is expensive",
};

template <typename Store>
void jitter(Store& store, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& p : store)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += nd(rng);
}

}  // namespace

bool GradSuiteReport::passed() const {
  return !group_passed.empty() &&
         std::all_of(group_passed.begin(), group_passed.end(), [](const auto& kv) { return kv.second; });
}

nlohmann::json GradSuiteReport::to_json() const {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [g, ok] : group_passed) groups[g] = {{"passed", ok}, {"max_rel_error", max_rel_error.at(g)}};
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& r : rows) {
    tensors.push_back({{"group", r.group},
                       {"tensor", r.tensor},
                       {"frozen", r.frozen},
                       {"checked", r.checked},
                       {"rel_error", r.rel_error},
                       {"max_abs_error", r.max_abs_error},
                       {"passed", r.passed}});
  }
  return {{"passed", passed()}, {"seconds", seconds}, {"groups", groups}, {"tensors", tensors}};
}

GradSuiteReport run_grad_suite(const GradSuiteOptions& o) {
  if (o.layers < 1 || o.hidden < 4 || o.hidden % 4 != 0 || o.bottleneck < 1)
    throw ValidationError("grad-check: need layers >= 1, hidden a multiple of 4, bottleneck >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const auto vocab = nn::Vocab::build(kLines, 1);
  const nn::TextCodec codec{&vocab, 24, 12};
  nn::EncoderConfig cfg;
  cfg.layers = o.layers;
  cfg.hidden = o.hidden;
  cfg.heads = 4;
  cfg.ffn = 2 * o.hidden;
  cfg.max_len = 24;
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.dropout = 0.0;
  cfg.init_std = 0.3;
  const auto seed = o.check.seed;

  GradSuiteReport rep;
  auto record = [&](const std::string& group, const std::vector<nn::GradCheckRow>& rows) {
    bool ok = true;
    double worst = rep.max_rel_error.count(group) ? rep.max_rel_error[group] : 0.0;
    for (const auto& r : rows) {
      ok = ok && r.passed;
      if (!r.frozen) worst = std::max(worst, r.rel_error);
      rep.rows.push_back(r);
    }
    rep.max_rel_error[group] = worst;
    rep.group_passed[group] = (rep.group_passed.count(group) ? rep.group_passed[group] : true) && ok;
  };
  auto check = [&](const std::string& group, const std::vector<nn::ParameterStore<double>*>& stores,
                   const std::function<double(bool)>& loss) { record(group, nn::check_gradients(group, stores, loss, o.check)); };

  {
    Encoder<double> enc(cfg, mix_seed(seed, 1));
    const auto seq = codec.pair(kLines[0], kLines[1]);
    Matrix<double> w = Matrix<double>::Zero(static_cast<Eigen::Index>(seq.ids.size()), o.hidden);
    Rng rng(mix_seed(seed, 2));
    std::normal_distribution<double> nd;
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = nd(rng);
    Matrix<double> wp = Matrix<double>::Ones(1, o.hidden);
    check("encoder", {&enc.params()}, [&](bool grad) {
      auto tr = enc.forward(seq);
      if (grad) enc.backward(tr, w, wp);
      return tr.hidden.cwiseProduct(w).sum() + tr.pooled.sum();
    });
  }
  {
    Encoder<double> enc(cfg, mix_seed(seed, 3));
    MlmHead<double> head(cfg, mix_seed(seed, 4));
    jitter(head.params(), mix_seed(seed, 5), 0.2);
    std::vector<nn::EncodedSequence> seqs{codec.single(kLines[2]), codec.single(kLines[3])};
    auto batch = nn::mask_tokens(seqs, cfg.vocab_size, mix_seed(seed, 6), 0.5);
    check("mlm", {&enc.params(), &head.params()}, [&](bool grad) { return mlm_loss(enc, head, batch, grad).loss; });
  }
  for (auto mode : {ScoreMode::dual_encoder_dot, ScoreMode::linear_on_cls}) {
    Encoder<double> enc(cfg, mix_seed(seed, 7));
    ScoringHead<double> head(mode, o.hidden, mix_seed(seed, 8));
    jitter(head.params, mix_seed(seed, 9), 0.3);
    const std::vector<RSInstance> inst = {{kLines[0], kLines[1], RsLabel::positive, std::nullopt},
                                          {kLines[0], kLines[3], RsLabel::easy_negative, 1},
                                          {kLines[2], kLines[5], RsLabel::hard_negative, std::nullopt}};
    const NCEGroup group{kLines[0], {kLines[1], kLines[3], kLines[6]}, 0, 2};
    check("rs-class", {&enc.params(), &head.params},
          [&](bool grad) { return rs_class_loss(enc, head, codec, inst, grad).loss; });
    check("rs-contrast", {&enc.params(), &head.params},
          [&](bool grad) { return rs_contrast_loss(enc, head, codec, group, grad).loss; });
  }

  // GELU banks, plus ReLU banks whose down biases keep every unit clear of
  // the kink (finite differences across it are meaningless).
  AdapterConfig ac;
  ac.bottleneck = o.bottleneck;
  ac.activation = nn::Activation::gelu;
  auto bank = [&](const std::string& name, std::uint64_t s) {
    auto b = init_adapters<double>(cfg, ac, name, mix_seed(seed, s));
    jitter(b.params, mix_seed(seed, s + 1), 0.3);
    return b;
  };
  auto relu_bank = [&](const std::string& name, std::uint64_t s) {
    auto rc = ac;
    rc.activation = nn::Activation::relu;
    auto b = init_adapters<double>(cfg, rc, name, mix_seed(seed, s));
    jitter(b.params, mix_seed(seed, s + 1), 0.3);
    for (auto& p : b.params) {
      if (p.name.find("down.bias") == std::string::npos) continue;
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = i % 2 == 0 ? 8.0 : -8.0;
    }
    return b;
  };
  const Encoder<double> base(cfg, mix_seed(seed, 10));
  const auto seq = codec.pair(kLines[4], kLines[5]);
  Matrix<double> w = Matrix<double>::Zero(static_cast<Eigen::Index>(seq.ids.size()), o.hidden);
  {
    Rng rng(mix_seed(seed, 11));
    std::normal_distribution<double> nd;
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = nd(rng);
  }
  auto probe = [&](Encoder<double>& model) {
    return [&model, &seq, &w](bool grad) {
      auto tr = model.forward(seq);
      if (grad) model.backward(tr, w, Matrix<double>::Ones(1, tr.pooled.cols()));
      return tr.hidden.cwiseProduct(w).sum() + tr.pooled.sum();
    };
  };
  {
    auto model = inject(base, {bank("taxi", 20)}, nn::Compose::single);
    freeze_base(model);
    check("adapters", {&model.params()}, probe(model));
    auto stacked = inject(base, {bank("taxi", 20), bank("hotel", 22)}, nn::Compose::stack);
    freeze_base(stacked);
    check("adapters", {&stacked.params()}, probe(stacked));
    auto relu = inject(base, {relu_bank("taxi", 24)}, nn::Compose::single);
    freeze_base(relu);
    check("adapters", {&relu.params()}, probe(relu));
  }
  {
    auto model = inject(base, {bank("taxi", 20), bank("hotel", 22)}, nn::Compose::fuse,
                        FusionWeights(static_cast<std::size_t>(o.layers), {0.4, -0.3}));
    freeze_base(model);
    for (auto& p : model.params())
      if (is_adapter_tensor(p.name)) p.frozen = true;  // fusion logits alone
    check("fusion", {&model.params()}, probe(model));
  }

  Ontology ontology;
  ontology.add_slot("taxi", "leave", {"five", "six"});
  ontology.add_slot("taxi", "dest", {"station", "airport"});
  const auto slots = ontology.slots_for({"taxi"});
  {
    Encoder<double> enc(cfg, mix_seed(seed, 30));
    DstHead<double> head(ontology, slots, o.hidden);
    jitter(head.params(), mix_seed(seed, 31), 0.3);
    std::vector<DstTurn> turns(2);
    turns[0].history = {kLines[0]};
    turns[0].gold = {{slots[0], "none"}, {slots[1], "station"}};
    turns[1].history = {kLines[0], kLines[1], kLines[6]};
    turns[1].gold = {{slots[0], "six"}, {slots[1], "airport"}};
    check("dst", {&enc.params(), &head.params()}, [&](bool grad) { return dst_loss(enc, head, codec, turns, grad); });
  }
  for (auto mode : {ScoreMode::dual_encoder_dot, ScoreMode::linear_on_cls}) {
    Encoder<double> enc(cfg, mix_seed(seed, 40));
    ScoringHead<double> head(mode, o.hidden, mix_seed(seed, 41), "rr");
    jitter(head.params, mix_seed(seed, 42), 0.3);
    std::vector<RrItem> items(2);
    items[0].history = {kLines[0]};
    items[0].gold = kLines[1];
    items[1].history = {kLines[2], kLines[3], kLines[4]};
    items[1].gold = kLines[7];
    const std::vector<std::string> negatives = {kLines[5], kLines[1]};
    check("rr", {&enc.params(), &head.params},
          [&](bool grad) { return rr_loss(enc, head, codec, items, negatives, grad); });
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace dstod
