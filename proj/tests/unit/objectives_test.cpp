#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dstod/error.hpp"
#include "dstod/neural/grad_check.hpp"
#include "dstod/objectives.hpp"

using namespace dstod;
using nn::EncoderConfig;

namespace {

EncoderConfig tiny(int vocab) {
  EncoderConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 4;
  c.ffn = 32;
  c.max_len = 24;
  c.vocab_size = vocab;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

// Direct evaluation of -log(exp(s_true) / sum_i exp(s_i)).
double nce_direct(const std::vector<double>& s, std::size_t t) {
  double z = 0;
  for (double v : s) z += std::exp(v);
  return -std::log(std::exp(s[t]) / z);
}

const std::vector<std::string> kLines = {"the taxi to the station please", "book a cab to the airport",
                                         "a train leaves at noon", "the hotel has free parking",
                                         "i need a taxi at five", "the station is near the hotel"};

nn::Vocab vocab() { return nn::Vocab::build(kLines, 1); }

NCEGroup group() {
  return {"i need a taxi", {"the taxi leaves at five", "free parking", "a train at noon"}, 0, 2};
}

}  // namespace

TEST(NceLoss, AllEqualScores) {
  for (int n : {1, 2, 5, 99}) {
    std::vector<double> s(static_cast<std::size_t>(n + 1), 0.7);
    EXPECT_NEAR(nce_loss(s, 0).loss, std::log(n + 1.0), 1e-12);
  }
}

TEST(NceLoss, WorkedExample) {
  EXPECT_NEAR(nce_loss({2.0, 0.0, 0.0}, 0).loss, -std::log(std::exp(2.0) / (std::exp(2.0) + 2.0)), 1e-12);
}

TEST(NceLoss, RandomVectorsMatchEquationAndShift) {
  Rng rng(3);
  std::normal_distribution<double> d(0.0, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s(2 + uniform_index(rng, 6));
    for (double& v : s) v = d(rng);
    const std::size_t t = uniform_index(rng, s.size());
    const auto l = nce_loss(s, t);
    EXPECT_NEAR(l.loss, nce_direct(s, t), 1e-9);
    EXPECT_GE(l.loss, 0.0);
    auto shifted = s;
    for (double& v : shifted) v += 123.4;
    EXPECT_NEAR(nce_loss(shifted, t).loss, l.loss, 1e-9);
    double z = 0;
    for (double v : s) z += std::exp(v);
    EXPECT_NEAR(std::exp(-l.loss), std::exp(s[t]) / z, 1e-9);
  }
}

TEST(NceLoss, StableForLargeScores) {
  auto l = nce_loss({1000.0, 0.0, -1000.0}, 0);
  EXPECT_TRUE(std::isfinite(l.loss));
  EXPECT_NEAR(l.loss, 0.0, 1e-12);
  EXPECT_NEAR(nce_loss({0.0, 1000.0}, 0).loss, 1000.0, 1e-9);
}

TEST(NceLoss, RankIsPessimistic) {
  EXPECT_EQ(nce_loss({1.0, 2.0, 0.5}, 0).rank, 2u);
  EXPECT_EQ(nce_loss({1.0, 1.0, 0.5}, 0).rank, 2u);
  EXPECT_EQ(nce_loss({3.0, 1.0, 0.5}, 0).rank, 1u);
}

TEST(NceLoss, GradientIsSoftmaxMinusOneHot) {
  auto l = nce_loss({0.3, -0.2, 1.1}, 1);
  double sum = 0;
  for (double g : l.grad) sum += g;
  EXPECT_NEAR(sum, 0.0, 1e-15);
  EXPECT_LT(l.grad[1], 0.0);
}

TEST(BceLoss, Values) {
  EXPECT_NEAR(bce_loss(0.0, 1).loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_loss(0.0, 0).loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_loss(20.0, 1).loss, 2.06e-9, 1e-11);
  EXPECT_NEAR(bce_loss(-800.0, 1).loss, 800.0, 1e-9);
  EXPECT_THROW(bce_loss(0.0, 2), Error);
}

TEST(BceLoss, MixedBatchMatchesPerItemSum) {
  const std::vector<std::pair<double, int>> items = {{1.5, 1}, {-0.3, 0}, {2.2, 0}, {-4.0, 1}, {0.1, 1}};
  double total = 0;
  for (auto [s, y] : items) {
    const double p = 1.0 / (1.0 + std::exp(-s));
    total += -(y * std::log(p) + (1 - y) * std::log(1 - p));
  }
  double ours = 0;
  for (auto [s, y] : items) ours += bce_loss(s, y).loss;
  EXPECT_NEAR(ours, total, 1e-9);
}

TEST(BceLoss, PerfectScorer) {
  const double loss = (bce_loss(60.0, 1).loss + bce_loss(-60.0, 0).loss) / 2;
  EXPECT_LT(loss, 1e-20);
  EXPECT_EQ(bce_loss(60.0, 1).rank, 1u);
  EXPECT_EQ(bce_loss(-60.0, 0).rank, 1u);
}

TEST(MlmLoss, UniformOutputGivesLogV) {
  auto v = vocab();
  Encoder<double> enc(tiny(v.size()), 1);
  MlmHead<double> head(enc.config(), 1);
  head.params().at("mlm.norm.gamma").value.setZero();
  nn::TextCodec codec{&v, 24, 128};
  nn::MaskedSequence m{codec.single("the taxi to the station"), {}};
  m.labels.assign(m.seq.ids.size(), nn::kIgnoreLabel);
  m.labels[1] = m.seq.ids[1];
  m.labels[3] = m.seq.ids[3];
  auto lv = mlm_loss(enc, head, {m}, false);
  EXPECT_EQ(lv.count, 2u);
  EXPECT_NEAR(lv.loss, std::log(static_cast<double>(v.size())), 1e-12);
}

TEST(MlmLoss, NoSelectedPositions) {
  auto v = vocab();
  Encoder<double> enc(tiny(v.size()), 1);
  MlmHead<double> head(enc.config(), 1);
  nn::TextCodec codec{&v, 24, 128};
  nn::MaskedSequence m{codec.single("the taxi"), {}};
  m.labels.assign(m.seq.ids.size(), nn::kIgnoreLabel);
  auto lv = mlm_loss(enc, head, {m}, true);
  EXPECT_EQ(lv.count, 0u);
  EXPECT_EQ(lv.loss, 0.0);
}

TEST(MlmLoss, TwoPositionsMatchHandComputation) {
  auto v = vocab();
  Encoder<double> enc(tiny(v.size()), 4);
  MlmHead<double> head(enc.config(), 4);
  nn::TextCodec codec{&v, 24, 128};
  nn::MaskedSequence m{codec.single("book a cab to the airport"), {}};
  m.labels.assign(m.seq.ids.size(), nn::kIgnoreLabel);
  m.labels[2] = m.seq.ids[2];
  m.labels[5] = m.seq.ids[5];
  m.seq.ids[2] = nn::Vocab::kMask;
  auto tr = enc.forward(m.seq);
  const auto& W = head.params().at("mlm.transform.weight").value;
  const auto& b = head.params().at("mlm.transform.bias").value;
  const auto& E = enc.params().at("embeddings.token").value;
  double expected = 0;
  for (int p : {2, 5}) {
    std::vector<double> z(16);
    for (int o = 0; o < 16; ++o) {
      double acc = b(0, o);
      for (int i = 0; i < 16; ++i) acc += tr.hidden(p, i) * W(i, o);
      z[static_cast<std::size_t>(o)] = 0.5 * acc * (1 + std::erf(acc / std::sqrt(2.0)));
    }
    double mu = 0, var = 0;
    for (double x : z) mu += x / 16;
    for (double x : z) var += (x - mu) * (x - mu) / 16;
    for (double& x : z) x = (x - mu) / std::sqrt(var + 1e-5);  // gamma 1, beta 0 at init
    std::vector<double> logits(static_cast<std::size_t>(v.size()));
    double mx = -1e300;
    for (int t = 0; t < v.size(); ++t) {
      double acc = 0;
      for (int i = 0; i < 16; ++i) acc += z[static_cast<std::size_t>(i)] * E(t, i);
      logits[static_cast<std::size_t>(t)] = acc;
      mx = std::max(mx, acc);
    }
    double zsum = 0;
    for (double l : logits) zsum += std::exp(l - mx);
    expected += -(logits[static_cast<std::size_t>(m.labels[static_cast<std::size_t>(p)])] - mx - std::log(zsum));
  }
  EXPECT_NEAR(mlm_loss(enc, head, {m}, false).loss, expected / 2, 1e-10);
}

TEST(MlmLoss, FiniteDifference) {
  auto v = vocab();
  Encoder<double> enc(tiny(v.size()), 4);
  MlmHead<double> head(enc.config(), 4);
  head.params().at("mlm.output.bias").value.setRandom();
  nn::TextCodec codec{&v, 24, 128};
  std::vector<nn::EncodedSequence> seqs{codec.single(kLines[0]), codec.single(kLines[1])};
  auto batch = nn::mask_tokens(seqs, v.size(), 5, 0.5);
  auto loss = [&](bool grad) { return mlm_loss(enc, head, batch, grad).loss; };
  for (const auto& r : nn::check_gradients("mlm", {&enc.params(), &head.params()}, loss, {})) {
    EXPECT_TRUE(r.passed) << r.tensor << " " << r.rel_error;
  }
}

TEST(RsLosses, FiniteDifferenceBothModes) {
  auto v = vocab();
  nn::TextCodec codec{&v, 24, 128};
  for (auto mode : {ScoreMode::dual_encoder_dot, ScoreMode::linear_on_cls}) {
    Encoder<double> enc(tiny(v.size()), 6);
    ScoringHead<double> head(mode, 16, 6);
    for (auto& p : head.params) p.value.setRandom();
    std::vector<RSInstance> inst = {{"i need a taxi", "the taxi leaves", RsLabel::positive, std::nullopt},
                                    {"i need a taxi", "free parking", RsLabel::easy_negative, 1},
                                    {"a train", "at noon", RsLabel::hard_negative, std::nullopt}};
    auto cls = [&](bool grad) { return rs_class_loss(enc, head, codec, inst, grad).loss; };
    auto nce = [&](bool grad) { return rs_contrast_loss(enc, head, codec, group(), grad).loss; };
    for (const auto& r : nn::check_gradients("rs-class", {&enc.params(), &head.params}, cls, {}))
      EXPECT_TRUE(r.passed) << to_string(mode) << " " << r.tensor << " " << r.rel_error;
    for (const auto& r : nn::check_gradients("rs-contrast", {&enc.params(), &head.params}, nce, {}))
      EXPECT_TRUE(r.passed) << to_string(mode) << " " << r.tensor << " " << r.rel_error;
  }
}

TEST(RsLosses, ContrastMatchesScoresFromTape) {
  auto v = vocab();
  nn::TextCodec codec{&v, 24, 128};
  Encoder<double> enc(tiny(v.size()), 6);
  ScoringHead<double> head(ScoreMode::dual_encoder_dot, 16, 6);
  EXPECT_EQ(head.params.size(), 0u);
  ScoreTape<double> tape;
  auto g = group();
  auto scores = tape.forward(enc, head, codec, g.context, g.responses);
  auto lv = rs_contrast_loss(enc, head, codec, g, false);
  EXPECT_NEAR(lv.loss, nce_direct(scores, 0), 1e-9);
  auto ctx = enc.forward(codec.single(g.context));
  auto r1 = enc.forward(codec.single(g.responses[1]));
  EXPECT_NEAR(scores[1], ctx.pooled.cwiseProduct(r1.pooled).sum(), 1e-12);
}

TEST(RsLosses, ZeroScorerGivesLn2) {
  auto v = vocab();
  nn::TextCodec codec{&v, 24, 128};
  Encoder<double> enc(tiny(v.size()), 6);
  ScoringHead<double> head(ScoreMode::linear_on_cls, 16, 6);
  for (auto& p : head.params) p.value.setZero();
  std::vector<RSInstance> inst = {{"a", "b", RsLabel::positive, std::nullopt},
                                  {"a", "c", RsLabel::easy_negative, 1}};
  auto lv = rs_class_loss(enc, head, codec, inst, false);
  EXPECT_NEAR(lv.loss, std::log(2.0), 1e-12);
}

TEST(EarlyStopper, PatienceCountsNonImprovement) {
  EarlyStopper s(3, true);
  int epochs = 0;
  for (double m : {3.0, 2.0, 2.0, 2.0, 5.0}) {
    s.update(m);
    ++epochs;
    if (s.should_stop()) break;
  }
  EXPECT_EQ(epochs, 4);
  EXPECT_EQ(s.best_epoch(), 1);
}

TEST(EarlyStopper, ImprovingRunsFullBudget) {
  EarlyStopper s(10, true);
  for (int e = 0; e < 300; ++e) {
    EXPECT_TRUE(s.update(e));
    EXPECT_FALSE(s.should_stop());
  }
  EarlyStopper lower(2, false);
  lower.update(1.0);
  EXPECT_TRUE(lower.update(0.5));
  EXPECT_FALSE(lower.update(0.7));
}

TEST(SplitTrainDev, SeededAndDisjoint) {
  std::vector<std::string> items;
  for (int i = 0; i < 100; ++i) items.push_back(std::to_string(i));
  auto [tr, dv] = split_train_dev(items, 0.05, 3);
  EXPECT_EQ(dv.size(), 5u);
  EXPECT_EQ(tr.size(), 95u);
  auto [tr2, dv2] = split_train_dev(items, 0.05, 3);
  EXPECT_EQ(dv, dv2);
  EXPECT_THROW(split_train_dev(std::vector<std::string>{"x"}, 0.05, 1), Error);
}

namespace {

std::vector<DialogTriple> toy_triples() {
  std::vector<DialogTriple> out;
  const std::vector<std::string> words = {"taxi", "cab", "station", "airport", "hotel", "parking", "train", "noon"};
  for (int i = 0; i < 40; ++i) {
    DialogTriple t;
    const auto& a = words[static_cast<std::size_t>(i) % words.size()];
    const auto& b = words[static_cast<std::size_t>(i * 3 + 1) % words.size()];
    t.context = "i need the " + a + " right now " + std::to_string(i);
    t.response = "the " + a + " is ready for you " + std::to_string(i);
    t.false_response = "the " + b + " was quite far away " + std::to_string(i);
    t.domain = "taxi";
    t.subreddit = "travel";
    t.thread_id = "t" + std::to_string(i);
    out.push_back(t);
  }
  return out;
}

}  // namespace

TEST(Specialize, GridRunsEveryRateAndIsReproducible) {
  auto triples = toy_triples();
  std::vector<std::string> lines;
  for (const auto& t : triples) {
    lines.push_back(t.context);
    lines.push_back(t.response);
    lines.push_back(t.false_response);
  }
  auto v = nn::Vocab::build(lines, 1);
  nn::TextCodec codec{&v, 24, 128};
  auto cfg = tiny(v.size());
  cfg.dropout = 0.1;
  Encoder<float> base(cfg, 2);
  Schedule sch;
  sch.epochs = 2;
  sch.batch = 8;
  sch.lrs = kLrGrid;
  sch.dev_fraction = 0.2;
  sch.seed = 9;
  for (auto obj : {Objective::rs_class, Objective::rs_contrast}) {
    auto data = prepare_rs(obj, triples, sch);
    auto a = specialize(base, data, codec, sch);
    auto b = specialize(base, data, codec, sch);
    EXPECT_EQ(a.runs.size(), 4u);
    EXPECT_EQ(a.log_text(), b.log_text());
    EXPECT_TRUE(a.rs_head.has_value());
    EXPECT_FALSE(a.log_text().empty());
  }
  std::vector<CorpusLine> corpus;
  for (const auto& l : lines) corpus.push_back({l, {}});
  sch.lrs = {1e-3};
  auto mlm = specialize(base, prepare_mlm(corpus, sch), codec, sch);
  EXPECT_EQ(mlm.runs.size(), 1u);
  EXPECT_TRUE(mlm.mlm_head.has_value());
  EXPECT_LT(mlm.runs[0].epochs.back().dev_metric, std::log(static_cast<double>(v.size())) + 1.0);
}

TEST(Specialize, DivergentRateIsAbortedAndGridContinues) {
  auto triples = toy_triples();
  std::vector<CorpusLine> corpus;
  std::vector<std::string> lines;
  for (const auto& t : triples) {
    corpus.push_back({t.context, {}});
    lines.push_back(t.context);
  }
  auto v = nn::Vocab::build(lines, 1);
  nn::TextCodec codec{&v, 24, 128};
  Encoder<float> base(tiny(v.size()), 2);
  Schedule sch;
  sch.epochs = 2;
  sch.batch = 8;
  sch.lrs = {1e38, 1e-3};
  sch.dev_fraction = 0.2;
  auto res = specialize(base, prepare_mlm(corpus, sch), codec, sch);
  ASSERT_EQ(res.runs.size(), 2u);
  EXPECT_TRUE(res.runs[0].diverged);
  EXPECT_FALSE(res.runs[1].diverged);
  EXPECT_EQ(res.best_run, 1u);
  EXPECT_NE(res.log_text().find("aborted"), std::string::npos);
}

TEST(Specialize, FrozenBaseStaysFrozen) {
  auto triples = toy_triples();
  std::vector<std::string> lines;
  for (const auto& t : triples) lines.push_back(t.context + " " + t.response + " " + t.false_response);
  auto v = nn::Vocab::build(lines, 1);
  nn::TextCodec codec{&v, 24, 128};
  Encoder<float> base(tiny(v.size()), 2);
  for (auto& p : base.params()) p.frozen = p.name.rfind("layer.1", 0) != 0;
  Schedule sch;
  sch.epochs = 1;
  sch.batch = 8;
  sch.dev_fraction = 0.2;
  auto res = specialize(base, prepare_rs(Objective::rs_contrast, triples, sch), codec, sch);
  for (std::size_t i = 0; i < base.params().size(); ++i) {
    const auto& p = base.params()[i];
    if (p.frozen) {
      EXPECT_EQ(res.model.params()[i].value, p.value) << p.name;
    }
  }
}
