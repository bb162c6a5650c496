#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "dstod/downstream.hpp"
#include "dstod/error.hpp"
#include "dstod/grad_suite.hpp"
#include "dstod/neural/grad_check.hpp"
#include "synthetic.hpp"

using namespace dstod;

namespace {

SlotKey key(const std::string& d, const std::string& s) { return {d, s}; }

const std::vector<SlotKey> kTwoSlots = {key("taxi", "leave"), key("taxi", "dest")};

TurnPrediction turn(const std::string& leave, const std::string& dest) {
  return {{key("taxi", "leave"), leave}, {key("taxi", "dest"), dest}};
}

struct Tiny {
  synth::World world;
  nn::Vocab vocab;
  nn::TextCodec codec;
  nn::EncoderConfig cfg;

  Tiny() {
    synth::WorldOptions wo;
    wo.slots_per_domain = 2;
    wo.values_per_slot = 3;
    wo.aliases_per_value = 1;
    world = synth::make_world(wo);
    vocab = nn::Vocab::build(world.vocabulary_lines(), 1);
    codec = nn::TextCodec{&vocab, 24, 12};
    cfg.layers = 2;
    cfg.hidden = 16;
    cfg.heads = 4;
    cfg.ffn = 32;
    cfg.max_len = 24;
    cfg.vocab_size = static_cast<int>(vocab.size());
    cfg.dropout = 0.0;
    cfg.init_std = 0.3;
  }

  TaskData data(const std::string& domain, std::size_t n_train, std::size_t n_dev, std::size_t n_test,
                std::uint64_t seed) const {
    auto s = synth::make_dialogs(world, {domain}, n_train, n_dev, n_test, seed);
    TaskData td;
    td.domains = {domain};
    td.train = s.train;
    td.dev = s.dev;
    td.test = s.test;
    td.ontology = world.ontology;
    return td;
  }
};

Dialog dialog(const std::string& id, const std::set<std::string>& domains) {
  Dialog d;
  d.id = id;
  d.domains = domains;
  d.turns = {{Speaker::user, "hi"}, {Speaker::system, "hello"}};
  return d;
}

}  // namespace

// -- joint goal accuracy -----------------------------------------------------

TEST(JointGoalAccuracy, CraftedHalf) {
  std::vector<TurnPrediction> gold = {turn("5pm", "cambridge"), turn("5pm", "none"), turn("none", "none"),
                                      turn("6pm", "ely")};
  std::vector<TurnPrediction> pred = {turn("5pm", "cambridge"), turn("5pm", "ely"), turn("none", "none"),
                                      turn("6pm", "cambridge")};
  EXPECT_DOUBLE_EQ(joint_goal_accuracy(pred, gold, kTwoSlots), 0.5);
}

TEST(JointGoalAccuracy, AllNoneAgainstEmptyPredictions) {
  std::vector<TurnPrediction> gold(3, turn("none", "none"));
  std::vector<TurnPrediction> pred(3);
  EXPECT_DOUBLE_EQ(joint_goal_accuracy(pred, gold, kTwoSlots), 1.0);
  pred[1][key("taxi", "dest")] = "ely";
  EXPECT_NEAR(joint_goal_accuracy(pred, gold, kTwoSlots), 2.0 / 3.0, 1e-12);
}

TEST(JointGoalAccuracy, NormalizesCaseAndSpace) {
  std::vector<TurnPrediction> gold = {turn("5pm", "Cambridge")};
  std::vector<TurnPrediction> pred = {turn(" 5PM", "cambridge ")};
  EXPECT_DOUBLE_EQ(joint_goal_accuracy(pred, gold, kTwoSlots), 1.0);
}

TEST(JointGoalAccuracy, CountMismatchThrows) {
  std::vector<TurnPrediction> gold(2, turn("none", "none"));
  std::vector<TurnPrediction> pred(3, turn("none", "none"));
  EXPECT_THROW(joint_goal_accuracy(pred, gold, kTwoSlots), ValidationError);
}

TEST(JointGoalAccuracy, MatchesIndependentCount) {
  std::mt19937_64 rng(42);
  const std::vector<std::string> values = {"a", "b", "none"};
  std::vector<TurnPrediction> gold, pred;
  for (int t = 0; t < 20; ++t) {
    gold.push_back(turn(values[rng() % 3], values[rng() % 3]));
    pred.push_back(turn(values[rng() % 3], values[rng() % 3]));
  }
  int hits = 0;
  for (int t = 0; t < 20; ++t) {
    bool ok = true;
    for (const auto& k : kTwoSlots) ok = ok && gold[t].at(k) == pred[t].at(k);
    hits += ok;
  }
  EXPECT_DOUBLE_EQ(joint_goal_accuracy(pred, gold, kTwoSlots), hits / 20.0);
}

TEST(JointGoalAccuracy, FixingATurnNeverLowersIt) {
  std::vector<TurnPrediction> gold = {turn("a", "b"), turn("a", "none"), turn("c", "b")};
  std::vector<TurnPrediction> pred = {turn("x", "b"), turn("a", "x"), turn("c", "x")};
  double prev = joint_goal_accuracy(pred, gold, kTwoSlots);
  for (std::size_t t = 0; t < gold.size(); ++t) {
    pred[t] = gold[t];
    const double now = joint_goal_accuracy(pred, gold, kTwoSlots);
    EXPECT_GT(now, prev);
    prev = now;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
}

// -- ranking -----------------------------------------------------------------

TEST(RrRank, TiesCountAgainstGold) {
  EXPECT_EQ(rr_rank({2.0, 1.0, 0.0}, 0), 1u);
  EXPECT_EQ(rr_rank({1.0, 1.0, 0.0}, 0), 2u);
  EXPECT_EQ(rr_rank({1.0, 1.0, 1.0}, 2), 3u);
  EXPECT_EQ(rr_rank({0.0, 3.0, 2.0, 1.0}, 3), 3u);
  EXPECT_THROW(rr_rank({1.0}, 1), ValidationError);
}

TEST(RrRank, CraftedRecall) {
  // gold at index 0; contexts 0, 3, 5, 8 rank it strictly first
  const std::vector<std::vector<double>> rows = {
      {5, 1, 2}, {1, 5, 2}, {2, 2, 1}, {9, 8, 7}, {0, 0, 0}, {3, -1, -2}, {1, 2, 3}, {4, 4, 4}, {0.5, 0.4, 0.3},
      {-1, 0, 1}};
  std::vector<std::size_t> ranks;
  for (const auto& r : rows) ranks.push_back(rr_rank(r, 0));
  EXPECT_DOUBLE_EQ(recall_at_1(ranks), 0.4);
  EXPECT_THROW(recall_at_1({}), ValidationError);
}

TEST(RrRank, PessimisticNeverBeatsOptimistic) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(8);
    for (auto& x : s) x = static_cast<double>(rng() % 4);
    const std::size_t g = rng() % s.size();
    const auto strictly_better = static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [&](double x) { return x > s[g]; }));
    EXPECT_GE(rr_rank(s, g), strictly_better + 1);
  }
}

// -- DST head and data -------------------------------------------------------

TEST(DstHead, CandidatesEndWithNoneAndStartAtIdentity) {
  Tiny t;
  const auto slots = t.world.ontology.slots_for({"taxi"});
  DstHead<double> head(t.world.ontology, slots, 16);
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const auto& c = head.candidates(s);
    EXPECT_EQ(c.back(), "none");
    EXPECT_EQ(c.size(), t.world.ontology.values(slots[s].first, slots[s].second).size() + 1);
    EXPECT_TRUE(head.params()[head.bilinear(s)].value.isIdentity());
    EXPECT_TRUE(head.params()[head.query(s)].value.isZero());
  }
}

TEST(DstHead, ZeroScorerPicksFirstCandidate) {
  Tiny t;
  Encoder<double> enc(t.cfg, 5);
  const auto slots = t.world.ontology.slots_for({"taxi"});
  DstHead<double> head(t.world.ontology, slots, 16);
  for (auto& p : head.params()) p.value.setZero();
  auto pred = dst_forward(enc, head, t.codec, {"anything at all"}, t.world.ontology);
  for (std::size_t s = 0; s < slots.size(); ++s) EXPECT_EQ(pred.at(slots[s]), head.candidates(s).front());
}

TEST(DstHead, QueryRiggedTowardOneValue) {
  Tiny t;
  Encoder<double> enc(t.cfg, 5);
  const auto slots = t.world.ontology.slots_for({"taxi"});
  DstHead<double> head(t.world.ontology, slots, 16);
  // W = 0 and q = pool(target): the score is q . e_v, maximal at the target itself
  const std::size_t pick = 1;
  const auto target = head.candidates(0)[pick];
  head.params()[head.bilinear(0)].value.setZero();
  head.params()[head.query(0)].value = 50.0 * enc.forward(t.codec.single(target)).pooled;
  auto pred = dst_forward(enc, head, t.codec, {"whatever"}, t.world.ontology);
  EXPECT_EQ(pred.at(slots[0]), target);
}

TEST(DstHead, PredictionInvariantToPositiveScale) {
  Tiny t;
  Encoder<double> enc(t.cfg, 9);
  const auto slots = t.world.ontology.slots_for({"taxi"});
  DstHead<double> head(t.world.ontology, slots, 16);
  Rng rng(1);
  std::normal_distribution<double> nd;
  for (auto& p : head.params())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = nd(rng);
  auto scaled = head;
  for (auto& p : scaled.params()) p.value *= 3.0;
  const std::vector<std::string> h = {t.world.domain("taxi").filler[0], t.world.acks[0]};
  EXPECT_EQ(dst_forward(enc, head, t.codec, h, t.world.ontology), dst_forward(enc, scaled, t.codec, h, t.world.ontology));
}

TEST(DstHead, SlotOutsideOntologyThrows) {
  Tiny t;
  Encoder<double> enc(t.cfg, 5);
  Ontology other;
  other.add_slot("train", "day", {"monday"});
  DstHead<double> head(other, {key("train", "day")}, 16);
  EXPECT_THROW(dst_forward(enc, head, t.codec, {"x"}, t.world.ontology), ValidationError);
}

TEST(DstTurns, OnePerUserTurnCompletedWithNone) {
  Tiny t;
  auto td = t.data("taxi", 4, 1, 1, 3);
  const auto slots = td.slots();
  auto turns = dst_turns(td.train, slots);
  std::size_t users = 0;
  for (const auto& d : td.train)
    for (const auto& u : d.turns) users += u.speaker == Speaker::user;
  ASSERT_EQ(turns.size(), users);
  for (const auto& tt : turns) {
    EXPECT_EQ(tt.gold.size(), slots.size());
    EXPECT_EQ(tt.history.size(), tt.turn + 1);
  }
  // the first user turn mentions one value; every other slot is none
  const auto& first = turns.front();
  const auto n_none = std::count_if(first.gold.begin(), first.gold.end(), [](const auto& kv) { return kv.second == "none"; });
  EXPECT_EQ(static_cast<std::size_t>(n_none), slots.size() - 1);
}

TEST(RrItems, PoolsAreDistinctAndGoldFirst) {
  Tiny t;
  auto td = t.data("taxi", 12, 1, 1, 3);
  auto items = rr_items(td.train, 5, 11);
  ASSERT_FALSE(items.empty());
  for (const auto& it : items) {
    ASSERT_EQ(it.candidates.size(), 5u);
    EXPECT_EQ(it.candidates[it.gold_index], it.gold);
    std::set<std::string> uniq(it.candidates.begin(), it.candidates.end());
    EXPECT_EQ(uniq.size(), 5u);
    EXPECT_FALSE(it.history.empty());
  }
  EXPECT_EQ(rr_items(td.train, 5, 11)[0].candidates, items[0].candidates);
  EXPECT_TRUE(rr_items(td.train, 0, 11)[0].candidates.empty());
  EXPECT_THROW(rr_items(td.train, 10000, 11), ValidationError);
}

TEST(RrItems, GoldMissingFromPoolThrows) {
  Tiny t;
  Encoder<double> enc(t.cfg, 5);
  ScoringHead<double> head(ScoreMode::dual_encoder_dot, 16, 1, "rr");
  RrItem it;
  it.dialog_id = "d";
  it.history = {"x"};
  it.gold = "right";
  it.candidates = {"wrong", "other"};
  EXPECT_THROW(rr_rank(enc, head, t.codec, it), ValidationError);
}

// -- gradients ---------------------------------------------------------------

TEST(DownstreamGradients, DstLoss) {
  Tiny t;
  Encoder<double> enc(t.cfg, 21);
  auto td = t.data("taxi", 2, 1, 1, 4);
  auto turns = dst_turns(td.train, td.slots());
  turns.resize(3);
  DstHead<double> head(t.world.ontology, td.slots(), 16);
  Rng rng(2);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto& p : head.params())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += nd(rng);
  nn::GradCheckOptions o;
  o.max_entries = 12;
  auto rows = nn::check_gradients("dst", {&enc.params(), &head.params()},
                                  [&](bool g) { return dst_loss(enc, head, t.codec, turns, g); }, o);
  for (const auto& r : rows) EXPECT_TRUE(r.passed) << r.tensor << " rel " << r.rel_error;
}

TEST(DownstreamGradients, RrLossBothModes) {
  Tiny t;
  auto td = t.data("taxi", 3, 1, 1, 4);
  auto items = rr_items(td.train, 0, 1);
  items.resize(3);
  const std::vector<std::string> negatives = {t.world.acks[0], t.world.acks[1] + " " + t.world.common[0]};
  for (auto mode : {ScoreMode::dual_encoder_dot, ScoreMode::linear_on_cls}) {
    Encoder<double> enc(t.cfg, 22);
    ScoringHead<double> head(mode, 16, 3, "rr");
    nn::GradCheckOptions o;
    o.max_entries = 12;
    auto rows = nn::check_gradients("rr", {&enc.params(), &head.params},
                                    [&](bool g) { return rr_loss(enc, head, t.codec, items, negatives, g); }, o);
    for (const auto& r : rows) EXPECT_TRUE(r.passed) << to_string(mode) << " " << r.tensor << " rel " << r.rel_error;
  }
}

TEST(DownstreamGradients, CorruptedHeadGradientIsCaught) {
  Tiny t;
  Encoder<double> enc(t.cfg, 21);
  auto td = t.data("taxi", 2, 1, 1, 4);
  auto turns = dst_turns(td.train, td.slots());
  turns.resize(2);
  DstHead<double> head(t.world.ontology, td.slots(), 16);
  nn::GradCheckOptions o;
  o.max_entries = 12;
  o.corrupt_tensor = head.params()[head.bilinear(0)].name;
  auto rows = nn::check_gradients("dst", {&enc.params(), &head.params()},
                                  [&](bool g) { return dst_loss(enc, head, t.codec, turns, g); }, o);
  bool caught = false;
  for (const auto& r : rows)
    if (r.tensor == o.corrupt_tensor) caught = !r.passed;
  EXPECT_TRUE(caught);
}

// -- few-shot ----------------------------------------------------------------

TEST(FewShot, SizeRule) {
  EXPECT_EQ(few_shot_size(1654, 5), 83u);
  EXPECT_EQ(few_shot_size(1654, 100), 1654u);
  EXPECT_EQ(few_shot_size(10, 1), 1u);
  EXPECT_EQ(few_shot_size(30, 50), 15u);
  EXPECT_THROW(few_shot_size(10, 0), ValidationError);
  EXPECT_THROW(few_shot_size(10, 101), ValidationError);
  EXPECT_THROW(few_shot_size(0, 5), ValidationError);
}

TEST(FewShot, SubsetsAreNestedAndOrdered) {
  std::vector<Dialog> train;
  for (int i = 0; i < 40; ++i) train.push_back(dialog("d" + std::to_string(i), {"taxi"}));
  auto id_set = [](const std::vector<Dialog>& ds) {
    std::vector<std::string> ids;
    for (const auto& d : ds) ids.push_back(d.id);
    return ids;
  };
  std::vector<std::string> prev;
  for (double p : kFewShotPercents) {
    auto ids = id_set(few_shot_subset(train, p, 7));
    EXPECT_EQ(ids.size(), few_shot_size(40, p));
    std::set<std::string> cur(ids.begin(), ids.end());
    for (const auto& x : prev) EXPECT_TRUE(cur.count(x)) << p;
    std::vector<std::size_t> pos;
    for (const auto& x : ids) pos.push_back(std::stoul(x.substr(1)));
    EXPECT_TRUE(std::is_sorted(pos.begin(), pos.end()));
    prev = ids;
  }
  EXPECT_EQ(id_set(few_shot_subset(train, 100, 1)), id_set(few_shot_subset(train, 100, 99)));
  EXPECT_NE(id_set(few_shot_subset(train, 20, 1)), id_set(few_shot_subset(train, 20, 99)));
}

// -- reports -----------------------------------------------------------------

TEST(EvalReport, JsonAndTsv) {
  EvalReport r;
  r.task = "dst";
  r.domains = {"hotel", "taxi"};
  r.metric = "jga";
  r.value = 0.25;
  r.n_items = 12;
  r.seed = 3;
  r.config_digest = "abcd";
  r.label = "5%";
  auto back = EvalReport::from_json(r.to_json());
  EXPECT_EQ(back.to_json(), r.to_json());
  const auto row = r.tsv_row();
  const auto header = EvalReport::tsv_header();
  EXPECT_EQ(std::count(row.begin(), row.end(), '\t'), std::count(header.begin(), header.end(), '\t'));
  EXPECT_NE(row.find("hotel+taxi"), std::string::npos);
  r.value = 1.5;
  EXPECT_THROW(r.validate(), ValidationError);
}

// -- harnesses ---------------------------------------------------------------

TEST(Finetune, SeededRunsAreIdentical) {
  Tiny t;
  Encoder<double> enc(t.cfg, 31);
  auto td = t.data("taxi", 3, 3, 3, 8);
  FinetuneOptions o;
  o.epochs = 2;
  o.lr = 1e-3;
  o.seed = 4;
  for (Task task : {Task::dst, Task::rr}) {
    o.rr_pool = 3;
    auto a = finetune(enc, task, td, t.codec, o);
    auto b = finetune(enc, task, td, t.codec, o);
    EXPECT_EQ(a.report.value, b.report.value);
    EXPECT_EQ(a.dev_history, b.dev_history);
    EXPECT_EQ(a.report.config_digest, b.report.config_digest);
    EXPECT_EQ(a.epochs_run, 2);
    EXPECT_TRUE(a.model.params()[0].value.isApprox(b.model.params()[0].value));
    EXPECT_FALSE(a.model.params()[0].value.isApprox(enc.params()[0].value));
  }
}

TEST(Finetune, FrozenAdaptersStayPut) {
  Tiny t;
  Encoder<double> base(t.cfg, 31);
  AdapterConfig ac;
  ac.bottleneck = 4;
  auto enc = inject(base, std::vector<AdapterBank<double>>{init_adapters<double>(t.cfg, ac, "taxi", 2)},
                    nn::Compose::single);
  auto td = t.data("taxi", 3, 2, 2, 8);
  FinetuneOptions o;
  o.epochs = 1;
  o.lr = 1e-2;
  auto r = finetune(enc, Task::dst, td, t.codec, o);
  for (std::size_t i = 0; i < enc.params().size(); ++i) {
    if (!is_adapter_tensor(enc.params()[i].name)) continue;
    EXPECT_TRUE(r.model.params()[i].value == enc.params()[i].value) << enc.params()[i].name;
  }
}

TEST(CrossDomain, MissingSourceIsReported) {
  Tiny t;
  Encoder<double> enc(t.cfg, 1);
  std::map<std::string, Encoder<double>> spec{{"taxi", enc}};
  std::map<std::string, TaskData> targets{{"taxi", t.data("taxi", 2, 1, 1, 1)}};
  try {
    cross_domain_matrix(spec, enc, {"taxi", "hotel"}, targets, Task::dst, t.codec, FinetuneOptions{});
    FAIL() << "expected a ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("hotel"), std::string::npos);
  }
}

TEST(CrossDomain, IdenticalModelsGiveZeroDelta) {
  Tiny t;
  Encoder<double> enc(t.cfg, 1);
  std::map<std::string, Encoder<double>> spec{{"taxi", enc}, {"hotel", enc}};
  std::map<std::string, TaskData> targets{{"taxi", t.data("taxi", 2, 2, 2, 1)}, {"hotel", t.data("hotel", 2, 2, 2, 1)}};
  FinetuneOptions o;
  o.epochs = 1;
  o.lr = 1e-3;
  auto m = cross_domain_matrix(spec, enc, {"taxi", "hotel"}, targets, Task::dst, t.codec, o);
  ASSERT_EQ(m.delta.size(), 2u);
  for (const auto& row : m.delta)
    for (double d : row) EXPECT_DOUBLE_EQ(d, 0.0);
  EXPECT_NE(m.tsv().find("taxi"), std::string::npos);
}

TEST(MultiDomain, SelectCoveringAndMissingBank) {
  std::vector<Dialog> ds = {dialog("a", {"taxi"}), dialog("b", {"hotel", "train"}), dialog("c", {"attraction"})};
  auto sel = select_covering(ds, {"taxi", "train"});
  ASSERT_EQ(sel.size(), 2u);
  EXPECT_EQ(sel[0].id, "a");
  EXPECT_EQ(sel[1].id, "b");
  EXPECT_EQ(parse_variant("stack"), MultiDomainVariant::stack);
  EXPECT_EQ(to_string(MultiDomainVariant::full_ft), "full-ft");
  EXPECT_THROW(parse_variant("sum"), ValidationError);

  Tiny t;
  Encoder<double> enc(t.cfg, 1);
  AdapterConfig ac;
  ac.bottleneck = 4;
  MultiDomainInputs<double> in;
  in.base = &enc;
  in.banks.emplace("taxi", init_adapters<double>(t.cfg, ac, "taxi", 1));
  auto td = t.data("taxi", 2, 1, 1, 1);
  EXPECT_THROW(multi_domain_run<double>({"taxi", "hotel"}, MultiDomainVariant::fuse, in, Task::dst, td, t.codec,
                                        FinetuneOptions{}),
               ValidationError);
}

// -- full gradient suite -----------------------------------------------------

TEST(GradSuite, EveryGroupPasses) {
  GradSuiteOptions o;
  o.check.max_entries = 8;
  auto rep = run_grad_suite(o);
  for (const auto& g : {"encoder", "mlm", "rs-class", "rs-contrast", "adapters", "fusion", "dst", "rr"}) {
    ASSERT_TRUE(rep.group_passed.count(g)) << g;
    EXPECT_TRUE(rep.group_passed.at(g)) << g << " " << rep.max_rel_error.at(g);
  }
  EXPECT_TRUE(rep.passed());
  EXPECT_TRUE(rep.to_json().at("passed").get<bool>());
}

TEST(GradSuite, CorruptedTensorFailsItsGroup) {
  GradSuiteOptions o;
  o.check.max_entries = 8;
  o.check.corrupt_tensor = "rr.weight";
  auto rep = run_grad_suite(o);
  EXPECT_FALSE(rep.passed());
  EXPECT_FALSE(rep.group_passed.at("rr"));
  EXPECT_TRUE(rep.group_passed.at("dst"));
}
