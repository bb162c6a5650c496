#include <gtest/gtest.h>

#include <random>

#include "dstod/adapters.hpp"
#include "dstod/error.hpp"
#include "dstod/neural/adam.hpp"
#include "dstod/neural/grad_check.hpp"
#include "test_util.hpp"

using namespace dstod;
using nn::Encoder;
using nn::EncoderConfig;
using nn::Matrix;

namespace {

EncoderConfig host(int layers = 2, int hidden = 16) {
  EncoderConfig c;
  c.layers = layers;
  c.hidden = hidden;
  c.heads = 4;
  c.ffn = 32;
  c.max_len = 16;
  c.vocab_size = 30;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

nn::EncodedSequence sample_seq() {
  nn::EncodedSequence s;
  s.ids = {2, 7, 8, 9, 3, 10, 11, 3};
  s.segments = {0, 0, 0, 0, 0, 1, 1, 1};
  s.mask = std::vector<int>(8, 1);
  return s;
}

template <typename T>
void randomize(AdapterBank<T>& bank, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for (auto& p : bank.params)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(d(rng));
}

AdapterConfig adapter(int m = 4) {
  AdapterConfig c;
  c.bottleneck = m;
  return c;
}

}  // namespace

TEST(AdapterForward, ZeroPathReturnsResidual) {
  AdapterParams p;
  p.down = Eigen::MatrixXd::Zero(2, 4);
  p.up = Eigen::MatrixXd::Random(4, 2);
  p.down_bias = Eigen::VectorXd::Zero(2);
  p.up_bias = Eigen::VectorXd::Zero(4);
  Eigen::VectorXd h = Eigen::VectorXd::Random(4), r = Eigen::VectorXd::Random(4);
  EXPECT_EQ(adapter_forward(p, h, r), r);
}

TEST(AdapterForward, IdentityPath) {
  AdapterParams p;
  p.down = Eigen::MatrixXd::Identity(4, 4);
  p.up = Eigen::MatrixXd::Identity(4, 4);
  Eigen::VectorXd h(4), r(4);
  h << 0.5, 0.0, 2.0, 1.25;
  r << -1.0, 3.0, 0.5, 0.0;
  EXPECT_EQ(adapter_forward(p, h, r), h + r);
}

TEST(AdapterForward, MatchesHandArithmetic) {
  Rng rng(5);
  std::normal_distribution<double> d;
  AdapterParams p;
  p.down.resize(4, 8);
  p.up.resize(8, 4);
  p.down_bias.resize(4);
  p.up_bias.resize(8);
  for (auto* m : {&p.down, &p.up})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = d(rng);
  for (auto* v : {&p.down_bias, &p.up_bias})
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)(i) = d(rng);
  Eigen::VectorXd h(8), r(8);
  for (int i = 0; i < 8; ++i) {
    h(i) = d(rng);
    r(i) = d(rng);
  }
  for (auto g : {Activation::relu, Activation::gelu}) {
    p.activation = g;
    double z[4];
    for (int i = 0; i < 4; ++i) {
      double acc = p.down_bias(i);
      for (int j = 0; j < 8; ++j) acc += p.down(i, j) * h(j);
      z[i] = g == Activation::relu ? (acc > 0 ? acc : 0.0) : 0.5 * acc * (1 + std::erf(acc / std::sqrt(2.0)));
    }
    auto out = adapter_forward(p, h, r);
    for (int i = 0; i < 8; ++i) {
      double acc = p.up_bias(i) + r(i);
      for (int j = 0; j < 4; ++j) acc += p.up(i, j) * z[j];
      EXPECT_NEAR(out(i), acc, 1e-12);
    }
  }
}

TEST(AdapterForward, DimensionMismatch) {
  AdapterParams p;
  p.down = Eigen::MatrixXd::Zero(2, 4);
  p.up = Eigen::MatrixXd::Zero(4, 2);
  EXPECT_THROW(adapter_forward(p, Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(4)), Error);
}

TEST(InitAdapters, ShapesAndDeterminism) {
  auto a = init_adapters<float>(host(), adapter(), "taxi", 1);
  auto b = init_adapters<float>(host(), adapter(), "taxi", 1);
  auto c = init_adapters<float>(host(), adapter(), "taxi", 2);
  EXPECT_EQ(a.params.at("layer.1.down.weight").value, b.params.at("layer.1.down.weight").value);
  EXPECT_NE(a.params.at("layer.1.down.weight").value, c.params.at("layer.1.down.weight").value);
  EXPECT_EQ(a.params.at("layer.0.up.weight").value.cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(a.layer_params(0).down.rows(), 4);
  EXPECT_EQ(a.layer_params(0).down.cols(), 16);
  EXPECT_EQ(a.params.count(), adapter_parameter_count(host(), adapter()));
}

TEST(InitAdapters, DownProjectionScale) {
  auto cfg = host(2, 64);
  auto a = init_adapters<double>(cfg, adapter(32), "taxi", 3);
  double sum2 = 0;
  std::size_t n = 0;
  for (int l = 0; l < 2; ++l) {
    const auto& v = a.params.at("layer." + std::to_string(l) + ".down.weight").value;
    sum2 += v.squaredNorm();
    n += static_cast<std::size_t>(v.size());
  }
  EXPECT_NEAR(std::sqrt(sum2 / static_cast<double>(n)), 1.0 / 8.0, 0.01);
}

TEST(InitAdapters, BottleneckMustBeSmallerThanHidden) {
  EXPECT_THROW(init_adapters<float>(host(), adapter(16), "taxi", 1), ValidationError);
  EXPECT_THROW(init_adapters<float>(host(), adapter(0), "taxi", 1), ValidationError);
}

TEST(Inject, IdentityAtInitIsExact) {
  Encoder<double> base(host(), 3);
  auto s = sample_seq();
  auto ref = base.forward(s);
  auto a = init_adapters<double>(host(), adapter(), "a", 1);
  auto b = init_adapters<double>(host(), adapter(), "b", 2);
  for (auto [banks, mode] : {std::pair{std::vector{a}, Compose::single}, std::pair{std::vector{a, b}, Compose::stack},
                             std::pair{std::vector{a, b}, Compose::fuse}}) {
    auto tr = inject(base, banks, mode).forward(s);
    EXPECT_EQ((tr.hidden - ref.hidden).cwiseAbs().maxCoeff(), 0.0) << nn::to_string(mode);
    EXPECT_EQ(tr.pooled, ref.pooled);
  }
}

TEST(Inject, StackWithZeroSecondAdapterCollapses) {
  Encoder<double> base(host(), 3);
  auto a = init_adapters<double>(host(), adapter(), "a", 1);
  randomize(a, 10);
  auto zero = init_adapters<double>(host(), adapter(), "z", 2);
  for (auto& p : zero.params) p.value.setZero();
  auto s = sample_seq();
  auto single = inject(base, {a}, Compose::single).forward(s);
  auto stacked = inject(base, {a, zero}, Compose::stack).forward(s);
  EXPECT_EQ((single.hidden - stacked.hidden).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Inject, StackIsOrderSensitive) {
  Encoder<double> base(host(), 3);
  auto a = init_adapters<double>(host(), adapter(), "a", 1);
  auto b = init_adapters<double>(host(), adapter(), "b", 2);
  randomize(a, 10);
  randomize(b, 11);
  auto s = sample_seq();
  auto ab = inject(base, {a, b}, Compose::stack).forward(s);
  auto ba = inject(base, {b, a}, Compose::stack).forward(s);
  EXPECT_GT((ab.hidden - ba.hidden).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Inject, OneHotFusionSelectsAdapter) {
  Encoder<double> base(host(), 3);
  auto a = init_adapters<double>(host(), adapter(), "a", 1);
  auto b = init_adapters<double>(host(), adapter(), "b", 2);
  randomize(a, 10);
  randomize(b, 11);
  auto s = sample_seq();
  auto only_a = inject(base, {a}, Compose::single).forward(s);
  auto fused = inject(base, {a, b}, Compose::fuse, FusionWeights(2, {40.0, 0.0})).forward(s);
  EXPECT_LE((only_a.hidden - fused.hidden).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Inject, UniformFusionIsMeanAndConvex) {
  Encoder<double> base(host(), 3);
  auto a = init_adapters<double>(host(), adapter(), "a", 1);
  auto b = init_adapters<double>(host(), adapter(), "b", 2);
  auto c = init_adapters<double>(host(), adapter(), "c", 3);
  randomize(a, 10);
  randomize(b, 11);
  randomize(c, 12);
  auto tr = inject(base, {a, b}, Compose::fuse).forward(sample_seq());
  for (const auto& lt : tr.layers) {
    Matrix<double> mean = 0.5 * (lt.adapters[0].out + lt.adapters[1].out);
    EXPECT_LE((lt.composed - mean).cwiseAbs().maxCoeff(), 1e-9);
  }
  auto tr3 = inject(base, {a, b, c}, Compose::fuse, FusionWeights(2, {0.3, -1.2, 2.0})).forward(sample_seq());
  for (const auto& lt : tr3.layers) {
    Matrix<double> lo = lt.adapters[0].out.cwiseMin(lt.adapters[1].out).cwiseMin(lt.adapters[2].out);
    Matrix<double> hi = lt.adapters[0].out.cwiseMax(lt.adapters[1].out).cwiseMax(lt.adapters[2].out);
    EXPECT_TRUE(((lt.composed - lo).array() >= -1e-12).all());
    EXPECT_TRUE(((hi - lt.composed).array() >= -1e-12).all());
  }
}

TEST(Inject, FuseWithOneBankIsSingle) {
  Encoder<float> base(host(), 3);
  auto m = inject(base, {init_adapters<float>(host(), adapter(), "a", 1)}, Compose::fuse);
  EXPECT_EQ(m.adapters().compose, Compose::single);
}

TEST(Inject, Errors) {
  Encoder<float> base(host(), 3);
  auto a = init_adapters<float>(host(), adapter(), "a", 1);
  EXPECT_THROW(inject<float>(base, {}, Compose::single), ValidationError);
  EXPECT_THROW(inject(base, {a, a}, Compose::stack), ValidationError);
  auto other = init_adapters<float>(host(3, 16), adapter(), "o", 1);
  EXPECT_THROW(inject(base, {other}, Compose::single), ValidationError);
  auto b = init_adapters<float>(host(), adapter(), "b", 1);
  EXPECT_THROW(inject(base, {a, b}, Compose::fuse, FusionWeights(2, {1.0})), ValidationError);
}

TEST(FreezeBase, BaseUnchangedAfterAdapterTraining) {
  Encoder<float> base(host(), 3);
  auto model = inject(base, {init_adapters<float>(host(), adapter(), "a", 1)}, Compose::single);
  freeze_base(model);
  auto snapshot = model.params();
  nn::Adam<float> adam(1e-2);
  auto s = sample_seq();
  for (int step = 0; step < 100; ++step) {
    model.params().zero_grad();
    auto tr = model.forward(s);
    model.backward(tr, {}, Matrix<float>::Ones(1, 16));
    adam.step({&model.params()});
  }
  bool adapters_moved = false;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& p = model.params()[i];
    if (is_adapter_tensor(p.name)) {
      adapters_moved = adapters_moved || p.value != snapshot[i].value;
    } else {
      EXPECT_EQ(p.value, snapshot[i].value) << p.name;
      EXPECT_EQ(p.grad.cwiseAbs().maxCoeff(), 0.0f) << p.name;
    }
  }
  EXPECT_TRUE(adapters_moved);
}

TEST(FreezeBase, TrainableCountFormula) {
  for (auto [layers, hidden, m] : {std::tuple{2, 16, 4}, std::tuple{2, 64, 4}, std::tuple{3, 32, 8}}) {
    auto cfg = host(layers, hidden);
    auto model = inject(Encoder<float>(cfg, 1), {init_adapters<float>(cfg, adapter(m), "a", 1)}, Compose::single);
    freeze_base(model);
    const std::size_t expected = static_cast<std::size_t>(layers) *
                                 (2u * static_cast<std::size_t>(m * hidden) + static_cast<std::size_t>(m + hidden));
    EXPECT_EQ(model.params().count(true), expected);
    EXPECT_EQ(adapter_parameter_count(cfg, adapter(m)), expected);
  }
}

TEST(FreezeBase, ProjectionRatioIsHOverM) {
  // On the projection terms alone (bias-free adapters) the full/adapter ratio
  // scales exactly with h/m.
  auto cfg = host(2, 64);
  const double full = static_cast<double>(parameter_count(cfg));
  double previous = 0;
  for (int m : {2, 4, 8, 16}) {
    auto ac = adapter(m);
    ac.bias = false;
    const double ratio = full / static_cast<double>(adapter_parameter_count(cfg, ac));
    EXPECT_DOUBLE_EQ(ratio / (64.0 / m), full / (2.0 * 2 * 64 * 64));
    if (previous > 0) EXPECT_DOUBLE_EQ(previous / ratio, 2.0);
    previous = ratio;
  }
}

TEST(Adapters, FiniteDifferenceWithFrozenBase) {
  Encoder<double> base(host(), 3);
  auto a = init_adapters<double>(host(), adapter(), "a", 1);
  auto b = init_adapters<double>(host(), adapter(), "b", 2);
  randomize(a, 10, 0.3);
  randomize(b, 11, 0.3);
  for (auto mode : {Compose::single, Compose::stack, Compose::fuse}) {
    auto model = mode == Compose::single ? inject(base, {a}, mode)
                                         : inject(base, {a, b}, mode, FusionWeights(2, {0.4, -0.3}));
    freeze_base(model);
    auto s = sample_seq();
    Matrix<double> w = Matrix<double>::Random(8, 16);
    auto loss = [&](bool grad) {
      auto tr = model.forward(s);
      if (grad) model.backward(tr, w, Matrix<double>::Ones(1, 16));
      return tr.hidden.cwiseProduct(w).sum() + tr.pooled.sum();
    };
    auto rows = nn::check_gradients("adapters", {&model.params()}, loss, {});
    for (const auto& r : rows) EXPECT_TRUE(r.passed) << nn::to_string(mode) << " " << r.tensor << " " << r.rel_error;
  }
}

TEST(Adapters, BiasFreeMode) {
  auto cfg = adapter();
  cfg.bias = false;
  auto bank = init_adapters<double>(host(), cfg, "a", 1);
  EXPECT_EQ(bank.params.size(), 4u);
  EXPECT_EQ(bank.params.count(), adapter_parameter_count(host(), cfg));
  auto model = inject(Encoder<double>(host(), 1), {bank}, Compose::single);
  EXPECT_NO_THROW(model.forward(sample_seq()));
}

TEST(Adapters, ExtractSaveLoadRoundTrip) {
  dstod::testing::TempDir dir;
  auto bank = init_adapters<float>(host(), adapter(), "taxi", 5);
  randomize(bank, 3);
  auto model = inject(Encoder<float>(host(), 1), {bank}, Compose::single);
  auto out = extract_bank(model, "taxi");
  for (std::size_t i = 0; i < bank.params.size(); ++i) EXPECT_EQ(out.params[i].value, bank.params[i].value);
  out.provenance = {{"objective", "rs-contrast"}};
  save_bank(dir.path() / "taxi", out, host());
  auto loaded = load_bank<float>(dir.path() / "taxi");
  EXPECT_EQ(loaded.domain, "taxi");
  EXPECT_EQ(loaded.provenance["objective"], "rs-contrast");
  for (std::size_t i = 0; i < bank.params.size(); ++i) EXPECT_EQ(loaded.params[i].value, bank.params[i].value);
  EXPECT_THROW(extract_bank(model, "hotel"), ValidationError);
}

TEST(Adapters, CheckpointRestoresComposition) {
  dstod::testing::TempDir dir;
  Encoder<float> base(host(), 3);
  auto a = init_adapters<float>(host(), adapter(), "a", 1);
  auto b = init_adapters<float>(host(), adapter(), "b", 2);
  randomize(a, 1);
  randomize(b, 2);
  auto model = inject(base, {a, b}, Compose::fuse, FusionWeights(2, {1.0, -1.0}));
  nn::save_checkpoint<float>(dir.path(), "encoder", nn::encoder_meta(model), {{"encoder", &model.params()}});
  auto m = nn::read_manifest(dir.path());
  auto restored = nn::restore_encoder<float>(m.meta, nn::load_group<float>(dir.path(), m, "encoder"));
  EXPECT_EQ(restored.adapters().compose, Compose::fuse);
  EXPECT_EQ(restored.forward(sample_seq()).pooled, model.forward(sample_seq()).pooled);
}
