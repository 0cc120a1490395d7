#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "flowsurrogate/error.hpp"
#include "flowsurrogate/flow.hpp"
#include "flowsurrogate/losses.hpp"
#include "flowsurrogate/metrics.hpp"
#include "flowsurrogate/optim.hpp"
#include "flowsurrogate/training.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace flowsurrogate;
using testing_support::random_tensor;

namespace {

// Small simulated dataset on an 8x8 grid, laid out like the real one.
SurrogateData tiny_data(std::size_t samples, std::uint64_t seed) {
  SimConfig sim;
  sim.grid = GridSpec{8, 8, 10.0};
  for (double d : {20.0, 40.0, 60.0}) sim.snapshot_times.push_back(d * kSecondsPerDay);
  sim.total_time = sim.snapshot_times.back();
  GrfSampler sampler(sim.grid, GrfParams{});
  SurrogateData data;
  data.inputs = Tensor<float>({samples, 1, 8, 8});
  data.times = {0.1f, 0.2f, 0.3f};
  data.outputs = Tensor<float>({samples, 3, 3, 8, 8});
  for (std::size_t n = 0; n < samples; ++n) {
    const auto k = sampler.sample(seed + n);
    for (std::size_t i = 0; i < 64; ++i) data.inputs[n * 64 + i] = static_cast<float>(k.log_values[i]);
    const auto snaps = simulate(k, sim);
    for (std::size_t j = 0; j < 3; ++j) {
      const std::size_t base = (n * 3 + j) * 3 * 64;
      for (std::size_t i = 0; i < 64; ++i) {
        data.outputs[base + i] = static_cast<float>(snaps[j].rescaled_pressure[i]);
        data.outputs[base + 64 + i] = static_cast<float>(snaps[j].saturation[i]);
        data.outputs[base + 128 + i] = static_cast<float>(snaps[j].mask[i]);
      }
    }
  }
  return data;
}

TrainConfig tiny_train(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

bool same_parameters(const NetworkState<float>& a, const NetworkState<float>& b) {
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (a.params[i].value != b.params[i].value) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------- losses

TEST(MseLoss, TrivialValues) {
  auto y = random_tensor<double>({3, 2, 50, 50}, 1, 0.0, 1.0);
  EXPECT_EQ(mse_loss(y, y).value, 0.0);
  auto shifted = y;
  for (auto& v : shifted.values()) v += 0.1;
  EXPECT_NEAR(mse_loss(shifted, y).value, 50.0, 1e-9);
}

TEST(MseLoss, MatchesScalarLoop) {
  auto p = random_tensor<double>({4, 2, 6, 5}, 2);
  auto y = random_tensor<double>({4, 2, 6, 5}, 3);
  double ref = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double l = 0.0;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 5; ++j) l += std::pow(p(n, c, i, j) - y(n, c, i, j), 2);
    ref += l / 4.0;
  }
  const auto r = mse_loss(p, y);
  EXPECT_NEAR(r.value, ref, 1e-12);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(r.grad[i], 2.0 * (p[i] - y[i]) / 4.0, 1e-15);
  EXPECT_THROW(mse_loss(p, random_tensor<double>({4, 2, 6, 4}, 3)), ShapeError);
}

TEST(BceLoss, UniformProbabilityGivesLog2) {
  Tensor<double> half({2, 1, 7, 9}, 0.5);
  auto mask = random_tensor<double>({2, 1, 7, 9}, 4, 0.0, 1.0);
  for (auto& v : mask.values()) v = v > 0.5 ? 1.0 : 0.0;
  EXPECT_NEAR(bce_loss(half, mask).value, std::log(2.0), 1e-12);
}

TEST(BceLoss, PerfectPredictionIsNearZero) {
  Tensor<double> mask({1, 1, 4, 4});
  for (std::size_t i = 0; i < 8; ++i) mask[i] = 1.0;
  const double v = bce_loss(mask, mask).value;
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, -std::log(1.0 - kProbabilityClamp) + 1e-12);
}

TEST(BceLoss, MatchesScalarLoopAndDifferences) {
  auto p = random_tensor<double>({3, 1, 5, 4}, 5, 0.02, 0.98);
  auto z = random_tensor<double>({3, 1, 5, 4}, 6, 0.0, 1.0);
  for (auto& v : z.values()) v = v > 0.4 ? 1.0 : 0.0;
  double ref = 0.0;
  for (std::size_t n = 0; n < 3; ++n) {
    double l = 0.0;
    for (std::size_t k = 0; k < 20; ++k) {
      const double q = p[n * 20 + k], t = z[n * 20 + k];
      l += t * std::log(q) + (1.0 - t) * std::log(1.0 - q);
    }
    ref += -l / 20.0 / 3.0;
  }
  const auto r = bce_loss(p, z);
  EXPECT_NEAR(r.value, ref, 1e-12);
  const auto entries = testing_support::all_entries(p.size());
  const auto numeric = testing_support::numeric_gradient(p, entries, 1e-7, [&] { return bce_loss(p, z).value; });
  EXPECT_LE(testing_support::max_relative_error(testing_support::pick(r.grad, entries), numeric), 1e-6);
}

TEST(BceLoss, ClampKeepsLossFinite) {
  Tensor<double> p({1, 1, 1, 2}, std::vector<double>{0.0, 1.0});
  Tensor<double> z({1, 1, 1, 2}, std::vector<double>{1.0, 0.0});
  const auto r = bce_loss(p, z);
  EXPECT_NEAR(r.value, -std::log(kProbabilityClamp), 1e-9);
  for (double g : r.grad.values()) EXPECT_TRUE(std::isfinite(g));
}

// ---------------------------------------------------------------- Adam

namespace {

NetworkState<double> single_parameter(std::vector<double> values) {
  NetworkState<double> s;
  const std::size_t n = values.size();
  s.params.push_back({"theta", Tensor<double>({n}, std::move(values)), Tensor<double>({n})});
  return s;
}

}  // namespace

TEST(Adam, ZeroGradientKeepsParameters) {
  auto s = single_parameter({1.0, -2.0, 3.0});
  auto adam = AdamState<double>::init(s);
  const auto before = s.params[0].value;
  adam_step(s, adam, AdamOptions{});
  EXPECT_EQ(s.params[0].value, before);
  EXPECT_EQ(adam.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto s = single_parameter({0.5, 0.5, 0.5, 0.5});
  s.params[0].grad = Tensor<double>({4}, std::vector<double>{3.0, -0.01, 250.0, -7.0});
  auto adam = AdamState<double>::init(s);
  AdamOptions o;
  o.learning_rate = 1e-2;
  adam_step(s, adam, o);
  for (std::size_t i = 0; i < 4; ++i) {
    const double moved = 0.5 - s.params[0].value[i];
    const double sign = s.params[0].grad[i] > 0 ? 1.0 : -1.0;
    EXPECT_NEAR(moved / (sign * o.learning_rate), 1.0, 1e-6);
  }
}

TEST(Adam, QuadraticBowlMatchesReferenceRecursion) {
  const std::vector<double> centre = {1.0, -3.0, 0.25};
  const std::vector<double> curvature = {1.0, 10.0, 0.1};
  auto s = single_parameter({0.0, 0.0, 0.0});
  auto adam = AdamState<double>::init(s);
  AdamOptions o;
  o.learning_rate = 0.1;

  std::vector<double> theta(3, 0.0), m(3, 0.0), v(3, 0.0);
  for (int step = 1; step <= 10; ++step) {
    for (std::size_t i = 0; i < 3; ++i) s.params[0].grad[i] = 2.0 * curvature[i] * (s.params[0].value[i] - centre[i]);
    adam_step(s, adam, o);
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = 2.0 * curvature[i] * (theta[i] - centre[i]);
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, step));
      const double vh = v[i] / (1.0 - std::pow(0.999, step));
      theta[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(s.params[0].value[i], theta[i], 1e-6) << "step " << step;
    }
  }
}

TEST(WeightDecay, ShrinksParametersWithoutDataGradient) {
  auto s = single_parameter({1.0, -2.0, 0.5});
  const double before = s.squared_norm();
  const double penalty = add_weight_decay(s, 5e-4);
  EXPECT_NEAR(penalty, 0.5 * 5e-4 * before, 1e-15);
  EXPECT_NEAR(s.params[0].grad[1], -2.0 * 5e-4, 1e-18);
  auto adam = AdamState<double>::init(s);
  adam_step(s, adam, AdamOptions{});
  EXPECT_LT(s.squared_norm(), before);
}

// ---------------------------------------------------------------- scheduler

namespace {

// Independent statement of the plateau rule, tracking drops by epoch.
std::vector<std::size_t> reference_drops(const std::vector<double>& trace, std::size_t patience, double min_delta) {
  std::vector<std::size_t> drops;
  double best = 1e300;
  std::size_t since = 0;
  for (std::size_t e = 0; e < trace.size(); ++e) {
    if (best - trace[e] > min_delta) {
      best = trace[e];
      since = 0;
      continue;
    }
    if (++since == patience) {
      drops.push_back(e);
      since = 0;
    }
  }
  return drops;
}

}  // namespace

TEST(PlateauScheduler, DecreasingMetricKeepsRate) {
  PlateauScheduler s(1e-3, PlateauOptions{});
  for (int e = 0; e < 100; ++e) EXPECT_EQ(s.step(10.0 - 0.01 * e), 1e-3);
}

TEST(PlateauScheduler, FlatMetricDropsOneDecade) {
  PlateauOptions o;
  PlateauScheduler s(1e-3, o);
  for (std::size_t e = 0; e <= o.patience; ++e) s.step(1.0);
  EXPECT_NEAR(s.learning_rate(), 1e-4, 1e-18);
}

TEST(PlateauScheduler, NeverBelowMinimum) {
  PlateauOptions o;
  o.patience = 1;
  o.min_learning_rate = 1e-5;
  PlateauScheduler s(1e-3, o);
  for (int e = 0; e < 20; ++e) s.step(1.0);
  EXPECT_EQ(s.learning_rate(), 1e-5);
}

TEST(PlateauScheduler, NoisyTraceMatchesReference) {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> noise(0.0, 0.02);
  std::vector<double> trace;
  for (int e = 0; e < 200; ++e) trace.push_back(1.0 / (1.0 + 0.05 * e) + noise(rng));
  PlateauOptions o;
  o.patience = 10;
  o.min_delta = 1e-4;
  o.min_learning_rate = 1e-12;
  PlateauScheduler s(1e-3, o);
  std::vector<std::size_t> drops;
  double lr = s.learning_rate();
  for (std::size_t e = 0; e < trace.size(); ++e) {
    const double next = s.step(trace[e]);
    if (next < lr) drops.push_back(e);
    lr = next;
  }
  const auto expected = reference_drops(trace, o.patience, o.min_delta);
  EXPECT_FALSE(expected.empty());
  EXPECT_EQ(drops, expected);
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, HandComputedValues) {
  Tensor<double> y({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 9});
  Tensor<double> p({3, 2}, std::vector<double>{1, 3, 2, 4, 5, 7});
  const auto m = r2_rmse(p, y);
  ASSERT_TRUE(m.r2.has_value());
  EXPECT_NEAR(*m.r2, 1.0 - 6.0 / 34.0, 1e-10);
  EXPECT_NEAR(m.rmse, std::sqrt(2.0), 1e-10);
  EXPECT_EQ(m.samples, 3u);
}

TEST(Metrics, IdentityAndMeanPredictor) {
  auto y = random_tensor<double>({10, 2, 4, 4}, 7);
  const auto self = r2_rmse(y, y);
  EXPECT_EQ(*self.r2, 1.0);
  EXPECT_EQ(self.rmse, 0.0);
  Tensor<double> mean(y.shape());
  const std::size_t len = 32;
  for (std::size_t i = 0; i < len; ++i) {
    double s = 0.0;
    for (std::size_t n = 0; n < 10; ++n) s += y[n * len + i];
    for (std::size_t n = 0; n < 10; ++n) mean[n * len + i] = s / 10.0;
  }
  EXPECT_NEAR(*r2_rmse(mean, y).r2, 0.0, 1e-12);
}

TEST(Metrics, ConstantTargetsHaveNoR2) {
  Tensor<double> y({4, 3}, 0.7);
  EXPECT_FALSE(r2_rmse(y, y).r2.has_value());
}

TEST(Metrics, StreamingMatchesBatch) {
  auto y = random_tensor<double>({12, 5}, 8);
  auto p = random_tensor<double>({12, 5}, 9);
  MetricAccumulator acc;
  for (std::size_t n = 0; n < 12; ++n) acc.add_sample(p.data() + 5 * n, y.data() + 5 * n, 5);
  const auto a = acc.result(), b = r2_rmse(p, y);
  EXPECT_NEAR(*a.r2, *b.r2, 1e-14);
  EXPECT_NEAR(a.rmse, b.rmse, 1e-14);
}

TEST(Metrics, MaskIou) {
  Tensor<double> a({1, 4}, std::vector<double>{1, 1, 0, 0});
  Tensor<double> b({1, 4}, std::vector<double>{0, 1, 1, 0});
  EXPECT_NEAR(mask_iou(a, b), 1.0 / 3.0, 1e-15);
  Tensor<double> empty({1, 4});
  EXPECT_EQ(mask_iou(empty, empty), 1.0);
  EXPECT_EQ(mask_iou(a, a), 1.0);
}

// ---------------------------------------------------------------- objective

TEST(Objective, ComponentsAddUp) {
  DenseEncoderDecoder<double> net(testing_support::tiny_network(), 3);
  const auto p = testing_support::tiny_problem(testing_support::tiny_network(), 4);
  net.state().zero_grad();
  const auto v = objective_and_gradient<double>(net, p.x, p.times, p.targets, 0.01, 5e-4, Mode::train);
  EXPECT_NEAR(v.total, v.mse + 0.01 * v.bce + v.decay, 1e-12);
  EXPECT_NEAR(v.decay, 0.5 * 5e-4 * net.state().squared_norm(), 1e-12);
  EXPECT_GT(v.bce, 0.0);
}

// ---------------------------------------------------------------- trainer

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_ = new SurrogateData(tiny_data(8, 100));
    test_ = new SurrogateData(tiny_data(4, 200));
  }
  static void TearDownTestSuite() {
    delete train_;
    delete test_;
  }
  static SurrogateData* train_;
  static SurrogateData* test_;
};

SurrogateData* TrainerTest::train_ = nullptr;
SurrogateData* TrainerTest::test_ = nullptr;

TEST_F(TrainerTest, DataLayout) {
  EXPECT_NO_THROW(train_->validate());
  EXPECT_EQ(train_->records(), 24u);
  Tensor<float> x, y;
  std::vector<float> t;
  const std::vector<std::size_t> pick = {7};
  train_->gather(pick, x, t, y);
  EXPECT_EQ(t[0], train_->times[1]);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(x[i], train_->inputs[2 * 64 + i]);
  for (std::size_t i = 0; i < 192; ++i) EXPECT_EQ(y[i], train_->outputs[7 * 192 + i]);
  const auto kept = train_->select_times({0, 2});
  EXPECT_EQ(kept.records(), 16u);
  EXPECT_EQ(kept.times[1], train_->times[2]);
}

TEST_F(TrainerTest, EpochOrderIsSeededPermutation) {
  auto a = epoch_order(24, 5, 1);
  EXPECT_EQ(a, epoch_order(24, 5, 1));
  EXPECT_NE(a, epoch_order(24, 5, 2));
  EXPECT_NE(a, epoch_order(24, 6, 1));
  std::sort(a.begin(), a.end());
  std::vector<std::size_t> iota(24);
  std::iota(iota.begin(), iota.end(), std::size_t{0});
  EXPECT_EQ(a, iota);
}

TEST_F(TrainerTest, StepCountsPerMode) {
  for (auto mode : {TrainMode::two_stage, TrainMode::mse_only}) {
    DenseEncoderDecoder<float> net(testing_support::tiny_network(), 1);
    auto cfg = tiny_train(mode);
    cfg.batch_size = 5;  // 24 records -> 5 batches, the last one short
    Trainer trainer(net, cfg);
    trainer.run(*train_, nullptr);
    const std::size_t per_batch = mode == TrainMode::two_stage ? 2 : 1;
    EXPECT_EQ(trainer.optimizer_steps(), 2 * 5 * per_batch);
    EXPECT_EQ(trainer.record().epochs.size(), 2u);
  }
}

TEST_F(TrainerTest, SmokeRunReducesRmse) {
  for (auto mode : {TrainMode::two_stage, TrainMode::mse_only}) {
    DenseEncoderDecoder<float> net(testing_support::tiny_network(), 2);
    const double before = evaluate(net, *train_).rmse;
    auto cfg = tiny_train(mode);
    cfg.learning_rate = 1e-2;
    Trainer(net, cfg).run(*train_, nullptr);
    EXPECT_LT(evaluate(net, *train_).rmse, before) << to_string(mode);
  }
}

TEST_F(TrainerTest, ZeroBceWeightEqualsDoubleMseSteps) {
  DenseEncoderDecoder<float> a(testing_support::tiny_network(), 3);
  auto b = a.converted<float>();
  auto cfg = tiny_train(TrainMode::two_stage);
  cfg.epochs = 1;
  cfg.bce_weight = 0.0;
  Trainer(a, cfg).run(*train_, nullptr);

  auto adam = AdamState<float>::init(b.state());
  const AdamOptions o{cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8};
  const auto order = epoch_order(train_->records(), cfg.seed, 1);
  Tensor<float> x, y;
  std::vector<float> t;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    train_->gather(std::span(order).subspan(start, cfg.batch_size), x, t, y);
    for (int stage = 0; stage < 2; ++stage) {
      b.state().zero_grad();
      objective_and_gradient<float>(b, x, t, y, 0.0, cfg.weight_decay, Mode::train);
      adam_step(b.state(), adam, o);
    }
  }
  EXPECT_TRUE(same_parameters(a.state(), b.state()));
}

TEST_F(TrainerTest, DeterministicRecord) {
  auto run = [&] {
    DenseEncoderDecoder<float> net(testing_support::tiny_network(), 4);
    return train_two_stage(net, *train_, test_, tiny_train(TrainMode::two_stage));
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  for (const auto& e : a.epochs) {
    EXPECT_TRUE(std::isfinite(e.test_rmse));
    EXPECT_GT(e.mse_loss, 0.0);
    EXPECT_GT(e.weighted_bce_loss, 0.0);
    EXPECT_EQ(e.learning_rate, 1e-3);
  }
}

TEST_F(TrainerTest, ResumeMatchesUninterruptedRun) {
  auto cfg = tiny_train(TrainMode::two_stage);
  cfg.epochs = 3;
  DenseEncoderDecoder<float> full(testing_support::tiny_network(), 5);
  Trainer straight(full, cfg);
  straight.run(*train_, test_);

  DenseEncoderDecoder<float> first(testing_support::tiny_network(), 5);
  auto part = cfg;
  part.epochs = 2;
  Trainer head(first, part);
  head.run(*train_, test_);
  const Checkpoint ckpt = head.to_checkpoint();

  DenseEncoderDecoder<float> second(testing_support::tiny_network(), 99);
  Trainer tail(second, cfg);
  tail.restore(ckpt);
  EXPECT_EQ(tail.epochs_done(), 2u);
  tail.run(*train_, test_);
  EXPECT_EQ(tail.record(), straight.record());
  EXPECT_EQ(tail.optimizer_steps(), straight.optimizer_steps());
  EXPECT_TRUE(same_parameters(second.state(), full.state()));

  Trainer wrong_mode(second, tiny_train(TrainMode::mse_only));
  EXPECT_THROW(wrong_mode.restore(ckpt), DataError);
}

TEST_F(TrainerTest, NonFiniteLossAborts) {
  DenseEncoderDecoder<float> net(testing_support::tiny_network(), 6);
  net.state().params[0].value[0] = std::nanf("");
  Trainer trainer(net, tiny_train(TrainMode::two_stage));
  try {
    trainer.run_epoch(*train_, nullptr);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 1"), std::string::npos) << e.what();
  }
}

TEST(TrainRecord, CsvRoundTrip) {
  TrainRecord r;
  r.epochs.push_back({1, 1.25, std::nan(""), 3.5, 0.001, 1e-3});
  r.epochs.push_back({2, 1.0 / 3.0, 0.7, 2.0, 0.002, 1e-4});
  std::stringstream ss;
  r.write_csv(ss);
  EXPECT_EQ(TrainRecord::read_csv(ss), r);
  std::stringstream bad("epoch,foo\n");
  EXPECT_THROW(TrainRecord::read_csv(bad), DataError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.bce_weight = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_train_mode(to_string(TrainMode::mse_only)), TrainMode::mse_only);
  EXPECT_THROW(parse_train_mode("sgd"), ConfigError);
}
