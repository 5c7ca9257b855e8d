#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "distill_span/errors.hpp"
#include "distill_span/trainer.hpp"
#include "test_support.hpp"
#include "toy_fixture.hpp"

namespace distill_span {
namespace {

using testing::tiny_conv_config;
using testing::toy_dataset;

double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Column-wise cross-entropy written out directly.
double cross_entropy(const std::vector<double>& z, std::size_t label) {
  double mx = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (double v : z) s += std::exp(v - mx);
  return -(z[label] - mx - std::log(s));
}

Tensor<double> columns(const std::vector<double>& s, const std::vector<double>& e) {
  Tensor<double> z({s.size(), 2});
  for (std::size_t i = 0; i < s.size(); ++i) {
    z.at(i, 0) = s[i];
    z.at(i, 1) = e[i];
  }
  return z;
}

// ---- temperature softmax -------------------------------------------------------------

TEST(TemperatureSoftmax, ConstantLogitsAreUniform) {
  const std::vector<double> z(384, 1.7);
  for (double t : {0.5, 1.0, 3.5})
    for (double p : temperature_softmax(z, t)) EXPECT_NEAR(p, 1.0 / 384, 1e-15);
}

TEST(TemperatureSoftmax, TwoLogitsAtTemperatureTwo) {
  const std::vector<double> z{2.0, 0.0};
  const auto p = temperature_softmax(z, 2.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / (std::exp(1.0) + 1), 1e-15);
  EXPECT_NEAR(p[0], 0.7311, 1e-4);
  EXPECT_NEAR(p[1], 0.2689, 1e-4);
}

TEST(TemperatureSoftmax, HigherTemperatureIsFlatter) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto z = random_vec(50, seed, 2.0);
    EXPECT_GT(entropy(temperature_softmax(z, 10.0)), entropy(temperature_softmax(z, 1.0)));
  }
}

TEST(TemperatureSoftmax, EqualsSoftmaxOfScaledLogitsAndShiftInvariant) {
  const auto z = random_vec(30, 3, 3.0);
  const double t = 3.5;
  std::vector<double> scaled(z.size()), shifted(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    scaled[i] = z[i] / t;
    shifted[i] = z[i] + 12.5;
  }
  const auto a = temperature_softmax(z, t), b = temperature_softmax(scaled, 1.0),
             c = temperature_softmax(shifted, t);
  for (std::size_t i = 0; i < z.size(); ++i) {
    EXPECT_NEAR(a[i], b[i], 1e-15);
    EXPECT_NEAR(a[i], c[i], 1e-14);
  }
}

TEST(TemperatureSoftmax, NonPositiveTemperatureThrows) {
  const std::vector<double> z{1.0, 2.0};
  EXPECT_THROW(temperature_softmax(z, 0.0), ParameterError);
  EXPECT_THROW(temperature_softmax(z, -1.0), ParameterError);
}

// ---- distillation loss --------------------------------------------------------------

TEST(DistillationLoss, PerfectAgreementIsZero) {
  std::vector<double> s(20, 0.0), e(20, 0.0);
  s[4] = e[6] = 1000.0;
  TeacherTargets t{"f", s, e};
  for (double temp : {1.0, 3.5, 10.0}) {
    DistillationConfig cfg;
    cfg.temperature = temp;
    EXPECT_NEAR(distillation_loss(columns(s, e), 4, 6, &t, cfg).loss, 0.0, 1e-12);
  }
}

TEST(DistillationLoss, UniformDistributionsClosedForm) {
  const std::vector<double> zero(384, 0.0);
  TeacherTargets t{"f", zero, zero};
  DistillationConfig cfg;
  cfg.temperature = 1.0;
  const auto r = distillation_loss(columns(zero, zero), 17, 200, &t, cfg);
  EXPECT_NEAR(r.loss, std::log(384.0), 1e-12);
  EXPECT_NEAR(r.loss, 5.9506, 1e-4);
  EXPECT_EQ(r.clamped, 0u);
}

TEST(DistillationLoss, GradientMatchesFiniteDifferences) {
  for (auto mode : {HardTermTemperature::same_t, HardTermTemperature::unit_t}) {
    DistillationConfig cfg;
    cfg.hard_term = mode;
    const std::size_t n = 40;
    Tensor<double> z = columns(random_vec(n, 1, 2.0), random_vec(n, 2, 2.0));
    TeacherTargets t{"f", random_vec(n, 3, 3.0), random_vec(n, 4, 3.0)};
    const auto r = distillation_loss(z, 5, 9, &t, cfg);
    const auto num = testing::numeric_gradient(
        z, [&] { return distillation_loss(z, 5, 9, &t, cfg).loss; }, 1e-5);
    EXPECT_LE(testing::relative_error(r.grad, num), 1e-4);
  }
}

TEST(DistillationLoss, UnitTemperatureWithoutSoftTermIsWeightedCrossEntropy) {
  const std::size_t n = 64;
  const auto s = random_vec(n, 11, 2.0), e = random_vec(n, 12, 2.0);
  TeacherTargets t{"f", random_vec(n, 13), random_vec(n, 14)};
  DistillationConfig cfg;
  cfg.temperature = 1.0;
  cfg.soft_weight = 0.0;
  const double expected = 0.1 * 0.5 * (cross_entropy(s, 3) + cross_entropy(e, 40));
  EXPECT_NEAR(distillation_loss(columns(s, e), 3, 40, &t, cfg).loss, expected, 1e-12);
  cfg.temperature = 3.5;
  cfg.hard_term = HardTermTemperature::unit_t;
  EXPECT_NEAR(distillation_loss(columns(s, e), 3, 40, &t, cfg).loss, expected, 1e-12);
}

TEST(DistillationLoss, MissingTeacherIsHardLabelOnly) {
  const std::size_t n = 16;
  const auto s = random_vec(n, 21), e = random_vec(n, 22);
  DistillationConfig cfg;
  cfg.temperature = 1.0;
  EXPECT_NEAR(distillation_loss(columns(s, e), 2, 5, nullptr, cfg).loss,
              0.5 * (cross_entropy(s, 2) + cross_entropy(e, 5)), 1e-12);
}

TEST(DistillationLoss, SoftGradientScalesAsInverseSquareTemperature) {
  DistillationConfig cfg;
  cfg.hard_weight = 0.0;
  cfg.soft_weight = 1.0;
  for (std::uint64_t trial = 0; trial < 25; ++trial) {
    const std::size_t n = 30;
    auto zs = random_vec(n, 100 + trial, 0.05), ze = random_vec(n, 200 + trial, 0.05);
    auto ts = random_vec(n, 300 + trial, 0.05), te = random_vec(n, 400 + trial, 0.05);
    for (auto* v : {&zs, &ze, &ts, &te}) {
      const double mean = std::accumulate(v->begin(), v->end(), 0.0) / double(n);
      for (double& x : *v) x -= mean;
    }
    TeacherTargets t{"f", ts, te};
    auto unscaled_norm = [&](double temp) {
      cfg.temperature = temp;
      const auto g = distillation_loss(columns(zs, ze), 0, 0, &t, cfg).grad;
      double s = 0;
      for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * g[i];
      return std::sqrt(s) / (temp * temp);
    };
    const double ratio = unscaled_norm(2.0) / unscaled_norm(4.0);
    EXPECT_GE(ratio, 3.5);
    EXPECT_LE(ratio, 4.5);
  }
}

TEST(DistillationLoss, UnderflowedLogIsClampedAndCounted) {
  std::vector<double> s(8, 0.0), e(8, 0.0);
  s[0] = 2000.0;  // label 3 gets exactly zero probability
  DistillationConfig cfg;
  cfg.temperature = 1.0;
  const auto r = distillation_loss(columns(s, e), 3, 3, nullptr, cfg);
  EXPECT_EQ(r.clamped, 1u);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 0.5 * (-std::log(kLogFloor) + std::log(8.0)), 1e-9);
}

TEST(DistillationLoss, ShapeAndLabelErrors) {
  DistillationConfig cfg;
  Tensor<double> z({5, 2});
  TeacherTargets t{"f", std::vector<double>(4), std::vector<double>(4)};
  EXPECT_THROW(distillation_loss(z, 0, 0, &t, cfg), DimensionError);
  EXPECT_THROW(distillation_loss(z, 5, 0, nullptr, cfg), ParameterError);
  EXPECT_THROW(distillation_loss(Tensor<double>({5, 3}), 0, 0, nullptr, cfg), DimensionError);
}

// ---- schedule ---------------------------------------------------------------------------

ScheduleConfig schedule(ScheduleVariant v) {
  ScheduleConfig s;
  s.variant = v;
  s.num_train_examples = 1000;
  s.total_epochs = 6;
  s.batch_size = 60;  // 100 steps, 10 warmup
  return s;
}

TEST(Schedule, StepCountsUseIntegerDivision) {
  const auto s = schedule(ScheduleVariant::conv);
  EXPECT_EQ(s.num_train_step(), 100u);
  EXPECT_DOUBLE_EQ(s.num_warmup_steps(), 10.0);
  ScheduleConfig odd = s;
  odd.num_train_examples = 1001;
  odd.total_epochs = 1;
  odd.batch_size = 60;
  EXPECT_EQ(odd.num_train_step(), 16u);
  EXPECT_DOUBLE_EQ(odd.num_warmup_steps(), 1.6);
}

TEST(Schedule, HandValues) {
  const auto c = schedule(ScheduleVariant::conv), s = schedule(ScheduleVariant::small);
  EXPECT_EQ(learning_rate(0, c), 0.0);
  EXPECT_EQ(learning_rate(0, s), 0.0);
  EXPECT_NEAR(learning_rate(5, c), 0.5e-3, 1e-18);
  EXPECT_NEAR(learning_rate(10, c), 9.999e-4 * 0.81 + 1e-7, 1e-18);
  EXPECT_NEAR(learning_rate(10, c), 8.10019e-4, 1e-10);
  EXPECT_NEAR(learning_rate(100, c), 1e-7, 1e-18);
  EXPECT_NEAR(learning_rate(10, s), 2.7e-6, 1e-18);
  EXPECT_NEAR(learning_rate(100, s), 0.0, 1e-18);
}

TEST(Schedule, FractionalWarmupThreshold) {
  ScheduleConfig c;
  c.num_train_examples = 1001;
  c.total_epochs = 1;
  c.batch_size = 60;  // 16 steps, warmup 1.6
  EXPECT_NEAR(learning_rate(1, c), 1e-3 / 1.6, 1e-18);
  const double r = 1.0 - 2.0 / 16.0;
  EXPECT_NEAR(learning_rate(2, c), 9.999e-4 * r * r + 1e-7, 1e-18);
}

TEST(Schedule, ContinuousExceptAtWarmupAndNonIncreasingAfter) {
  for (auto v : {ScheduleVariant::conv, ScheduleVariant::small}) {
    auto c = schedule(v);
    c.num_train_examples = 100000;  // 10000 steps
    const std::size_t n = c.num_train_step(), w = 1000;
    const double peak = v == ScheduleVariant::conv ? 1e-3 : 3e-6;
    for (std::size_t s = 1; s <= n; ++s) {
      const double a = learning_rate(s - 1, c), b = learning_rate(s, c);
      if (s != w) {
        EXPECT_LE(std::abs(b - a), 2.0 * peak / 1000 + 1e-15) << s;
      }
      if (s > w) {
        EXPECT_LE(b, a) << s;
      }
    }
  }
}

// ---- Adam --------------------------------------------------------------------------

TEST(AdamTest, HandStepWithBiasCorrection) {
  Parameter<double> p("w", Tensor<double>({1}), true);
  p.grad[0] = 1.0;
  Adam<double> opt(AdamConfig{0.9, 0.999, 1e-6, 0.0});
  opt.step({&p}, 0.1);
  EXPECT_NEAR(p.value[0], -0.1 / (1.0 + 1e-6), 1e-15);
  EXPECT_NEAR(p.value[0], -0.0999999, 1e-7);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamTest, ZeroGradientWithoutDecayIsExactNoOp) {
  Parameter<double> p("w", testing::random_tensor({3, 4}, 1), true);
  const auto before = p.value.storage();
  Adam<double> opt(AdamConfig{0.9, 0.999, 1e-6, 0.0});
  for (int i = 0; i < 5; ++i) opt.step({&p}, 0.01);
  EXPECT_EQ(p.value.storage(), before);
}

TEST(AdamTest, DecayShrinksDecayedWeightsOnly) {
  Parameter<double> w("w", Tensor<double>({2}), true), b("b", Tensor<double>({2}), false);
  w.value.fill(0.5);
  b.value.fill(0.5);
  Adam<double> opt;
  opt.step({&w, &b}, 0.01);
  EXPECT_LT(w.value[0], 0.5);
  EXPECT_GT(w.value[0], 0.0);
  EXPECT_EQ(b.value[0], 0.5);
}

TEST(AdamTest, FrozenParametersUntouchedAndNegativeRateRejected) {
  Parameter<double> p("w", Tensor<double>({2}), true);
  p.trainable = false;
  p.grad.fill(1.0);
  Adam<double> opt;
  opt.step({&p}, 0.1);
  EXPECT_EQ(p.value[0], 0.0);
  EXPECT_THROW(opt.step({&p}, -1e-3), ParameterError);
}

TEST(AdamTest, StateRoundTripsThroughCheckpoint) {
  Parameter<double> a("w", testing::random_tensor({3}, 5), true);
  Parameter<double> b = a;
  Adam<double> o1, o2;
  for (int i = 0; i < 3; ++i) {
    a.grad = testing::random_tensor({3}, 10 + i);
    o1.step({&a}, 0.01);
  }
  Checkpoint ck;
  o1.save(ck);
  b.value = a.value;
  o2.load(ck, {&b});
  EXPECT_EQ(o2.steps(), 3u);
  a.grad = b.grad = testing::random_tensor({3}, 99);
  o1.step({&a}, 0.01);
  o2.step({&b}, 0.01);
  EXPECT_EQ(a.value.storage(), b.value.storage());
}

// ---- training step and loop ----------------------------------------------------------

std::vector<const WindowFeature*> pointers(const std::vector<WindowFeature>& w) {
  std::vector<const WindowFeature*> p;
  for (const auto& x : w) p.push_back(&x);
  return p;
}

ScheduleConfig toy_schedule(std::size_t examples, std::size_t epochs, std::size_t batch) {
  ScheduleConfig s;
  s.num_train_examples = examples;
  s.total_epochs = epochs;
  s.batch_size = batch;
  return s;
}

TEST(TrainStep, EmptyBatchRejected) {
  SpanModel<double> m(tiny_conv_config(), 1);
  Adam<double> opt;
  Rng rng(1);
  std::vector<const WindowFeature*> none;
  EXPECT_THROW(train_step<double>(none, nullptr, m, opt, toy_schedule(4, 10, 1), {}, rng),
               ParameterError);
}

TEST(TrainStep, DuplicatedExampleMatchesSingle) {
  const auto cfg = tiny_conv_config();
  const auto data = toy_dataset(cfg, 1, 3);
  SpanModel<double> a(cfg, 7), b(cfg, 7);
  Adam<double> oa, ob;
  Rng ra(1), rb(1);
  const auto sched = toy_schedule(8, 10, 1);
  const std::vector<const WindowFeature*> one{&data[0]}, two{&data[0], &data[0]};
  // Step 0 has zero learning rate; step 1 performs a real update.
  for (int i = 0; i < 2; ++i) {
    const auto r1 = train_step<double>(one, nullptr, a, oa, sched, {}, ra);
    const auto r2 = train_step<double>(two, nullptr, b, ob, sched, {}, rb);
    EXPECT_NEAR(r1.loss, r2.loss, 1e-12);
  }
  const auto pa = std::as_const(a).parameters(), pb = std::as_const(b).parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t k = 0; k < pa[i]->value.size(); ++k)
      ASSERT_NEAR(pa[i]->value[k], pb[i]->value[k], 1e-10) << pa[i]->name;
}

TEST(TrainStep, LossDecreasesOnToyFixture) {
  const auto cfg = tiny_conv_config();
  const auto data = toy_dataset(cfg, 8, 4);
  const auto batch = pointers(data);
  SpanModel<double> m(cfg, 11);
  Adam<double> opt;
  Rng rng(2);
  const auto sched = toy_schedule(8, 100, 8);  // 100 steps, warmup 10
  std::vector<double> losses;
  for (int i = 0; i < 51; ++i)
    losses.push_back(train_step<double>(batch, nullptr, m, opt, sched, {}, rng).loss);
  int down = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) down += losses[i] < losses[i - 1];
  EXPECT_GT(down, 40);
  EXPECT_LT(losses.back(), 0.9 * losses.front());
}

TEST(TrainStep, NonFiniteLossAbortsBeforeUpdate) {
  const auto cfg = tiny_conv_config();
  const auto data = toy_dataset(cfg, 2, 5);
  SpanModel<double> m(cfg, 3);
  m.head().b.value[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<double>> before;
  for (auto* p : m.parameters()) before.push_back(p->value.storage());
  Adam<double> opt;
  Rng rng(1);
  EXPECT_THROW(train_step<double>(pointers(data), nullptr, m, opt, toy_schedule(2, 10, 2), {}, rng),
               NonFiniteLossError);
  EXPECT_EQ(opt.steps(), 0u);
  const auto after = m.parameters();
  for (std::size_t i = 0; i < after.size(); ++i)
    if (after[i] != &m.head().b) {
      EXPECT_EQ(after[i]->value.storage(), before[i]) << after[i]->name;
    }
}

TEST(TrainStep, TeacherMapUsedAndMissingCounted) {
  const auto cfg = tiny_conv_config();
  const auto data = toy_dataset(cfg, 3, 6);
  TeacherMap teacher;
  teacher[data[0].feature_id] = {data[0].feature_id, random_vec(10, 1), random_vec(10, 2)};
  SpanModel<double> m(cfg, 3);
  Adam<double> opt;
  Rng rng(1);
  const auto r = train_step<double>(pointers(data), &teacher, m, opt, toy_schedule(3, 10, 3), {}, rng);
  EXPECT_EQ(r.missing_teacher, 2u);
}

TrainConfig loop_config(const std::filesystem::path& out) {
  TrainConfig c;
  c.model = tiny_conv_config();
  c.model.dropout_rate = 0.1;
  c.schedule = toy_schedule(0, 3, 3);
  c.seed = 42;
  c.checkpoint_every = 2;
  c.out_dir = out.string();
  return c;
}

TEST(TrainLoop, DeterministicTrajectoryAndCheckpoints) {
  const auto tmp = std::filesystem::temp_directory_path() / "distill_span_trainer_test";
  std::filesystem::remove_all(tmp);
  const auto cfg = tiny_conv_config();
  const auto data = toy_dataset(cfg, 7, 8);
  std::string logs[2];
  std::vector<std::vector<double>> finals;
  for (int run = 0; run < 2; ++run) {
    auto tc = loop_config(tmp / std::to_string(run));
    SpanModel<double> m(tc.model, tc.seed);
    std::ostringstream log;
    std::size_t epochs = 0;
    TrainHooks hooks;
    hooks.on_epoch = [&](std::size_t) { ++epochs; };
    const auto summary = train(m, data, nullptr, tc, &log, hooks);
    EXPECT_EQ(summary.steps, 7u * 3 / 3);
    EXPECT_EQ(epochs, 3u);
    logs[run] = log.str();
    std::vector<double> all;
    for (auto* p : m.parameters()) all.insert(all.end(), p->value.storage().begin(), p->value.storage().end());
    finals.push_back(all);
    EXPECT_TRUE(std::filesystem::exists(tmp / std::to_string(run) / "final.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(tmp / std::to_string(run) / "step-2.ckpt"));
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(finals[0], finals[1]);
  EXPECT_EQ(std::count(logs[0].begin(), logs[0].end(), '\n'), 7);
  std::filesystem::remove_all(tmp);
}

TEST(TrainConfigJson, RoundTripAndRejectsUnknownKeys) {
  TrainConfig c = loop_config("out");
  c.distillation.hard_term = HardTermTemperature::unit_t;
  c.distillation.temperature = 2.0;
  const auto j = to_json(c);
  const auto back = train_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  auto bad = j;
  bad["surprise"] = 1;
  EXPECT_THROW(train_config_from_json(bad), ConfigError);
}

}  // namespace
}  // namespace distill_span
