// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "covt/error.hpp"
#include "covt/ops.hpp"
#include "covt/training.hpp"
#include "covt/verification.hpp"
#include "helpers.hpp"

using namespace covt;
using covt::test::bitwise_equal;
using covt::test::randn;

namespace {

void set_grad(Tensor& p, std::vector<double> g) {
  p.zero_grad();
  std::copy(g.begin(), g.end(), p.mutable_grad().begin());
}

Dataset tiny_set(std::size_t per_class = 4, std::uint64_t seed = 0) {
  return synth_dataset({per_class, 2, 16, 16, 0.1, seed});
}

TrainConfig tiny_train(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!bitwise_equal(a.entries()[i].second, b.entries()[i].second)) return false;
  return true;
}

}  // namespace

TEST(Sgd, MomentumClosedForm) {
  ParamStore ps;
  Tensor& p = ps.add("p", Tensor({1}, {1.0}));
  OptimizerState opt{{0.9, 0.0}, {}};
  const std::vector<double> expect{0.9, 0.71, 0.439};
  for (double e : expect) {
    set_grad(p, {1.0});
    sgd_step(ps, opt, 0.1);
    EXPECT_NEAR(p.data()[0], e, 1e-15);
  }
  EXPECT_NEAR(opt.velocity[0].second.data()[0], 2.71, 1e-15);
}

TEST(Sgd, CoastsOnVelocityWithZeroGradient) {
  ParamStore ps;
  Tensor& p = ps.add("p", Tensor({1}, {0.0}));
  OptimizerState opt{{0.5, 0.0}, {}};
  set_grad(p, {2.0});
  sgd_step(ps, opt, 1.0);
  EXPECT_EQ(p.data()[0], -2.0);
  set_grad(p, {0.0});
  sgd_step(ps, opt, 1.0);
  EXPECT_EQ(p.data()[0], -3.0);
  sgd_step(ps, opt, 1.0);
  EXPECT_EQ(p.data()[0], -3.5);
}

TEST(Sgd, WeightDecayAddsToGradient) {
  ParamStore ps;
  Tensor& p = ps.add("p", Tensor({2}, {2.0, -4.0}));
  OptimizerState opt{{0.0, 0.5}, {}};
  set_grad(p, {0.0, 0.0});
  sgd_step(ps, opt, 0.1);
  EXPECT_DOUBLE_EQ(p.data()[0], 1.9);
  EXPECT_DOUBLE_EQ(p.data()[1], -3.8);
}

TEST(Sgd, MissingGradientIsError) {
  ParamStore ps;
  ps.add("p", Tensor({1}, {1.0}));
  OptimizerState opt;
  EXPECT_THROW(sgd_step(ps, opt, 0.1), TrainingError);
}

TEST(Sgd, OneStepReducesLossForSmallLearningRates) {
  const Dataset data = tiny_set();
  const std::vector<std::size_t> idx{0, 1, 4, 5};
  const Tensor x = data.images(idx);
  const Tensor y = one_hot(data.labels(idx), 2);
  for (double lr : {1e-3, 1e-4}) {
    CovtModel m(ModelConfig::preset("covt-nano"), 1);
    double before = 0.0;
    {
      Tape tape;
      const Tensor loss = cross_entropy_soft(m.forward(x), y);
      before = loss.item();
      tape.backward(loss);
    }
    OptimizerState opt;
    sgd_step(m.params(), opt, lr);
    const double after = cross_entropy_soft(m.forward(x), y).item();
    EXPECT_LT(after, before) << "lr " << lr;
  }
}

TEST(Cosine, EndpointsAreExact) {
  const ScheduleConfig c{0.1, 1e-5, 1000, 0};
  EXPECT_EQ(cosine_lr(0, c), 0.1);
  EXPECT_EQ(cosine_lr(1000, c), 1e-5);
}

TEST(Cosine, MidpointValue) {
  EXPECT_NEAR(cosine_lr(1, {0.1, 1e-5, 2, 0}), 0.050005, 1e-15);
}

TEST(Cosine, MonotoneNonIncreasingOverTenThousandSteps) {
  const ScheduleConfig c{0.1, 1e-5, 10000, 0};
  double prev = cosine_lr(0, c);
  for (std::uint64_t t = 1; t <= 10000; ++t) {
    const double lr = cosine_lr(t, c);
    ASSERT_LE(lr, prev) << t;
    ASSERT_GE(lr, 1e-5);
    prev = lr;
  }
}

TEST(Cosine, MatchesFormula) {
  const ScheduleConfig c{0.1, 1e-5, 37, 0};
  for (std::uint64_t t = 1; t < 37; ++t) {
    const double ref = 1e-5 + (0.1 - 1e-5) * (1 + std::cos(std::numbers::pi * t / 37.0)) / 2;
    EXPECT_NEAR(cosine_lr(t, c), ref, 1e-16);
  }
}

TEST(Cosine, WarmupRampsLinearly) {
  const ScheduleConfig c{0.1, 1e-5, 100, 10};
  EXPECT_EQ(cosine_lr(0, c), 0.0);
  EXPECT_NEAR(cosine_lr(5, c), 0.05, 1e-15);
  EXPECT_EQ(cosine_lr(10, c), 0.1);
  EXPECT_EQ(cosine_lr(100, c), 1e-5);
}

TEST(Cosine, OutOfRangeAndBadConfig) {
  EXPECT_THROW(cosine_lr(11, {0.1, 1e-5, 10, 0}), ConfigError);
  EXPECT_THROW((ScheduleConfig{1e-5, 0.1, 10, 0}.validate()), ConfigError);
  EXPECT_THROW((ScheduleConfig{0.1, 1e-5, 0, 0}.validate()), ConfigError);
}

TEST(Mixup, BlendsImagesAndLabels) {
  const auto [x, y] = mixup_batch(Tensor({1, 2}, {1, 1}), Tensor({1, 2}, {3, 3}), Tensor({1, 2}, {1, 0}),
                                  Tensor({1, 2}, {0, 1}), 0.25);
  EXPECT_EQ(x.data()[0], 2.5);
  EXPECT_EQ(y.data()[0], 0.25);
  EXPECT_EQ(y.data()[1], 0.75);
}

TEST(Mixup, LambdaOneIsIdentity) {
  const Tensor x1 = randn({2, 3}, 1);
  const Tensor y1 = one_hot(std::vector<std::size_t>{0, 2}, 3);
  const auto [x, y] = mixup_batch(x1, randn({2, 3}, 2), y1, one_hot(std::vector<std::size_t>{1, 1}, 3), 1.0);
  EXPECT_TRUE(bitwise_equal(x, x1));
  EXPECT_TRUE(bitwise_equal(y, y1));
}

TEST(Mixup, MixedLabelsSumToOne) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const double lam = sample_mixup_lambda(0.8, rng);
    const auto [x, y] = mixup_batch(randn({3, 2}, 1), randn({3, 2}, 2), one_hot(std::vector<std::size_t>{0, 1, 2}, 4),
                                    one_hot(std::vector<std::size_t>{3, 3, 0}, 4), lam);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += y.at({r, k});
      EXPECT_NEAR(s, 1.0, 1e-15);
    }
  }
}

TEST(Mixup, LambdaFollowsSymmetricBeta) {
  std::mt19937_64 rng(5);
  const int n = 20000;
  double sum = 0.0;
  double sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double l = sample_mixup_lambda(0.8, rng);
    ASSERT_GE(l, 0.0);
    ASSERT_LE(l, 1.0);
    sum += l;
    sq += l * l;
  }
  const double var = 1.0 / (4.0 * (2 * 0.8 + 1));
  const double mean = sum / n;
  EXPECT_NEAR(mean, 0.5, 3.0 * std::sqrt(var / n));
  EXPECT_NEAR(sq / n - mean * mean, var, 0.005);
}

TEST(Mixup, InvalidLambdaAndAlpha) {
  EXPECT_THROW(mixup_batch(Tensor::zeros({1, 1}), Tensor::zeros({1, 1}), Tensor::zeros({1, 1}), Tensor::zeros({1, 1}), 1.5),
               ConfigError);
  EXPECT_THROW((MixupConfig{true, 0.0}.validate()), ConfigError);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  for (std::size_t k : {2u, 3u, 10u}) {
    const Tensor loss = cross_entropy_soft(Tensor::zeros({4, k}), one_hot(std::vector<std::size_t>{0, 1, 1, 0}, k));
    EXPECT_NEAR(loss.item(), std::log(static_cast<double>(k)), 1e-15);
  }
}

TEST(CrossEntropy, ConfidentCorrectPredictionIsNearZero) {
  const Tensor loss = cross_entropy_soft(Tensor({1, 2}, {20, 0}), Tensor({1, 2}, {1, 0}));
  EXPECT_LT(loss.item(), 1e-6);
  EXPECT_GT(loss.item(), 0.0);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  const auto r = run_gradcheck_suite("cross_entropy_soft", 0);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_LT(r[0].max_rel_error[0], 1e-5);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusLabelsOverBatch) {
  const Tensor logits = randn({3, 4}, 7).detach(true);
  const Tensor y = one_hot(std::vector<std::size_t>{0, 3, 2}, 4);
  {
    Tape tape;
    tape.backward(cross_entropy_soft(logits, y));
  }
  const Tensor p = softmax(logits.detach(), 1);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(logits.grad()[i], (p.data()[i] - y.data()[i]) / 3.0, 1e-15);
}

TEST(CrossEntropy, RejectsBadLabelRows) {
  EXPECT_THROW(cross_entropy_soft(Tensor::zeros({1, 2}), Tensor({1, 2}, {0.5, 0.4})), ShapeError);
  EXPECT_THROW(cross_entropy_soft(Tensor::zeros({1, 2}), Tensor({1, 2}, {1.5, -0.5})), ShapeError);
  EXPECT_THROW(cross_entropy_soft(Tensor::zeros({1, 2}), Tensor::zeros({1, 3})), ShapeError);
}

TEST(Evaluate, PerfectPredictions) {
  const auto r = topk_metrics(Tensor({3, 3}, {5, 0, 0, 0, 5, 0, 0, 0, 5}), std::vector<std::size_t>{0, 1, 2});
  EXPECT_EQ(r.top1, 100.0);
  EXPECT_EQ(r.top5, 100.0);
  EXPECT_EQ(r.count, 3u);
}

TEST(Evaluate, HandFixture) {
  const Tensor logits({6, 3}, {3, 1, 2, 1, 3, 2, 2, 1, 3, 1, 1, 1, 0, 5, 1, 0, 0, 9});
  const auto r = topk_metrics(logits, std::vector<std::size_t>{0, 1, 0, 2, 2, 2});
  EXPECT_EQ(r.top1, 50.0);
  EXPECT_EQ(r.top5, 100.0);
  const std::vector<std::vector<std::size_t>> confusion{{1, 0, 1}, {0, 1, 0}, {1, 1, 1}};
  EXPECT_EQ(r.confusion, confusion);
}

TEST(Evaluate, TopFiveClipsToClassCount) {
  const auto r = topk_metrics(Tensor({2, 2}, {1, 0, 1, 0}), std::vector<std::size_t>{1, 1});
  EXPECT_EQ(r.top1, 0.0);
  EXPECT_EQ(r.top5, 100.0);
}

TEST(Evaluate, TopFiveOfSixClasses) {
  // Label 5 ranks last of six.
  const auto r = topk_metrics(Tensor({1, 6}, {6, 5, 4, 3, 2, 1}), std::vector<std::size_t>{5});
  EXPECT_EQ(r.top5, 0.0);
}

TEST(Evaluate, ModelEvaluationCountsEverySample) {
  const Dataset data = tiny_set(5);
  const CovtModel m(ModelConfig::preset("covt-nano"), 2);
  const auto a = evaluate(m, data, 3);
  const auto b = evaluate(m, data, 64);
  EXPECT_EQ(a.count, 10u);
  EXPECT_EQ(a.top1, b.top1);
  EXPECT_EQ(a.confusion, b.confusion);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  CovtModel m(ModelConfig::preset("covt-nano"), 1);
  const ParamStore before = m.params().clone();
  TrainConfig c = tiny_train(1);
  c.lr_start = 0.0;
  c.lr_end = 0.0;
  train(m, tiny_set(), nullptr, c);
  EXPECT_TRUE(same_params(before, m.params()));
}

TEST(Train, SameSeedGivesIdenticalLogs) {
  std::vector<std::string> logs[2];
  for (auto& log : logs) {
    CovtModel m(ModelConfig::preset("covt-nano"), 1);
    const Dataset val = tiny_set(2, 9);
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochMetrics& e) { log.push_back(to_json_line(e)); };
    train(m, tiny_set(), &val, tiny_train(3), {}, hooks);
  }
  ASSERT_EQ(logs[0].size(), 3u);
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_NE(logs[0][0].find("\"val_top1\""), std::string::npos);
}

TEST(Train, FixedLambdaOneEqualsNoMixing) {
  CovtModel a(ModelConfig::preset("covt-nano"), 1);
  CovtModel b(ModelConfig::preset("covt-nano"), 1);
  TrainConfig c = tiny_train(2);
  train(a, tiny_set(), nullptr, c);
  c.fixed_lambda = 1.0;
  train(b, tiny_set(), nullptr, c);
  EXPECT_TRUE(same_params(a.params(), b.params()));
}

TEST(Train, MixupChangesTrajectory) {
  CovtModel a(ModelConfig::preset("covt-nano"), 1);
  CovtModel b(ModelConfig::preset("covt-nano"), 1);
  TrainConfig c = tiny_train(1);
  train(a, tiny_set(), nullptr, c);
  c.mixup.enabled = true;
  train(b, tiny_set(), nullptr, c);
  EXPECT_FALSE(same_params(a.params(), b.params()));
}

TEST(Train, NonFiniteLossAbortsWithContext) {
  CovtModel m(ModelConfig::preset("covt-nano"), 1);
  m.params().get("head.bias").mutable_data()[0] = std::nan("");
  try {
    train(m, tiny_set(), nullptr, tiny_train(1));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr 0.1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("grad-norm"), std::string::npos) << msg;
  }
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const Dataset data = tiny_set();
  CovtModel full(ModelConfig::preset("covt-nano"), 1);
  ParamStore mid_params;
  TrainState mid_state;
  TrainHooks hooks;
  hooks.on_state = [&](const TrainState& s) {
    if (s.epoch == 2) {
      mid_state = s;
      mid_params = full.params().clone();
    }
  };
  train(full, data, nullptr, tiny_train(4), {}, hooks);

  // Round-trip through the checkpoint encoding on the way.
  const Checkpoint ck = decode_checkpoint(encode_checkpoint({full.config(), std::move(mid_params), mid_state}));
  CovtModel resumed(ck.config, ck.params.clone());
  const TrainState end = train(resumed, data, nullptr, tiny_train(4), ck.state);
  EXPECT_EQ(end.epoch, 4u);
  EXPECT_EQ(end.step, 8u);
  EXPECT_TRUE(same_params(full.params(), resumed.params()));
}

TEST(Train, RejectsUndersizedDataAndClassMismatch) {
  CovtModel m(ModelConfig::preset("covt-nano"), 1);
  TrainConfig c = tiny_train(1);
  c.batch_size = 64;
  EXPECT_THROW(train(m, tiny_set(), nullptr, c), DataError);
  EXPECT_THROW(train(m, synth_dataset({4, 3, 16, 16, 0.1, 0}), nullptr, tiny_train(1)), DataError);
}

TEST(Train, MetricsJsonLineKeys) {
  EpochMetrics e;
  e.epoch = 2;
  e.lr_last = 0.5;
  e.train_loss = 0.25;
  e.train_top1 = 75.0;
  EXPECT_EQ(to_json_line(e),
            R"({"epoch":2,"lr_last":0.5,"train_loss":0.25,"train_top1":75.0,"val_top1":null,"val_top5":null,"wall_ms":0.0})");
}
