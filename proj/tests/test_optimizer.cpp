#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <set>

#include "proxslim/convergence.hpp"
#include "proxslim/data.hpp"
#include "proxslim/errors.hpp"
#include "proxslim/optimizer.hpp"

namespace {

using namespace proxslim;

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

Hyperparams full_batch(double lambda, double beta, double alpha, int epochs) {
  Hyperparams hp;
  hp.lambda = lambda;
  hp.beta = beta;
  hp.epochs = epochs;
  hp.mode = BatchMode::kFullBatch;
  hp.schedule = AlphaSchedule::constant(alpha, epochs);
  return hp;
}

// Independent soft-threshold written from the scalar definition.
double shrink(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

TEST(InitState, ScalesAreExactlyHalf) {
  const Network net = tiny_vgg(InputShape{3, 16, 16}, 4);
  for (std::uint64_t seed : {0ull, 1ull, 12345ull}) {
    const ModelState z = init_state(net, seed);
    EXPECT_EQ(*std::min_element(z.gamma.begin(), z.gamma.end()), 0.5);
    EXPECT_EQ(*std::max_element(z.gamma.begin(), z.gamma.end()), 0.5);
    for (double x : z.xi) {
      EXPECT_GE(x, 0.47);
      EXPECT_LE(x, 0.50);
    }
    EXPECT_EQ(z.w.size(), net.weight_count());
    EXPECT_EQ(z.running_var, std::vector<double>(net.channel_count(), 1.0));
  }
}

TEST(InitState, SeedDeterminesState) {
  const Network net = tiny_vgg(InputShape{3, 16, 16}, 4);
  EXPECT_EQ(init_state(net, 9), init_state(net, 9));
  EXPECT_NE(init_state(net, 9).w, init_state(net, 10).w);
  EXPECT_NE(init_state(net, 9).xi, init_state(net, 10).xi);
}

TEST(SoftThreshold, Examples) {
  EXPECT_NEAR(soft_threshold(std::vector<double>{0.5}, 0.2)[0], 0.3, 1e-16);
  const auto z = soft_threshold(std::vector<double>{-0.05}, 0.1);
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(soft_threshold(std::vector<double>{-0.5, 0.0, 0.7}, 0.5),
            (std::vector<double>{0.0, 0.0, 0.7 - 0.5}));
  EXPECT_THROW(soft_threshold(std::vector<double>{1.0}, -1e-9), ContractError);
}

TEST(SoftThreshold, MatchesScalarDefinitionAndIsNonexpansive) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0), ut(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> x(7), y(7);
    for (double& v : x) v = u(rng);
    for (double& v : y) v = u(rng);
    const double t = ut(rng);
    const auto sx = soft_threshold(x, t), sy = soft_threshold(y, t);
    double dx = 0, ds = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_EQ(sx[i], shrink(x[i], t));
      if (std::abs(x[i]) <= t) EXPECT_EQ(sx[i], 0.0);
      dx += (x[i] - y[i]) * (x[i] - y[i]);
      ds += (sx[i] - sy[i]) * (sx[i] - sy[i]);
    }
    EXPECT_LE(ds, dx * (1 + 1e-15));
  }
}

TEST(AlphaSchedule, StepSchedule) {
  const AlphaSchedule s = AlphaSchedule::step(10.0, 160);
  EXPECT_EQ(s.to_string(), "1-80:10,81-120:100,121-160:1000");
  EXPECT_EQ(s.alpha_at(1), 10.0);
  EXPECT_EQ(s.alpha_at(81), 100.0);
  EXPECT_EQ(s.alpha_at(160), 1000.0);
  EXPECT_EQ(AlphaSchedule::parse(s.to_string()), s);
  EXPECT_NO_THROW(s.validate(160));
  EXPECT_THROW(s.validate(161), ContractError);
  EXPECT_THROW(s.alpha_at(161), ContractError);
}

TEST(AlphaSchedule, RejectsBadSchedules) {
  EXPECT_THROW(AlphaSchedule::parse("1-5:10,7-9:20").validate(9), ContractError);
  EXPECT_THROW(AlphaSchedule::parse("1-5:0").validate(5), ContractError);
  EXPECT_THROW(AlphaSchedule::parse("1-5"), ContractError);
  EXPECT_THROW(AlphaSchedule::parse(""), ContractError);
}

TEST(Hyperparams, Validation) {
  Hyperparams hp;
  EXPECT_NO_THROW(hp.validate());
  hp.lambda = -1;
  EXPECT_THROW(hp.validate(), ContractError);
  hp.lambda = 0;
  hp.beta = 0;
  EXPECT_NO_THROW(hp.validate());
  hp.momentum = 1.0;
  EXPECT_THROW(hp.validate(), ContractError);
  hp.momentum = 0;
  hp.batch_size = 0;
  EXPECT_THROW(hp.validate(), ContractError);
}

TEST(EpochBatches, FullBatchIsOneOrderedBatch) {
  Hyperparams hp;
  hp.mode = BatchMode::kFullBatch;
  std::mt19937_64 rng(1);
  const auto b = epoch_batches(7, hp, rng);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0], (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
}

TEST(EpochBatches, StochasticBatchesPartitionTheSamples) {
  Hyperparams hp;
  hp.batch_size = 4;
  std::mt19937_64 a(5), b(5);
  const auto x = epoch_batches(13, hp, a);
  EXPECT_EQ(x, epoch_batches(13, hp, b));
  std::multiset<std::size_t> seen;
  for (const auto& batch : x) {
    EXPECT_GE(batch.size(), 2u);
    seen.insert(batch.begin(), batch.end());
  }
  EXPECT_EQ(seen.size(), 13u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 13u);
  EXPECT_EQ(x.size(), 3u);  // 4 + 4 + 5: the lone last sample joins the previous batch
}

TEST(ProxEpoch, WeightedAverageFixedPoint) {
  // Quadratic stub centred on gamma = v: zero gamma-gradient at gamma = v.
  const std::vector<double> v{0.3, -0.7, 1.1};
  const QuadraticObjective obj({1.0, 2.0}, v);
  ModelState z = stub_state(2, 3);
  z.gamma = v;
  z.xi = v;
  OptimizerState opt;
  const ModelState next = prox_ns_epoch(obj, z, full_batch(0.0, 100.0, 10.0, 1), 1, opt);
  EXPECT_EQ(next.gamma, v);
}

TEST(ProxEpoch, ThresholdIsLambdaOverAlphaPlusBeta) {
  const double lambda = 0.0045, alpha = 10.0, beta = 100.0;
  const double t = lambda / (alpha + beta);
  EXPECT_NEAR(t, 4.0909090909090909e-5, 1e-19);

  // With gamma centred at its current value and xi == gamma, the xi update
  // sees exactly (alpha xi + beta gamma)/(alpha + beta) = gamma.
  const std::vector<double> g{4.0e-5, -4.0e-5, 4.2e-5, -1.0, 0.0};
  const QuadraticObjective obj({0.0}, g);
  ModelState z = stub_state(1, g.size());
  z.gamma = g;
  z.xi = g;
  OptimizerState opt;
  std::vector<XiUpdateRecord> recs;
  EpochHooks hooks;
  hooks.on_xi_update = [&](const XiUpdateRecord& r) { recs.push_back(r); };
  const ModelState next = prox_ns_epoch(obj, z, full_batch(lambda, beta, alpha, 1), 1, opt, hooks);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(next.xi[0], 0.0);
  EXPECT_EQ(next.xi[1], 0.0);
  EXPECT_GT(next.xi[2], 0.0);
  EXPECT_NEAR(next.xi[2], 4.2e-5 - t, 1e-18);
  EXPECT_NEAR(next.xi[3], -1.0 + t, 1e-15);
  EXPECT_EQ(next.xi[4], 0.0);
}

TEST(ProxEpoch, ZerosAreFixed) {
  const QuadraticObjective obj({0.5}, {0.0, 0.0});
  ModelState z = stub_state(1, 2);
  z.gamma = {0.0, 0.0};
  z.xi = {0.0, 0.0};
  OptimizerState opt;
  const ModelState next = prox_ns_epoch(obj, z, full_batch(0.0045, 100.0, 10.0, 1), 1, opt);
  EXPECT_EQ(next.xi, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(next.gamma, (std::vector<double>{0.0, 0.0}));
}

class TinyProblem : public ::testing::Test {
 protected:
  void SetUp() override {
    spec.per_class = 6;
    spec.height = spec.width = 8;
    data = generate_synthetic(spec);
    TinyVggOptions o;
    o.width1 = 4;
    o.width2 = 6;
    net.emplace(tiny_vgg(data.image_shape(), 4, o));
    obj.emplace(*net, data);
    z0 = init_state(*net, 2);
  }
  SyntheticSpec spec;
  Dataset data;
  std::optional<Network> net;
  std::optional<NetworkObjective> obj;
  ModelState z0;
};

TEST_F(TinyProblem, ExactZeroPersistenceAndXiUpdateOracle) {
  Hyperparams hp;
  hp.lambda = 3.0;
  hp.beta = 20.0;
  hp.epochs = 12;
  hp.batch_size = 8;
  hp.schedule = AlphaSchedule::step(10.0, hp.epochs);
  OptimizerState opt(4);
  std::size_t zeros_seen = 0;
  EpochHooks hooks;
  hooks.on_xi_update = [&](const XiUpdateRecord& r) {
    const double denom = r.alpha + r.beta;
    for (std::size_t i = 0; i < r.xi_next.size(); ++i) {
      const double v = (r.alpha * r.xi_prev[i] + r.beta * r.gamma_next[i]) / denom;
      EXPECT_EQ(r.xi_next[i], shrink(v, r.lambda / denom)) << "epoch " << r.epoch << " i " << i;
      if (std::abs(r.alpha * r.xi_prev[i] + r.beta * r.gamma_next[i]) / denom <=
          r.lambda / denom) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(std::abs(r.xi_next[i])), 0u);
        ++zeros_seen;
      }
    }
  };
  ModelState z = z0;
  for (int t = 1; t <= hp.epochs; ++t) z = prox_ns_epoch(*obj, z, hp, t, opt, hooks);
  EXPECT_GT(zeros_seen, 0u);
  EXPECT_GT(count_exact_zeros(z.xi), 0u);
}

TEST_F(TinyProblem, PerBatchXiModeUpdatesEveryBatch) {
  Hyperparams hp;
  hp.epochs = 1;
  hp.batch_size = 8;
  hp.schedule = AlphaSchedule::constant(10.0, 1);
  hp.xi_update = XiUpdate::kPerBatch;
  OptimizerState opt(1);
  std::size_t updates = 0;
  EpochHooks hooks;
  hooks.on_xi_update = [&](const XiUpdateRecord&) { ++updates; };
  EpochStats stats;
  prox_ns_epoch(*obj, z0, hp, 1, opt, hooks, &stats);
  EXPECT_EQ(updates, stats.batches);
  EXPECT_EQ(stats.batches, 3u);
}

TEST_F(TinyProblem, ZeroLambdaAndBetaIsPlainGradientDescentBitwise) {
  const double alpha = 25.0;
  const Hyperparams hp = full_batch(0.0, 0.0, alpha, 5);
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);

  ModelState prox = z0, ref = z0;
  OptimizerState opt;
  for (int t = 1; t <= 5; ++t) {
    prox = prox_ns_epoch(*obj, prox, hp, t, opt);
    const LossEvaluation e = evaluate_batch(*net, ref, data, all, true);
    for (std::size_t i = 0; i < ref.w.size(); ++i) ref.w[i] -= (1.0 / alpha) * e.grad_w[i];
    for (std::size_t i = 0; i < ref.gamma.size(); ++i) ref.gamma[i] -= (1.0 / alpha) * e.grad_gamma[i];
    ASSERT_TRUE(bitwise_equal(prox.w, ref.w)) << "epoch " << t;
    ASSERT_TRUE(bitwise_equal(prox.gamma, ref.gamma)) << "epoch " << t;
  }
}

TEST_F(TinyProblem, SameSeedSameRun) {
  Hyperparams hp;
  hp.epochs = 3;
  hp.batch_size = 5;
  hp.lambda = 0.2;
  hp.schedule = AlphaSchedule::step(10.0, 3);
  auto run = [&] {
    OptimizerState opt(17);
    ModelState z = z0;
    for (int t = 1; t <= 3; ++t) z = prox_ns_epoch(*obj, z, hp, t, opt);
    return z;
  };
  const ModelState a = run(), b = run();
  EXPECT_TRUE(bitwise_equal(a.w, b.w));
  EXPECT_TRUE(bitwise_equal(a.gamma, b.gamma));
  EXPECT_TRUE(bitwise_equal(a.xi, b.xi));
  EXPECT_TRUE(bitwise_equal(a.running_var, b.running_var));
}

TEST(Momentum, PenaltyTermStaysOutOfTheVelocity) {
  const std::vector<double> a{1.0, -2.0}, b{0.8, -0.3, 0.1};
  const QuadraticObjective obj(a, b);
  Hyperparams hp = full_batch(0.01, 5.0, 4.0, 6);
  hp.momentum = 0.9;
  ModelState z = stub_state(2, 3);
  z.xi = {0.2, 0.0, -0.4};
  ModelState ref = z;
  std::vector<double> vw(2, 0.0), vg(3, 0.0);
  OptimizerState opt;
  for (int t = 1; t <= 6; ++t) {
    z = prox_ns_epoch(obj, z, hp, t, opt);
    const double alpha = 4.0, beta = 5.0;
    for (std::size_t i = 0; i < 2; ++i) {
      vw[i] = 0.9 * vw[i] + (ref.w[i] - a[i]);
      ref.w[i] -= (1.0 / alpha) * vw[i];
    }
    for (std::size_t i = 0; i < 3; ++i) {
      vg[i] = 0.9 * vg[i] + (ref.gamma[i] - b[i]);
      ref.gamma[i] -= (1.0 / (alpha + beta)) * (vg[i] + beta * (ref.gamma[i] - ref.xi[i]));
    }
    for (std::size_t i = 0; i < 3; ++i)
      ref.xi[i] = shrink((alpha * ref.xi[i] + beta * ref.gamma[i]) / (alpha + beta),
                         0.01 / (alpha + beta));
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(z.w[i], ref.w[i], 1e-15);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(z.gamma[i], ref.gamma[i], 1e-15);
      EXPECT_NEAR(z.xi[i], ref.xi[i], 1e-15);
    }
  }
}

TEST(Subgradient, Examples) {
  // gamma_0 = 0 with zero loss gradient stays 0; gamma_1 = 0.3 moves by lambda * delta.
  const QuadraticObjective obj({0.0}, {0.0, 0.3});
  ModelState z = stub_state(1, 2);
  z.w = {0.0};
  z.gamma = {0.0, 0.3};
  OptimizerState opt;
  const ModelState next = subgradient_ns_epoch(obj, z, full_batch(0.1, 0.0, 1.0, 1), 1, opt);
  EXPECT_EQ(next.gamma[0], 0.0);
  EXPECT_NEAR(next.gamma[1], 0.2, 1e-16);
  EXPECT_EQ(next.xi, z.xi);
}

TEST(Subgradient, ZeroLambdaIsGradientDescent) {
  const std::vector<double> a{1.0, 2.0}, b{-0.5};
  const QuadraticObjective obj(a, b);
  ModelState z = stub_state(2, 1);
  OptimizerState o1, o2;
  const Hyperparams hp = full_batch(0.0, 0.0, 3.0, 1);
  const ModelState s = subgradient_ns_epoch(obj, z, hp, 1, o1);
  const ModelState g = sgd_epoch(obj, z, hp, 1, o2);
  EXPECT_TRUE(bitwise_equal(s.w, g.w));
  EXPECT_TRUE(bitwise_equal(s.gamma, g.gamma));
}

class NanObjective final : public Objective {
 public:
  std::size_t sample_count() const override { return 4; }
  std::size_t weight_count() const override { return 1; }
  std::size_t channel_count() const override { return 1; }
  LossEvaluation evaluate(const ModelState&, std::span<const std::size_t>, bool) const override {
    LossEvaluation e;
    e.loss = 1.0;
    e.grad_w = {std::numeric_limits<double>::quiet_NaN()};
    e.grad_gamma = {0.0};
    return e;
  }
};

TEST(ProxEpoch, NonFiniteGradientCarriesLocation) {
  const NanObjective obj;
  Hyperparams hp = full_batch(0.1, 1.0, 10.0, 3);
  hp.mode = BatchMode::kStochastic;
  hp.batch_size = 2;
  OptimizerState opt;
  try {
    prox_ns_epoch(obj, stub_state(1, 1), hp, 3, opt);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.epoch(), 3);
    EXPECT_EQ(e.batch(), 0);
  }
}

TEST(FineTune, ZeroEpochsIsIdentity) {
  const QuadraticObjective obj({1.0}, {2.0});
  const ModelState z = stub_state(1, 1);
  OptimizerState opt;
  EXPECT_EQ(fine_tune(obj, z, full_batch(0.1, 1.0, 10.0, 1), 0, opt), z);
}

TEST_F(TinyProblem, FineTuneDescendsWithoutSparsityTerms) {
  const Hyperparams hp = full_batch(5.0, 100.0, 50.0, 4);
  OptimizerState opt;
  ModelState z = z0;
  z.xi.assign(z.xi.size(), 0.0);  // a penalty toward xi would pull gamma to zero
  std::vector<double> losses{loss_full_batch(*net, z, data)};
  int calls = 0;
  const ModelState out = fine_tune(*obj, z, hp, 4, opt, [&](int t, const ModelState& s, const EpochStats&) {
    EXPECT_EQ(t, ++calls);
    losses.push_back(loss_full_batch(*net, s, data));
  });
  EXPECT_EQ(calls, 4);
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LT(losses[i], losses[i - 1]);
  EXPECT_EQ(out.xi, z.xi);
}

TEST(AdoptSupport, CopiesXiZerosIntoGamma) {
  ModelState z = stub_state(1, 4);
  z.gamma = {1e-6, -2e-7, 0.4, 0.0};
  z.xi = {0.0, 0.0, 0.3, 0.0};
  EXPECT_EQ(adopt_xi_support(z), 3u);
  EXPECT_EQ(z.gamma, (std::vector<double>{0.0, 0.0, 0.4, 0.0}));
}

}  // namespace
