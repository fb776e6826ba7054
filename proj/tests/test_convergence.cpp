#include <gtest/gtest.h>

#include <cmath>
#include <optional>

#include "proxslim/convergence.hpp"
#include "proxslim/data.hpp"
#include "proxslim/errors.hpp"

namespace {

using namespace proxslim;

Hyperparams deterministic(double lambda, double beta, double alpha, int epochs) {
  Hyperparams hp;
  hp.lambda = lambda;
  hp.beta = beta;
  hp.epochs = epochs;
  hp.mode = BatchMode::kFullBatch;
  hp.schedule = AlphaSchedule::constant(alpha, epochs);
  return hp;
}

TEST(EvalF, PenaltyOnly) {
  const LinearObjective zero({0.0}, {0.0, 0.0});
  ModelState z = stub_state(1, 2);
  z.gamma = {1.0, 0.0};
  z.xi = {0.0, 0.0};
  EXPECT_DOUBLE_EQ(eval_F(zero, z, 1.0, 2.0), 1.0);
  z.xi = {1.0, 0.0};
  EXPECT_DOUBLE_EQ(eval_F(zero, z, 1.0, 2.0), 1.0);
  z.xi = {0.5, -0.5};
  EXPECT_DOUBLE_EQ(penalty_value(z, 1.0, 2.0), 1.0 + 0.25 + 0.25);
}

TEST(Lipschitz, QuadraticIsOneAndLinearIsZero) {
  const QuadraticObjective q({1.0, -1.0, 0.5}, {0.2, 0.3});
  const double L = estimate_lipschitz(q, stub_state(3, 2), 10, 1e-2, 4);
  EXPECT_NEAR(L, 1.0, 1e-8);
  const LinearObjective lin({1.0, -1.0, 0.5}, {0.2, 0.3});
  EXPECT_LT(estimate_lipschitz(lin, stub_state(3, 2), 10, 1e-2, 4), 1e-10);
}

TEST(SufficientDecrease, RequiresDeterministicMode) {
  std::vector<EpochDiagnostics> d(1);
  Hyperparams hp = deterministic(0.1, 1.0, 10.0, 1);
  EXPECT_NO_THROW(check_sufficient_decrease(d, hp));
  hp.mode = BatchMode::kStochastic;
  EXPECT_THROW(check_sufficient_decrease(d, hp), ModeError);
  hp.mode = BatchMode::kFullBatch;
  hp.momentum = 0.5;
  EXPECT_THROW(check_sufficient_decrease(d, hp), ModeError);
  hp.momentum = 0.0;
  hp.weight_decay = 1e-4;
  EXPECT_THROW(check_sufficient_decrease(d, hp), ModeError);
}

TEST(SufficientDecrease, FlagsOnlyRealIncreases) {
  std::vector<EpochDiagnostics> d(2);
  d[0].F_value = 1.0;
  d[0].decrease_lhs = -0.5;
  d[0].decrease_rhs = -0.4;
  d[1].F_value = 1.0;
  d[1].decrease_lhs = -0.3;
  d[1].decrease_rhs = -0.4;
  const auto r = check_sufficient_decrease(d, deterministic(0, 0, 10, 2));
  EXPECT_FALSE(r[0].violation);
  EXPECT_TRUE(r[1].violation);
  EXPECT_NEAR(r[1].residual, 0.1, 1e-15);
}

TEST(RelativeError, EqualStatesGiveZero) {
  const QuadraticObjective q({1.0}, {0.5, -0.5});
  const ModelState z = stub_state(1, 2);
  const RelativeErrorTerms t = relative_error_terms(q, z, z, 10.0, 1.0, 1.0);
  EXPECT_EQ(t.norm, 0.0);
  EXPECT_EQ(t.bound, 0.0);
}

TEST(RelativeError, UnchangedXiGivesZeroThirdBlock) {
  const QuadraticObjective q({1.0}, {0.5, -0.5});
  const ModelState a = stub_state(1, 2);
  ModelState b = a;
  b.w[0] += 0.1;
  b.gamma[1] -= 0.2;
  const RelativeErrorTerms t = relative_error_terms(q, a, b, 10.0, 3.0, 1.0);
  EXPECT_EQ(t.w3, (std::vector<double>{0.0, 0.0}));
  // Quadratic gradients differ by exactly the step, so w1 = (1 - alpha) dW.
  EXPECT_NEAR(t.w1[0], (1.0 - 10.0) * 0.1, 1e-14);
  EXPECT_NEAR(t.w2[1], (1.0 - 10.0) * -0.2, 1e-14);
  EXPECT_NEAR(t.bound, (30.0 + 2.0 + 3.0) * std::sqrt(0.01 + 0.04), 1e-13);
}

std::vector<EpochDiagnostics> stream(int n, double step, double growth) {
  std::vector<EpochDiagnostics> d(n);
  for (int i = 0; i < n; ++i) {
    d[i].epoch = i + 1;
    d[i].F_next = 2.0;
    d[i].step_norm_sq = step * step * std::pow(growth, 2 * i);
    d[i].grad_norm_surrogate = step * std::pow(growth, i);
    d[i].state_norm = 1.0 + i * (growth - 1.0);
  }
  return d;
}

TEST(Monitor, ConstantStreamConverges) {
  const auto d = stream(30, 0.0, 1.0);
  const ConvergenceVerdict v = critical_point_monitor(d, 10, 1e-6);
  EXPECT_TRUE(v.converged);
  EXPECT_EQ(v.first_epoch, 21);  // the trailing window
  EXPECT_EQ(v.limiting_F, 2.0);
  EXPECT_FALSE(v.norm_growing);
}

TEST(Monitor, DivergingStreamDoesNot) {
  const auto d = stream(30, 1e-3, 1.2);
  const ConvergenceVerdict v = critical_point_monitor(d, 10, 1e-6);
  EXPECT_FALSE(v.converged);
  EXPECT_EQ(v.first_epoch, 0);
  EXPECT_TRUE(v.norm_growing);
  EXPECT_GT(tail_step_fraction(d), 0.5);
}

TEST(FdCheck, LinearStubIsExact) {
  const LinearObjective lin({1.0, -2.0, 3.0}, {0.5, 0.25});
  const FdReport r = fd_gradient_check(lin, stub_state(3, 2), 20, 1);
  EXPECT_EQ(r.probes, 20u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

class SmallData : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticSpec s;
    s.classes = 3;
    s.per_class = 4;
    s.height = s.width = 8;
    data = generate_synthetic(s);
  }
  Dataset data;
};

TEST_F(SmallData, SmoothNetworkPassesFdCheck) {
  TinyVggOptions o;
  o.width1 = 3;
  o.width2 = 4;
  const Network net = tiny_vgg(data.image_shape(), 3, o);
  const NetworkObjective obj(net, data);
  const FdReport r = fd_gradient_check(obj, init_state(net, 5), 60, 2);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_EQ(r.rejected, 0u);
}

TEST_F(SmallData, ReluNetworkPassesWithKinkRejection) {
  TinyVggOptions o;
  o.width1 = 3;
  o.width2 = 4;
  o.activation = ActivationKind::kRelu;
  o.pool = PoolKind::kMax;
  const Network net = tiny_vgg(data.image_shape(), 3, o);
  const NetworkObjective obj(net, data);
  FdOptions fo;
  fo.reject_kinks = true;
  const FdReport r = fd_gradient_check(obj, init_state(net, 5), 60, 2, fo);
  EXPECT_EQ(r.probes, 60u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(XiOptimality, ProximalStepIsNotBeaten) {
  XiUpdateRecord r;
  r.alpha = 10.0;
  r.beta = 100.0;
  r.lambda = 0.5;
  r.xi_prev = {0.3, -0.01, 0.002, 1.0};
  r.gamma_next = {0.25, 0.001, -0.003, 0.9};
  const double d = r.alpha + r.beta;
  for (std::size_t i = 0; i < r.xi_prev.size(); ++i) {
    const double v = (r.alpha * r.xi_prev[i] + r.beta * r.gamma_next[i]) / d;
    const double t = r.lambda / d;
    r.xi_next.push_back(std::abs(v) <= t ? 0.0 : v - std::copysign(t, v));
  }
  const XiOptimalityReport ok = check_xi_optimality(r, 2000, 3);
  EXPECT_EQ(ok.beaten_by, 0u);
  EXPECT_EQ(ok.chosen, xi_subproblem_value(r, r.xi_next));

  XiUpdateRecord wrong = r;
  wrong.xi_next[0] += 0.05;
  EXPECT_GT(check_xi_optimality(wrong, 2000, 3).beaten_by, 0u);
}

TEST(Certify, QuadraticStubReachesTheProximalFixedPoint) {
  const std::vector<double> a{0.4, -1.2}, b{0.8, 0.05, -0.3, -0.02};
  const QuadraticObjective q(a, b);
  const double lambda = 0.1, beta = 1.0;
  const Hyperparams hp = deterministic(lambda, beta, 10.0, 2000);
  CertifyOptions co;
  co.lipschitz = 1.0;
  co.min_epochs = 50;
  co.max_epochs = 2000;
  co.tol_step = 1e-10;
  co.tol_w = 1e-9;
  int seen = 0;
  const CertifyResult res =
      certify_run(q, stub_state(2, 4), hp, co, [&](const EpochDiagnostics&) { ++seen; });
  EXPECT_EQ(res.decrease_violations, 0u);
  EXPECT_EQ(res.relerr_violations, 0u);
  EXPECT_TRUE(res.w3_exact);
  ASSERT_TRUE(res.verdict.converged);
  EXPECT_EQ(static_cast<std::size_t>(seen), res.diagnostics.size());

  // Stationarity of F: W = a, gamma - b + beta (gamma - xi) = 0, xi = S(gamma, lambda/beta).
  const ModelState& z = res.final_state;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(z.w[i], a[i], 1e-8);
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_NEAR(z.gamma[i] - b[i] + beta * (z.gamma[i] - z.xi[i]), 0.0, 1e-8);
    const double g = z.gamma[i], t = lambda / beta;
    const double s = std::abs(g) <= t ? 0.0 : g - std::copysign(t, g);
    EXPECT_NEAR(z.xi[i], s, 1e-8);
  }
  // |b_i| <= lambda: channels 1 and 3 end exactly at zero.
  EXPECT_EQ(z.xi[1], 0.0);
  EXPECT_EQ(z.xi[3], 0.0);
}

}  // namespace
