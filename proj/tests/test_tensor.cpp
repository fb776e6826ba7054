#include <gtest/gtest.h>

#include <cmath>

#include "proxslim/autodiff.hpp"
#include "proxslim/errors.hpp"
#include "support.hpp"

namespace {

using namespace proxslim;
using testing_support::max_rel_diff;
using testing_support::numeric_gradient;
using testing_support::random_tensor;

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::from_rows({{1, 2}, {3}}), ShapeError);
  EXPECT_THROW(Tensor({2}).item(), ShapeError);
  EXPECT_THROW(Tensor({2, 3}).reshaped({4}), ShapeError);
}

TEST(Tensor, SizeMatchesShape) {
  const Tensor t({2, 3, 4}, 1.5);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(shape_size(t.shape()), t.size());
  EXPECT_EQ(t.reshaped({6, 4}).shape(), (Shape{6, 4}));
  EXPECT_EQ(shape_string({2, 3}), "[2,3]");
}

TEST(Tensor, FiniteChecks) {
  Tensor t({3}, 0.0);
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(require_finite(t, "probe"), NumericError);
  Tape tape;
  EXPECT_THROW(tape.leaf(t), NumericError);
}

TEST(Ops, MatmulIdentity) {
  Tape t;
  const Var a = t.leaf(Tensor::from_rows({{1, 2}, {3, 4}}));
  const Var i = t.leaf(Tensor::from_rows({{1, 0}, {0, 1}}));
  const Tensor& r = t.value(ops::matmul(t, a, i));
  EXPECT_EQ(r.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<double>(r.values().begin(), r.values().end()),
            (std::vector<double>{1, 2, 3, 4}));
}

TEST(Ops, BroadcastBiasOntoZeros) {
  Tape t;
  const Var x = t.leaf(Tensor({2, 2}, 0.0));
  const Var b = t.leaf(Tensor({2}, std::vector<double>{1, -1}));
  const Tensor& r = t.value(ops::row_add(t, x, b));
  EXPECT_EQ(std::vector<double>(r.values().begin(), r.values().end()),
            (std::vector<double>{1, -1, 1, -1}));
}

TEST(Ops, ConvOfOnesCountsWindow) {
  Tape t;
  const Var x = t.leaf(Tensor({1, 1, 3, 3}, 1.0));
  const Var w = t.leaf(Tensor({1, 1, 2, 2}, 1.0));
  const Tensor& r = t.value(ops::conv2d(t, x, w, {1, 0}));
  ASSERT_EQ(r.shape(), (Shape{1, 1, 2, 2}));
  for (double v : r.values()) EXPECT_EQ(v, 4.0);
}

TEST(Ops, ShapeMismatchIsDescriptive) {
  Tape t;
  const Var a = t.leaf(Tensor({2, 3}));
  const Var b = t.leaf(Tensor({2, 3}));
  try {
    ops::matmul(t, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
  EXPECT_THROW(ops::add(t, a, t.leaf(Tensor({3, 2}))), ShapeError);
  EXPECT_THROW(ops::conv2d(t, t.leaf(Tensor({1, 2, 4, 4})), t.leaf(Tensor({1, 3, 3, 3})), {1, 0}),
               ShapeError);
}

TEST(Ops, DomainErrors) {
  Tape t;
  const Var x = t.leaf(Tensor({2}, std::vector<double>{1.0, -1.0}));
  EXPECT_THROW(ops::log(t, x), NumericError);
  EXPECT_THROW(ops::pow_scalar(t, x, 0.5), NumericError);
  EXPECT_THROW(ops::softplus(t, x, 0.0), ContractError);
  const std::vector<std::size_t> bad{0, 5};
  EXPECT_THROW(ops::cross_entropy(t, t.leaf(Tensor({2, 3})), bad), ContractError);
}

TEST(Backward, SumGivesOnes) {
  Tape t;
  const Var x = t.leaf(Tensor({3}, std::vector<double>{0.3, -2.0, 7.0}));
  const Gradients g = t.backward(ops::sum(t, x));
  for (double v : g[x].values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNorm) {
  Tape t;
  const Var x = t.leaf(Tensor({2}, std::vector<double>{1.0, -2.0}));
  const Gradients g = t.backward(ops::scale(t, ops::sum(t, ops::square(t, x)), 0.5));
  EXPECT_EQ(g[x][0], 1.0);
  EXPECT_EQ(g[x][1], -2.0);
}

TEST(Backward, SoftplusSlopeAtZeroIsHalf) {
  Tape t;
  const Var x = t.leaf(Tensor::scalar(0.0));
  const Gradients g = t.backward(ops::sum(t, ops::softplus(t, x, 1.0)));
  EXPECT_DOUBLE_EQ(g[x][0], 0.5);
}

TEST(Backward, UnusedSlotsGetZeros) {
  Tape t;
  const Var x = t.leaf(Tensor({2}, 1.0));
  const Var unused = t.leaf(Tensor({3}, 5.0));
  const Gradients g = t.backward(ops::sum(t, ops::exp(t, x)));
  ASSERT_EQ(g[unused].size(), 3u);
  for (double v : g[unused].values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, LossMustBeScalar) {
  Tape t;
  const Var x = t.leaf(Tensor({2}, 1.0));
  EXPECT_THROW(t.backward(x), ContractError);
  Tape off(false);
  const Var y = off.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(off.backward(y), ContractError);
}

// Every primitive against central differences on random inputs. The output is
// contracted with fixed random weights so each coordinate of the Jacobian
// enters the check.
struct PrimitiveCase {
  const char* name;
  std::vector<Tensor> inputs;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

double contracted(const PrimitiveCase& c, const std::vector<Tensor>& inputs, Tensor* weights,
                  std::vector<Tensor>* grads) {
  Tape t;
  std::vector<Var> leaves;
  for (const Tensor& x : inputs) leaves.push_back(t.leaf(x));
  const Var out = c.build(t, leaves);
  if (weights->empty()) {
    std::mt19937_64 rng(99);
    *weights = random_tensor(t.value(out).shape(), rng, 0.5, 1.5);
  }
  const Var loss = ops::sum(t, ops::mul(t, out, t.leaf(*weights)));
  if (grads) {
    const Gradients g = t.backward(loss);
    grads->clear();
    for (const Var v : leaves) grads->push_back(g[v]);
  }
  return t.value(loss).item();
}

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

std::vector<PrimitiveCase> primitive_cases() {
  std::mt19937_64 rng(2024);
  auto r = [&rng](Shape s, double lo = -1.0, double hi = 1.0) {
    return random_tensor(std::move(s), rng, lo, hi);
  };
  // Distinct well-separated values so max pooling has a unique winner and
  // ReLU inputs stay away from zero.
  Tensor spread({1, 2, 4, 4});
  for (std::size_t i = 0; i < spread.size(); ++i) spread[i] = 0.1 * ((i * 7) % 32) - 1.55;
  static const std::vector<std::size_t> labels{2, 0, 1};
  return {
      {"matmul", {r({3, 4}), r({4, 2})},
       [](Tape& t, const std::vector<Var>& v) { return ops::matmul(t, v[0], v[1]); }},
      {"transpose", {r({3, 2})},
       [](Tape& t, const std::vector<Var>& v) { return ops::transpose(t, v[0]); }},
      {"reshape", {r({2, 3})},
       [](Tape& t, const std::vector<Var>& v) { return ops::reshape(t, v[0], {3, 2}); }},
      {"conv2d", {r({2, 2, 5, 5}), r({3, 2, 3, 3})},
       [](Tape& t, const std::vector<Var>& v) { return ops::conv2d(t, v[0], v[1], {1, 0}); }},
      {"conv2d_padded_strided", {r({1, 2, 5, 5}), r({2, 2, 3, 3})},
       [](Tape& t, const std::vector<Var>& v) { return ops::conv2d(t, v[0], v[1], {2, 1}); }},
      {"add", {r({2, 3}), r({2, 3})},
       [](Tape& t, const std::vector<Var>& v) { return ops::add(t, v[0], v[1]); }},
      {"sub", {r({2, 3}), r({2, 3})},
       [](Tape& t, const std::vector<Var>& v) { return ops::sub(t, v[0], v[1]); }},
      {"mul", {r({2, 3}), r({2, 3})},
       [](Tape& t, const std::vector<Var>& v) { return ops::mul(t, v[0], v[1]); }},
      {"scale", {r({4})}, [](Tape& t, const std::vector<Var>& v) { return ops::scale(t, v[0], -2.5); }},
      {"add_scalar", {r({4})},
       [](Tape& t, const std::vector<Var>& v) { return ops::add_scalar(t, v[0], 0.75); }},
      {"square", {r({4})}, [](Tape& t, const std::vector<Var>& v) { return ops::square(t, v[0]); }},
      {"pow_scalar", {r({4}, 0.5, 2.0)},
       [](Tape& t, const std::vector<Var>& v) { return ops::pow_scalar(t, v[0], -0.5); }},
      {"exp", {r({4})}, [](Tape& t, const std::vector<Var>& v) { return ops::exp(t, v[0]); }},
      {"log", {r({4}, 0.5, 3.0)}, [](Tape& t, const std::vector<Var>& v) { return ops::log(t, v[0]); }},
      {"row_add", {r({3, 2}), r({2})},
       [](Tape& t, const std::vector<Var>& v) { return ops::row_add(t, v[0], v[1]); }},
      {"channel_add", {r({2, 3, 2, 2}), r({3})},
       [](Tape& t, const std::vector<Var>& v) { return ops::channel_add(t, v[0], v[1]); }},
      {"channel_mul", {r({2, 3, 2, 2}), r({3})},
       [](Tape& t, const std::vector<Var>& v) { return ops::channel_mul(t, v[0], v[1]); }},
      {"sum", {r({2, 3})}, [](Tape& t, const std::vector<Var>& v) { return ops::sum(t, v[0]); }},
      {"mean", {r({2, 3})}, [](Tape& t, const std::vector<Var>& v) { return ops::mean(t, v[0]); }},
      {"channel_mean", {r({2, 3, 2, 2})},
       [](Tape& t, const std::vector<Var>& v) { return ops::channel_mean(t, v[0]); }},
      {"softplus_c1", {r({5}, -3, 3)},
       [](Tape& t, const std::vector<Var>& v) { return ops::softplus(t, v[0], 1.0); }},
      {"softplus_c10", {r({5})},
       [](Tape& t, const std::vector<Var>& v) { return ops::softplus(t, v[0], 10.0); }},
      {"relu", {spread}, [](Tape& t, const std::vector<Var>& v) { return ops::relu(t, v[0]); }},
      {"avg_pool", {r({1, 2, 4, 4})},
       [](Tape& t, const std::vector<Var>& v) { return ops::avg_pool2d(t, v[0], 2); }},
      {"max_pool", {spread},
       [](Tape& t, const std::vector<Var>& v) { return ops::max_pool2d(t, v[0], 2); }},
      {"softmax_pool", {r({1, 2, 4, 4})},
       [](Tape& t, const std::vector<Var>& v) { return ops::softmax_pool2d(t, v[0], 2, 10.0); }},
      {"cross_entropy", {r({3, 4}, -2, 2)},
       [](Tape& t, const std::vector<Var>& v) { return ops::cross_entropy(t, v[0], labels); }},
      {"composite", {r({3, 4}), r({4, 2})},
       [](Tape& t, const std::vector<Var>& v) {
         return ops::log(t, ops::add_scalar(t, ops::softplus(t, ops::matmul(t, v[0], v[1]), 2.0),
                                            1.0));
       }},
  };
}

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const auto cases = primitive_cases();
  const PrimitiveCase& c = cases.at(static_cast<std::size_t>(GetParam()));
  Tensor weights;
  std::vector<Tensor> analytic;
  contracted(c, c.inputs, &weights, &analytic);
  for (std::size_t k = 0; k < c.inputs.size(); ++k) {
    auto f = [&](const Tensor& x) {
      std::vector<Tensor> in = c.inputs;
      in[k] = x;
      return contracted(c, in, &weights, nullptr);
    };
    const Tensor fd = numeric_gradient(f, c.inputs[k], 1e-6);
    // Coordinates far below the gradient's scale are dominated by rounding in
    // the difference quotient (about 1e-10 absolute), so they are compared
    // against 1e-4 of the largest entry instead of their own magnitude.
    double scale = 1.0;
    for (double v : fd.values()) scale = std::max(scale, std::abs(v));
    EXPECT_LE(max_rel_diff(analytic[k], fd, 1e-4 * scale), 1e-5) << c.name << " input " << k;
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::Range(0, static_cast<int>(primitive_cases().size())),
                         [](const ::testing::TestParamInfo<int>& info) {
                           return std::string(primitive_cases()[info.param].name);
                         });

TEST(Determinism, RepeatedEvaluationIsBitwiseEqual) {
  const auto cases = primitive_cases();
  for (const PrimitiveCase& c : cases) {
    Tensor w1, w2;
    std::vector<Tensor> g1, g2;
    const double a = contracted(c, c.inputs, &w1, &g1);
    const double b = contracted(c, c.inputs, &w2, &g2);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a), std::bit_cast<std::uint64_t>(b)) << c.name;
    for (std::size_t k = 0; k < g1.size(); ++k) {
      EXPECT_TRUE(std::equal(g1[k].values().begin(), g1[k].values().end(),
                             g2[k].values().begin()))
          << c.name;
    }
  }
}

TEST(Scalars, SoftplusIsOverflowSafe) {
  EXPECT_NEAR(softplus_value(0.0, 1.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus_value(100.0, 1.0), 100.0, 1e-12);
  EXPECT_NEAR(softplus_value(-100.0, 1.0), 0.0, 1e-40);
  EXPECT_TRUE(std::isfinite(softplus_value(1e6, 10.0)));
  EXPECT_EQ(softplus_value(-1e6, 10.0), 0.0);
  EXPECT_NEAR(logistic(0.0), 0.5, 0.0);
}

TEST(Scalars, ConvOutputExtent) {
  EXPECT_EQ(conv_output_extent(8, 3, 1, 1), 8u);
  EXPECT_EQ(conv_output_extent(8, 3, 1, 0), 6u);
  EXPECT_EQ(conv_output_extent(5, 3, 2, 1), 3u);
  EXPECT_THROW(conv_output_extent(2, 3, 1, 0), ShapeError);
}

}  // namespace
