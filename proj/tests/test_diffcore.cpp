#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bcr/diffcore.hpp"
#include "oracles.hpp"

using namespace bcr;
using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Matrix randn(std::mt19937_64& rng, Index r, Index c) {
  std::normal_distribution<double> N;
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = N(rng);
  return m;
}

}  // namespace

TEST(Linear, SumCase) {
  Tape<double> t;
  auto y = ad::linear(t.constant(mat({{1, 2}})), t.constant(mat({{1}, {1}})), t.constant(mat({{0}})));
  EXPECT_DOUBLE_EQ(y.scalar(), 3.0);
}

TEST(Linear, ZeroInputGivesBias) {
  Tape<double> t;
  auto y = ad::linear(t.constant(mat({{0, 0}})), t.constant(mat({{0.3}, {-7}})), t.constant(mat({{5}})));
  EXPECT_DOUBLE_EQ(y.scalar(), 5.0);
}

TEST(Linear, MatchesNaiveProduct) {
  std::mt19937_64 rng(11);
  const Matrix x = randn(rng, 3, 4), W = randn(rng, 4, 2);
  Tape<double> t;
  auto y = ad::linear(t.constant(x), t.constant(W));
  const Matrix ref = oracle::matmul(x, W);
  for (Index i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value().data()[i], ref.data()[i], 1e-14);
}

TEST(Linear, ShapeMismatchThrows) {
  Tape<double> t;
  EXPECT_THROW(ad::linear(t.constant(Matrix::Ones(2, 3)), t.constant(Matrix::Ones(2, 2))), DimensionError);
  EXPECT_THROW(ad::linear(t.constant(Matrix::Ones(2, 3)), t.constant(Matrix::Ones(3, 2)), t.constant(Matrix::Ones(1, 3))),
               DimensionError);
}

TEST(Tanh, Values) {
  Tape<double> t;
  auto y = ad::tanh(t.constant(mat({{0.0, 40.0}})));
  EXPECT_EQ(y.value()(0, 0), 0.0);
  EXPECT_GT(y.value()(0, 1), 1 - 1e-9);
  EXPECT_LE(y.value()(0, 1), 1.0);
}

TEST(Tanh, GradientAtHalf) {
  Parameter<double> x("x", mat({{0.5}}));
  std::vector<Parameter<double>*> ps{&x};
  auto report = ad::grad_check<double>([&](Tape<double>& t) { return ad::tanh(t.parameter(x)); }, ps, {1e-5, 1e-7});
  EXPECT_TRUE(report.passed());
  EXPECT_NEAR(x.grad(0, 0), 1 - std::tanh(0.5) * std::tanh(0.5), 1e-15);
}

TEST(Tape, NonFiniteIsAnError) {
  Tape<double> t;
  Matrix m = Matrix::Ones(1, 2);
  m(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(t.constant(m), NumericError);
  m(0, 1) = std::nan("");
  EXPECT_THROW(t.constant(m), NumericError);
}

TEST(Tape, SharedParameterAccumulatesOnce) {
  Parameter<double> p("p", mat({{2.0}}));
  p.zero_grad();
  Tape<double> t;
  auto a = t.parameter(p);
  auto b = t.parameter(p);
  EXPECT_EQ(a.id(), b.id());
  t.backward(ad::hadamard(a, b));  // d(p^2)/dp = 2p
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 4.0);
  EXPECT_THROW(t.backward(a), ArgumentError);
}

TEST(SoftmaxSubset, EqualScores) {
  const std::vector<double> s{3, 3, 3, 3, 3};
  const std::vector<Index> sub{0, 1, 3, 4};
  const auto p = ad::softmax_subset<double>(s, sub);
  ASSERT_EQ(p.size(), 4);
  for (Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p(i), 0.25);
}

TEST(SoftmaxSubset, NoOverflow) {
  const std::vector<double> s{1000, 0};
  const std::vector<Index> sub{0, 1};
  const auto p = ad::softmax_subset<double>(s, sub);
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p(0), 1.0, 1e-300);
  EXPECT_LT(p(1), 1e-300);
}

TEST(SoftmaxSubset, ExtendedPrecisionOracle) {
  const std::vector<double> s{0.1, 0.2, 0.3};
  const std::vector<Index> sub{0, 1, 2};
  const auto p = ad::softmax_subset<double>(s, sub);
  const auto ref = oracle::softmax(s);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p(i), static_cast<double>(ref[i]), 1e-16);
}

TEST(SoftmaxSubset, EmptySubsetThrows) {
  const std::vector<double> s{1, 2};
  EXPECT_THROW(ad::softmax_subset<double>(s, std::span<const Index>{}), ArgumentError);
  Tape<double> t;
  EXPECT_THROW(ad::softmax_subset(t.constant(mat({{1}, {2}})), {}), ArgumentError);
}

TEST(SoftmaxSubset, SumsToOneForRandomScores) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> N(0, 50);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(1 + rng() % 20);
    for (double& v : s) v = N(rng);
    std::vector<Index> sub;
    for (Index i = 0; i < static_cast<Index>(s.size()); ++i)
      if (i == 0 || rng() % 2) sub.push_back(i);
    const auto p = ad::softmax_subset<double>(s, sub);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_GE(p.minCoeff(), 0.0);
  }
}

TEST(Dropout, RateZeroAndInferenceAreIdentity) {
  std::mt19937_64 rng(1);
  Tape<double> t;
  auto x = t.constant(mat({{1, 2, 3}}));
  EXPECT_EQ(ad::dropout(x, 0.0, rng, true).value(), x.value());
  EXPECT_EQ(ad::dropout(x, 0.5, rng, false).value(), x.value());
}

TEST(Dropout, BinomialMean) {
  std::mt19937_64 rng(2);
  Tape<double> t;
  const Index n = 100000;
  auto y = ad::dropout(t.constant(Matrix::Ones(1, n)), 0.25, rng, true);
  // Each output is 0 or 4/3; mean has variance p(1-p)/n · (4/3)^2.
  const double sd = std::sqrt(0.25 * 0.75 / n) * (4.0 / 3.0);
  EXPECT_NEAR(y.value().mean(), 1.0, 3 * sd);
  for (Index i = 0; i < n; ++i) ASSERT_TRUE(y.value()(0, i) == 0.0 || std::abs(y.value()(0, i) - 4.0 / 3.0) < 1e-15);
}

TEST(Dropout, BadRateThrows) {
  std::mt19937_64 rng(1);
  Tape<double> t;
  auto x = t.constant(Matrix::Ones(2, 2));
  EXPECT_THROW(ad::dropout(x, 1.0, rng, true), ArgumentError);
  EXPECT_THROW(ad::dropout(x, -0.1, rng, true), ArgumentError);
}

TEST(Dropout, Deterministic) {
  std::mt19937_64 a(9), b(9);
  Tape<double> t;
  auto x = t.constant(Matrix::Ones(4, 8));
  EXPECT_EQ(ad::dropout(x, 0.3, a, true).value(), ad::dropout(x, 0.3, b, true).value());
}

TEST(Adam, ZeroGradNoDecayLeavesParams) {
  Matrix p = mat({{1.5, -2}});
  ad::AdamState<double> st;
  ad::AdamConfig cfg;
  cfg.weight_decay = 0;
  ad::adam_step<double>(p, Matrix::Zero(1, 2), st, cfg, 1);
  EXPECT_EQ(p, mat({{1.5, -2}}));
}

TEST(Adam, FirstStepMovesByLr) {
  Matrix p = mat({{1.0}});
  ad::AdamState<double> st;
  ad::AdamConfig cfg;
  cfg.lr = 1e-4;
  cfg.weight_decay = 0;
  ad::adam_step<double>(p, mat({{1.0}}), st, cfg, 1);
  // m̂ = 1, v̂ = 1 → step = lr / (1 + eps)
  EXPECT_NEAR(p(0, 0), 1.0 - 1e-4 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, DecoupledDecay) {
  Matrix p = mat({{2.0}});
  ad::AdamState<double> st;
  ad::AdamConfig cfg;
  cfg.lr = 1e-4;
  cfg.weight_decay = 1e-5;
  ad::adam_step<double>(p, Matrix::Zero(1, 1), st, cfg, 1);
  EXPECT_DOUBLE_EQ(p(0, 0), 2.0 * (1 - 1e-9));
}

TEST(Adam, Errors) {
  Matrix p = Matrix::Ones(2, 2);
  ad::AdamState<double> st;
  EXPECT_THROW(ad::adam_step<double>(p, Matrix::Ones(2, 3), st, {}, 1), DimensionError);
  EXPECT_THROW(ad::adam_step<double>(p, Matrix::Ones(2, 2), st, {}, 0), ArgumentError);
}

TEST(Adam, MinimisesQuadratic) {
  Parameter<double> x("x", mat({{3.0, -4.0}}));
  ad::AdamConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0;
  ad::Adam<double> opt({&x}, cfg);
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    Tape<double> t;
    auto v = t.parameter(x);
    t.backward(ad::sum(ad::hadamard(v, v)));
    opt.step();
  }
  EXPECT_LT(x.value.norm(), 1e-2);
  EXPECT_EQ(opt.steps(), 2000);
}

TEST(GradCheck, LinearRegressionAllPass) {
  std::mt19937_64 rng(3);
  const Matrix X = randn(rng, 6, 9), y = randn(rng, 6, 1);
  Parameter<double> W("W", randn(rng, 9, 1)), b("b", randn(rng, 1, 1));
  std::vector<Parameter<double>*> ps{&W, &b};
  ASSERT_EQ(W.size() + b.size(), 10);
  auto report = ad::grad_check<double>(
      [&](Tape<double>& t) {
        auto r = ad::linear(t.constant(X), t.parameter(W), t.parameter(b)) - t.constant(y);
        return ad::mean(ad::hadamard(r, r));
      },
      ps, {1e-5, 1e-5});
  EXPECT_EQ(report.checked, 10u);
  EXPECT_TRUE(report.passed());
}

TEST(GradCheck, ConstantLossHasZeroGradient) {
  Parameter<double> p("p", mat({{1, 2, 3}}));
  std::vector<Parameter<double>*> ps{&p};
  const auto grads = ad::analytic_gradients<double>(
      [&](Tape<double>& t) {
        t.parameter(p);
        return t.constant(mat({{4.2}}));
      },
      ps);
  EXPECT_TRUE(grads[0].isZero(0));
}

TEST(GradCheck, CorruptedGradientIsReported) {
  Parameter<double> p("p", mat({{0.3, -0.7}}));
  std::vector<Parameter<double>*> ps{&p};
  std::vector<Matrix> wrong{mat({{0.0, 5.0}})};
  const std::function<double()> loss = [&] { return p.value.squaredNorm(); };
  auto report = ad::compare_gradients<double>(loss, ps, wrong, {});
  EXPECT_FALSE(report.passed());
  EXPECT_EQ(report.failures.size(), 2u);
  EXPECT_EQ(report.failures[1].col, 1);
}

TEST(GradCheck, EveryPrimitiveOnRandomInstances) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + rng() % 5, d = 1 + rng() % 4, h = 1 + rng() % 3;
    Parameter<double> x("x", randn(rng, n, d)), W("W", randn(rng, d, h)), b("b", randn(rng, 1, h));
    Parameter<double> w2("w2", randn(rng, h, 1));
    std::vector<Parameter<double>*> ps{&x, &W, &b, &w2};
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    auto report = ad::grad_check<double>(
        [&](Tape<double>& t) {
          auto xv = t.parameter(x);
          auto hid = ad::hadamard(ad::tanh(ad::linear(xv, t.parameter(W), t.parameter(b))),
                                  ad::sigmoid(ad::linear(xv, t.parameter(W))));
          auto scores = ad::linear(hid, t.parameter(w2));
          auto att = ad::softmax_subset(scores, all);
          auto pooled = ad::weighted_sum(att, xv);
          return ad::sum(ad::log_sum_exp_rows(pooled)) + 0.1 * ad::mean(ad::hadamard(scores, scores));
        },
        ps);
    EXPECT_TRUE(report.passed()) << "trial " << trial;
  }
}
