#include <gtest/gtest.h>

#include <cmath>

#include "gun/gradcheck.hpp"
#include "gun/optim.hpp"
#include "helpers.hpp"

using namespace gun;
using testing_util::random;

TEST(Backward, SumGivesOnes) {
  ad::Tape tape;
  auto x = tape.leaf(Tensor<double>({2, 2}, {1, -2, 3, 4}));
  auto g = tape.backward(ad::sum(x));
  EXPECT_EQ(g.of(x), Tensor<double>({2, 2}, 1.0));
}

TEST(Backward, ReluSubgradient) {
  ad::Tape tape;
  auto x = tape.leaf(Tensor<double>({1, 1, 1, 2}, {-1, 2}));
  auto g = tape.backward(ad::sum(ad::relu(x)));
  EXPECT_EQ(g.of(x), Tensor<double>({1, 1, 1, 2}, {0, 1}));
}

TEST(Backward, PointwiseConvKernelGradientIsInputSum) {
  Rng rng(2);
  auto xv = random(rng, {2, 1, 3, 4});
  ad::Tape tape;
  auto x = tape.constant(xv);
  auto w = tape.param("w", Tensor<double>({1, 1, 1, 1}, 0.5));
  auto g = tape.backward(ad::sum(ad::conv2d(x, w, std::nullopt, {})));
  double total = 0;
  for (double v : xv.data()) total += v;
  EXPECT_NEAR(g.of("w")[0], total, 1e-12);
}

TEST(Backward, RejectsNonScalarAndSecondPass) {
  ad::Tape tape;
  auto x = tape.leaf(Tensor<double>({2}, 1.0));
  EXPECT_THROW(tape.backward(x), ValidationError);
  auto s = ad::sum(x);
  tape.backward(s);
  EXPECT_THROW(tape.backward(s), UnsupportedError);
}

TEST(Backward, UnusedParametersGetZeroGradients) {
  ad::Tape tape;
  auto a = tape.param("a", Tensor<double>({3}, 2.0));
  tape.param("unused", Tensor<double>({2, 2}, 7.0));
  auto g = tape.backward(ad::sum(ad::square(a)));
  EXPECT_EQ(g.of("unused"), Tensor<double>({2, 2}, 0.0));
  EXPECT_EQ(g.of("a"), Tensor<double>({3}, 4.0));
}

TEST(Backward, SharedParameterAccumulatesEveryUse) {
  ad::Tape tape;
  auto a1 = tape.param("a", Tensor<double>({2}, 3.0));
  auto a2 = tape.param("a", Tensor<double>({2}, 99.0));  // same storage, value ignored
  EXPECT_EQ(a1.id(), a2.id());
  auto g = tape.backward(ad::sum(ad::add(ad::scale(a1, 2.0), a2)));
  EXPECT_EQ(g.of("a"), Tensor<double>({2}, 3.0));
}

TEST(Backward, GradientOfSumOfLossesIsSumOfGradients) {
  Rng rng(5);
  const auto xv = random(rng, {1, 2, 3, 3});
  const auto kv = random(rng, {2, 2, 3, 3});
  const auto w1 = random(rng, {1, 2, 3, 3}), w2 = random(rng, {1, 2, 3, 3});
  auto run = [&](bool first, bool second) {
    ad::Tape tape;
    auto x = tape.leaf(xv);
    auto k = tape.param("k", kv);
    auto y = ad::relu(ad::conv2d(x, k, std::nullopt, {1, 1, 1}));
    std::optional<ad::Var> loss;
    if (first) loss = ad::weighted_sum(y, w1);
    if (second) {
      auto l2 = ad::weighted_sum(ad::square(y), w2);
      loss = loss ? ad::add(*loss, l2) : l2;
    }
    return tape.backward(*loss).of("k");
  };
  auto both = run(true, true), a = run(true, false), b = run(false, true);
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], a[i] + b[i], 1e-12);
}

TEST(Backward, OperandsFromAnotherTapeAreRejected) {
  ad::Tape t1, t2;
  auto a = t1.leaf(Tensor<double>({1}, 1.0));
  auto b = t2.leaf(Tensor<double>({1}, 1.0));
  EXPECT_THROW(ad::add(a, b), ValidationError);
}

TEST(Backward, NoGradTapeBindsConstants) {
  ad::Tape tape(false);
  auto p = tape.param("p", Tensor<double>({2}, 1.0));
  EXPECT_FALSE(p.requires_grad());
  EXPECT_FALSE(ad::relu(p).requires_grad());
}

TEST(FiniteDiff, SquareSum) {
  Rng rng(3);
  auto rep = ad::finite_diff_check(
      [](ad::Tape&, std::span<const ad::Var> in) { return ad::sum(ad::square(in[0])); }, {random(rng, {3, 4})});
  EXPECT_LT(rep.max_rel_error, 1e-6);
  EXPECT_EQ(rep.checked, 12u);
}

TEST(FiniteDiff, ConstantFunction) {
  auto rep = ad::finite_diff_check(
      [](ad::Tape& t, std::span<const ad::Var>) { return t.constant(Tensor<double>({1}, 4.0)); },
      {Tensor<double>({3}, 1.0)});
  EXPECT_EQ(rep.max_rel_error, 0.0);
}

TEST(FiniteDiff, EpsilonRange) {
  auto f = [](ad::Tape&, std::span<const ad::Var> in) { return ad::sum(in[0]); };
  EXPECT_THROW(ad::finite_diff_check(f, {Tensor<double>({1})}, 1e-2), ValidationError);
  EXPECT_THROW(ad::finite_diff_check(f, {Tensor<double>({1})}, 1e-8), ValidationError);
}

TEST(FiniteDiff, NonFiniteValuesAreReported) {
  // sqrt is not defined below zero: the perturbed point x - eps is NaN.
  auto f = [](ad::Tape& t, std::span<const ad::Var> in) {
    Tensor<double> v({1}, std::sqrt(in[0].value()[0]));
    return t.record("sqrt", v, {in[0]}, [](const Tensor<double>&, ad::Inputs, ad::Slots) {});
  };
  auto rep = ad::finite_diff_check(f, {Tensor<double>({1}, 0.0)});
  ASSERT_EQ(rep.non_finite.size(), 1u);
  EXPECT_FALSE(rep.passed(1e-4));
}

TEST(FiniteDiff, EveryOperatorOnSmallInputs) {
  Rng rng(17);
  const auto w = random(rng, {2, 3, 4, 4});
  const auto mean = random(rng, {3}), var = random(rng, {3}, 0.5, 2);
  const auto wconv = random(rng, {2, 3, 3, 2}), wresize = random(rng, {1, 2, 2, 3});
  auto check = [&](ad::ScalarFn f, std::vector<Tensor<double>> in) {
    auto rep = ad::finite_diff_check(std::move(f), std::move(in));
    EXPECT_LT(rep.max_rel_error, 1e-4);
    EXPECT_TRUE(rep.non_finite.empty());
  };
  check([&](ad::Tape&, std::span<const ad::Var> in) {
    ad::NormStats rs{Tensor<double>({3}, 0.0), Tensor<double>({3}, 1.0)};
    return ad::weighted_sum(ad::batch_norm(in[0], in[1], in[2], rs, {}), w);
  }, {random(rng, {2, 3, 4, 4}), random(rng, {3}, 0.5, 2), random(rng, {3})});
  check([&](ad::Tape&, std::span<const ad::Var> in) {
    ad::NormStats rs{mean, var};
    ad::NormOptions eval;
    eval.training = false;
    return ad::weighted_sum(ad::batch_norm(in[0], in[1], in[2], rs, eval), w);
  }, {random(rng, {2, 3, 4, 4}), random(rng, {3}, 0.5, 2), random(rng, {3})});
  check([&](ad::Tape&, std::span<const ad::Var> in) {
    return ad::weighted_sum(ad::conv2d(in[0], in[1], in[2], {2, 2, 2}), wconv);
  }, {random(rng, {2, 2, 5, 4}), random(rng, {3, 2, 3, 3}), random(rng, {3})});
  check([&](ad::Tape&, std::span<const ad::Var> in) {
    return ad::weighted_sum(ad::resize_bilinear(in[0], 2, 3), wresize);
  }, {random(rng, {1, 2, 5, 4})});
  check([&](ad::Tape&, std::span<const ad::Var> in) {
    return ad::scale(ad::sum(ad::square(ad::add(in[0], in[1]))), 0.5);
  }, {random(rng, {3, 2}), random(rng, {3, 2})});
}

TEST(Sgd, HandEvaluatedSteps) {
  ParamStore ps;
  ps.add_param("w", Tensor<double>({1}, 1.0));
  auto st = OptimState::for_params(ps, 0.9, 0.1);
  std::map<std::string, Tensor<double>> g{{"w", Tensor<double>({1}, 1.0)}};
  sgd_momentum_step(ps, g, st, 0.1);
  EXPECT_DOUBLE_EQ(st.velocity.at("w")[0], 1.0);
  EXPECT_DOUBLE_EQ(ps.param("w")[0], 0.9);
  sgd_momentum_step(ps, g, st, 0.1);
  EXPECT_DOUBLE_EQ(st.velocity.at("w")[0], 1.9);
  EXPECT_DOUBLE_EQ(ps.param("w")[0], 0.71);
}

TEST(Sgd, ZeroGradientAndZeroRateAreFixedPoints) {
  Rng rng(1);
  ParamStore ps;
  ps.add_param("a", random(rng, {3, 2}));
  const auto before = ps.param("a");
  auto st = OptimState::for_params(ps, 0.9, 0.1);
  sgd_momentum_step(ps, {{"a", Tensor<double>({3, 2}, 0.0)}}, st, 0.1);
  EXPECT_EQ(ps.param("a"), before);
  sgd_momentum_step(ps, {{"a", random(rng, {3, 2})}}, st, 0.0);
  EXPECT_EQ(ps.param("a"), before);
}

TEST(Sgd, VelocityStartsAtZeroWithMatchingShapes) {
  ParamStore ps;
  ps.add_param("a", Tensor<double>({2, 3}, 1.0));
  ps.add_param("b", Tensor<double>({4}, 1.0));
  auto st = OptimState::for_params(ps, 0.9, 0.001);
  ASSERT_EQ(st.velocity.size(), 2u);
  EXPECT_EQ(st.velocity.at("a"), Tensor<double>({2, 3}, 0.0));
  EXPECT_EQ(st.velocity.at("b").shape(), (Shape{4}));
}

TEST(Sgd, ShapeMismatchAndMissingGradient) {
  ParamStore ps;
  ps.add_param("a", Tensor<double>({2}, 1.0));
  OptimState st;
  EXPECT_THROW(sgd_momentum_step(ps, {{"a", Tensor<double>({3})}}, st, 0.1), ShapeError);
  EXPECT_THROW(sgd_momentum_step(ps, {}, st, 0.1), ValidationError);
}

TEST(StepLr, Schedule) {
  EXPECT_DOUBLE_EQ(step_lr(0, 0.001), 0.001);
  EXPECT_DOUBLE_EQ(step_lr(99, 0.001), 0.001);
  EXPECT_DOUBLE_EQ(step_lr(100, 0.001), 0.0001);
  EXPECT_DOUBLE_EQ(step_lr(200, 0.001), 0.00001);
  double prev = step_lr(0, 0.01);
  for (std::size_t e = 1; e < 450; ++e) {
    const double lr = step_lr(e, 0.01);
    EXPECT_LE(lr, prev);
    if (e % 100 != 0) EXPECT_EQ(lr, prev);
    prev = lr;
  }
}
