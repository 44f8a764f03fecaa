#include <gtest/gtest.h>

#include <numeric>

#include "gun/gradcheck.hpp"
#include "gun/guidance.hpp"
#include "helpers.hpp"

using namespace gun;
using testing_util::random;
using testing_util::pick;
using testing_util::to_block;

namespace {

Tensor<double> quad() { return Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}); }

Tensor<double> constant_offsets(std::size_t n, std::size_t h, std::size_t w, double p, double q) {
  Tensor<double> t({n, 2, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < h * w; ++i) {
      t[(b * 2) * h * w + i] = p;
      t[(b * 2 + 1) * h * w + i] = q;
    }
  return t;
}

}  // namespace

TEST(Grid, UnitRatioIsIdentity) {
  auto g = make_regular_grid(4, 4, 4, 4);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(g.x(t), static_cast<double>(t));
    EXPECT_EQ(g.y(t), static_cast<double>(t));
  }
}

TEST(Grid, HalfPixelCoordinates) {
  auto g2 = make_regular_grid(2, 2, 4, 4);
  EXPECT_EQ(g2.xs, (std::vector<double>{-0.25, 0.25, 0.75, 1.25}));
  auto g4 = make_regular_grid(2, 2, 8, 8);
  EXPECT_EQ(g4.xs, (std::vector<double>{-0.375, -0.125, 0.125, 0.375, 0.625, 0.875, 1.125, 1.375}));
  EXPECT_EQ(g4.ratio, 4.0);
}

TEST(Grid, MonotoneAndNonIntegerRatio) {
  auto g = make_regular_grid(2, 4, 3, 6);
  EXPECT_DOUBLE_EQ(g.ratio, 1.5);
  for (std::size_t t = 1; t < g.xs.size(); ++t) EXPECT_LT(g.xs[t - 1], g.xs[t]);
}

TEST(Grid, Errors) {
  EXPECT_THROW(make_regular_grid(2, 2, 4, 6), ValidationError);
  EXPECT_THROW(make_regular_grid(4, 4, 2, 2), ValidationError);
  EXPECT_THROW(make_regular_grid(0, 2, 4, 4), ValidationError);
}

TEST(GuidedSample, NearestZeroOffsetsReplicates) {
  auto V = guided_sample(quad(), make_regular_grid(2, 2, 4, 4), nullptr, SampleMode::nearest);
  EXPECT_EQ(V, Tensor<double>({1, 1, 4, 4}, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(GuidedSample, NearestConstantOffsetHitsRightColumn) {
  const auto off = constant_offsets(1, 4, 4, 0.8, 0.0);
  auto V = guided_sample(quad(), make_regular_grid(2, 2, 4, 4), &off, SampleMode::nearest);
  EXPECT_EQ(V, Tensor<double>({1, 1, 4, 4}, {2, 2, 2, 2, 2, 2, 2, 2, 4, 4, 4, 4, 4, 4, 4, 4}));
}

TEST(GuidedSample, BilinearRowClampsAtBorder) {
  Tensor<double> U({1, 1, 1, 2}, {0, 1});
  auto V = guided_sample(U, make_regular_grid(1, 2, 2, 4), nullptr, SampleMode::bilinear);
  // Second output row samples y = 0.75, clamped to the single source row.
  EXPECT_EQ(V, Tensor<double>({1, 1, 2, 4}, {0, 0.25, 0.75, 1, 0, 0.25, 0.75, 1}));
}

TEST(GuidedSample, OffsetShapeMismatch) {
  const auto grid = make_regular_grid(2, 2, 4, 4);
  Tensor<double> bad({1, 2, 4, 3});
  Tensor<double> three({1, 3, 4, 4});
  EXPECT_THROW(guided_sample(quad(), grid, &bad, SampleMode::bilinear), ShapeError);
  EXPECT_THROW(guided_sample(quad(), grid, &three, SampleMode::nearest), ShapeError);
  EXPECT_THROW(guided_sample(Tensor<double>({1, 1, 3, 2}), grid, nullptr, SampleMode::nearest), ShapeError);
}

TEST(GuidedSample, ZeroOffsetsMatchClassicalUpsampling) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t f = trial % 2 ? 2 : 4;
    const std::size_t h = 1 + pick(rng, 8), w = 1 + pick(rng, 8);
    const auto U = random(rng, {1 + pick(rng, 2), 1 + pick(rng, 3), h, w});
    const auto grid = make_regular_grid(h, w, h * f, w * f);
    const auto Vn = guided_sample(U, grid, nullptr, SampleMode::nearest);
    EXPECT_EQ(Vn.storage(), oracle::plain_nearest(to_block(U), f).v);
    const auto Vb = guided_sample(U, grid, nullptr, SampleMode::bilinear);
    const auto ref = oracle::plain_bilinear(to_block(U), f).v;
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(Vb[i], ref[i], 1e-12);
  }
}

TEST(GuidedSample, MatchesLiteralSumsWithOffsets) {
  Rng rng(12);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t f = 1 + pick(rng, 2);
    const std::size_t h = 1 + pick(rng, 4), w = 1 + pick(rng, 4);
    const auto U = random(rng, {1, 2, h, w});
    const auto off = random(rng, {1, 2, h * f, w * f}, -2.5, 2.5);
    const auto grid = make_regular_grid(h, w, h * f, w * f);
    const auto ob = to_block(off);
    EXPECT_EQ(guided_sample(U, grid, &off, SampleMode::nearest).storage(),
              oracle::nearest_sum(to_block(U), h * f, w * f, &ob).v);
    EXPECT_EQ(guided_sample(U, grid, &off, SampleMode::bilinear).storage(),
              oracle::bilinear_sum(to_block(U), h * f, w * f, &ob).v);
  }
}

TEST(GuidedSample, ChannelPermutationCommutes) {
  Rng rng(13);
  const auto U = random(rng, {2, 3, 3, 4});
  const auto off = random(rng, {2, 2, 6, 8}, -1, 1);
  const auto grid = make_regular_grid(3, 4, 6, 8);
  const std::vector<std::size_t> perm{2, 0, 1};
  auto permute = [&](const Tensor<double>& t) {
    Tensor<double> out(t.shape());
    const std::size_t plane = t.dim(2) * t.dim(3);
    for (std::size_t n = 0; n < t.dim(0); ++n)
      for (std::size_t c = 0; c < 3; ++c)
        std::copy_n(t.ptr() + (n * 3 + perm[c]) * plane, plane, out.ptr() + (n * 3 + c) * plane);
    return out;
  };
  for (auto mode : {SampleMode::nearest, SampleMode::bilinear}) {
    EXPECT_EQ(guided_sample(permute(U), grid, &off, mode), permute(guided_sample(U, grid, &off, mode)));
  }
}

TEST(GuidedSample, BilinearWeightsPartitionUnity) {
  Rng rng(14);
  for (int i = 0; i < 1000; ++i) {
    const double c = rng.uniform(-2.0, 9.0);
    const auto a = detail::bilinear_axis(c, 7);
    EXPECT_GE(a.w0, 0.0);
    EXPECT_GE(a.w1, 0.0);
    EXPECT_NEAR(a.w0 + a.w1, 1.0, 1e-12);
  }
  // A constant field stays constant under any warp.
  const Tensor<double> U({1, 1, 3, 3}, 2.5);
  const auto off = random(rng, {1, 2, 6, 6}, -4, 4);
  const auto V = guided_sample(U, make_regular_grid(3, 3, 6, 6), &off, SampleMode::bilinear);
  for (double v : V.data()) EXPECT_NEAR(v, 2.5, 1e-12);
}

TEST(GuidedSample, FloatAgreesWithDouble) {
  Rng rng(15);
  const auto U = random(rng, {1, 2, 4, 4});
  const auto off = random(rng, {1, 2, 8, 8}, -1, 1);
  const auto grid = make_regular_grid(4, 4, 8, 8);
  const auto Uf = U.cast<float>(), offf = off.cast<float>();
  const auto Vd = guided_sample(U, grid, &off, SampleMode::bilinear);
  const auto Vf = guided_sample(Uf, grid, &offf, SampleMode::bilinear);
  for (std::size_t i = 0; i < Vd.size(); ++i) EXPECT_NEAR(Vf[i], Vd[i], 1e-5);
}

TEST(GuidedBackward, TransposedWeightsOnRowExample) {
  Tensor<double> U({1, 1, 1, 2}, {0, 1});
  const auto grid = make_regular_grid(1, 2, 2, 4);
  Tensor<double> dV({1, 1, 2, 4}, {1, 1, 1, 1, 0, 0, 0, 0});
  auto g = guided_sample_backward(dV, U, grid, nullptr, SampleMode::bilinear);
  EXPECT_EQ(g.input, Tensor<double>({1, 1, 1, 2}, {2, 2}));
}

TEST(GuidedBackward, ZeroCotangent) {
  Rng rng(16);
  const auto U = random(rng, {1, 2, 3, 3});
  const auto off = random(rng, {1, 2, 6, 6});
  const auto grid = make_regular_grid(3, 3, 6, 6);
  for (auto mode : {SampleMode::nearest, SampleMode::bilinear}) {
    auto g = guided_sample_backward(Tensor<double>({1, 2, 6, 6}), U, grid, &off, mode);
    EXPECT_EQ(g.input, Tensor<double>(U.shape()));
    EXPECT_EQ(g.offsets, Tensor<double>(off.shape()));
  }
}

TEST(GuidedBackward, NearestOffsetsAreFlaggedNonDifferentiable) {
  Rng rng(17);
  const auto U = random(rng, {1, 1, 2, 2});
  const auto off = random(rng, {1, 2, 4, 4});
  auto g = guided_sample_backward(Tensor<double>({1, 1, 4, 4}, 1.0), U, make_regular_grid(2, 2, 4, 4), &off,
                                  SampleMode::nearest);
  EXPECT_FALSE(g.offsets_differentiable);
  EXPECT_EQ(g.offsets, Tensor<double>({1, 2, 4, 4}));
  // Every output pixel lands on exactly one source pixel.
  EXPECT_DOUBLE_EQ(std::accumulate(g.input.data().begin(), g.input.data().end(), 0.0), 16.0);
}

TEST(GuidedBackward, AdjointIdentity) {
  Rng rng(18);
  const auto U = random(rng, {2, 2, 3, 4});
  const auto off = random(rng, {2, 2, 6, 8}, -1.5, 1.5);
  const auto dV = random(rng, {2, 2, 6, 8});
  const auto grid = make_regular_grid(3, 4, 6, 8);
  for (auto mode : {SampleMode::nearest, SampleMode::bilinear}) {
    const auto V = guided_sample(U, grid, &off, mode);
    const auto g = guided_sample_backward(dV, U, grid, &off, mode);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < V.size(); ++i) lhs += V[i] * dV[i];
    for (std::size_t i = 0; i < U.size(); ++i) rhs += U[i] * g.input[i];
    EXPECT_NEAR(lhs, rhs, 1e-12);
  }
}

TEST(GuidedBackward, FiniteDifferencesAwayFromKinks) {
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t h = 2 + pick(rng, 4), w = 2 + pick(rng, 4);
    const std::size_t C = 1 + pick(rng, 3), f = 2;
    const auto grid = make_regular_grid(h, w, h * f, w * f);
    auto U = random(rng, {1, C, h, w});
    auto off = random(rng, {1, 2, h * f, w * f}, -1, 1);
    const auto weights = random(rng, {1, C, h * f, w * f});
    auto skip = [&](std::size_t input, std::size_t k) {
      if (input != 1) return false;
      const std::size_t plane = h * f * w * f, pix = k % plane;
      const double base = k / plane == 0 ? grid.x(pix % (w * f)) : grid.y(pix / (w * f));
      const double c = base + off[k];
      const double extent = static_cast<double>(k / plane == 0 ? w : h);
      return std::abs(c - std::round(c)) < 1e-3 || c < 1e-3 || c > extent - 1 - 1e-3;
    };
    auto rep = ad::finite_diff_check(
        [&](ad::Tape&, std::span<const ad::Var> in) {
          return ad::weighted_sum(ad::guided_sample(in[0], grid, in[1], SampleMode::bilinear), weights);
        },
        {U, off}, 1e-6, skip);
    EXPECT_LT(rep.max_rel_error, 1e-4);
    EXPECT_TRUE(rep.non_finite.empty());
  }
}

TEST(Guidance, HighResIsSingleOneByOneConv) {
  ParamStore ps;
  Rng init(1);
  ad::Tape tape;
  Layers L(tape, ps, true, &init);
  GuidanceConfig cfg;
  cfg.variant = GuidanceVariant::high_res;
  auto early = tape.constant(Tensor<double>({1, 32, 8, 8}, 1.0));
  auto off = guidance_offsets(L, {{"early", early}}, cfg, 8, 8);
  EXPECT_EQ(off.shape(), (Shape{1, 2, 8, 8}));
  EXPECT_EQ(ps.param("guide.offsets.weight").size() + ps.param("guide.offsets.bias").size(), 66u);
  EXPECT_EQ(ps.params().size(), 2u);
}

TEST(Guidance, ZeroInitGivesZeroOffsets) {
  Rng rng(2);
  for (auto v : {GuidanceVariant::large_rf, GuidanceVariant::high_res, GuidanceVariant::fusion}) {
    ParamStore ps;
    Rng init(3);
    ad::Tape tape;
    Layers L(tape, ps, true, &init);
    GuidanceConfig cfg;
    cfg.variant = v;
    FeatureMap fm{{"deep", tape.constant(random(rng, {2, 64, 4, 4}))},
                  {"early", tape.constant(random(rng, {2, 16, 16, 16}))}};
    auto off = guidance_offsets(L, fm, cfg, 16, 16);
    EXPECT_EQ(off.value(), Tensor<double>({2, 2, 16, 16})) << to_string(v);
  }
}

TEST(Guidance, FusionShapes) {
  ParamStore ps;
  Rng init(4), rng(5);
  ad::Tape tape;
  Layers L(tape, ps, true, &init);
  FeatureMap fm{{"deep", tape.constant(random(rng, {1, 64, 8, 8}))},
                {"early", tape.constant(random(rng, {1, 16, 32, 32}))}};
  auto off = guidance_offsets(L, fm, GuidanceConfig{}, 64, 64);
  EXPECT_EQ(off.shape(), (Shape{1, 2, 64, 64}));
  EXPECT_EQ(ps.param("guide.expand.conv.weight").shape(), (Shape{64, 16, 1, 1}));
}

TEST(Guidance, MissingFeatureNamesVariant) {
  ParamStore ps;
  Rng init(6);
  ad::Tape tape;
  Layers L(tape, ps, true, &init);
  GuidanceConfig cfg;
  cfg.variant = GuidanceVariant::large_rf;
  try {
    guidance_offsets(L, {{"early", tape.constant(Tensor<double>({1, 4, 4, 4}))}}, cfg, 8, 8);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("large-rf"), std::string::npos);
  }
}

TEST(Guidance, ConfigValidation) {
  GuidanceConfig cfg;
  cfg.variant = GuidanceVariant::large_rf;
  cfg.upsample_stages = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_guidance_variant("wide"), ConfigError);
  EXPECT_EQ(parse_guidance_variant("high-res"), GuidanceVariant::high_res);
}

TEST(Guidance, OffsetsAreTrainable) {
  // After the zero-init layer receives a gradient step, the offsets move.
  ParamStore ps;
  Rng init(7), rng(8);
  const auto deep = random(rng, {1, 64, 4, 4}), early = random(rng, {1, 16, 8, 8});
  const auto w = random(rng, {1, 2, 8, 8});
  std::map<std::string, Tensor<double>> grads;
  {
    ad::Tape tape;
    Layers L(tape, ps, true, &init);
    auto off = guidance_offsets(L, {{"deep", tape.constant(deep)}, {"early", tape.constant(early)}},
                                GuidanceConfig{}, 8, 8);
    grads = tape.backward(ad::weighted_sum(off, w)).by_name();
  }
  double norm = 0;
  for (double v : grads.at("guide.offsets.weight").data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}
