#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <sstream>

#include "gun/metrics.hpp"
#include "helpers.hpp"

using namespace gun;

namespace {

// 4x4, columns 0-1 class 0, columns 2-3 class 1.
SegMap half_half() {
  SegMap m(4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 2; x < 4; ++x) m.at(y, x) = 1;
  return m;
}

SegMap random_map(Rng& rng, std::size_t H, std::size_t W, std::size_t classes, bool ignores) {
  SegMap m(H, W);
  for (auto& v : m.labels) {
    v = static_cast<std::uint8_t>(testing_util::pick(rng, classes));
    if (ignores && rng.uniform() < 0.1) v = kIgnoreLabel;
  }
  return m;
}

const double inf = std::numeric_limits<double>::infinity();

}  // namespace

TEST(Confusion, PerfectPredictionIsDiagonal) {
  Rng rng(1);
  auto gt = random_map(rng, 5, 7, 4, false);
  auto conf = accumulate_confusion(gt, gt, 4);
  EXPECT_EQ(conf.trace(), 35u);
  EXPECT_EQ(conf.total(), 35u);
}

TEST(Confusion, HalfHalfCounts) {
  auto conf = accumulate_confusion(SegMap(4, 4), half_half(), 2);
  EXPECT_EQ(conf(0, 0), 8u);
  EXPECT_EQ(conf(1, 0), 8u);
  EXPECT_EQ(conf(0, 1), 0u);
  EXPECT_EQ(conf(1, 1), 0u);
}

TEST(Confusion, IgnoredAndMaskedPixelsAreSkipped) {
  auto conf = accumulate_confusion(SegMap(3, 3), SegMap(3, 3, kIgnoreLabel), 3);
  EXPECT_EQ(conf.total(), 0u);
  std::vector<bool> mask(9, false);
  mask[4] = true;
  EXPECT_EQ(accumulate_confusion(SegMap(3, 3), SegMap(3, 3), 3, &mask).total(), 1u);
}

TEST(Confusion, Errors) {
  EXPECT_THROW(accumulate_confusion(SegMap(2, 2, 3), SegMap(2, 2), 3), ValidationError);
  EXPECT_THROW(accumulate_confusion(SegMap(2, 3), SegMap(2, 2), 3), ShapeError);
  std::vector<bool> mask(3);
  EXPECT_THROW(accumulate_confusion(SegMap(2, 2), SegMap(2, 2), 3, &mask), ShapeError);
}

TEST(Confusion, AccumulationIsAdditive) {
  Rng rng(2);
  ConfusionMatrix total(4);
  ConfusionMatrix sum(4);
  for (int i = 0; i < 5; ++i) {
    auto p = random_map(rng, 6, 6, 4, false), g = random_map(rng, 6, 6, 4, true);
    accumulate_confusion(total, p, g);
    sum += accumulate_confusion(p, g, 4);
  }
  EXPECT_EQ(total, sum);
}

TEST(MeanIou, Diagonal) {
  ConfusionMatrix conf(3);
  conf(0, 0) = 5;
  conf(2, 2) = 1;
  auto r = mean_iou(conf);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_FALSE(r.per_class[1]);
}

TEST(MeanIou, HalfHalf) {
  auto r = mean_iou(accumulate_confusion(SegMap(4, 4), half_half(), 2));
  EXPECT_EQ(r.per_class[0], 0.5);
  EXPECT_EQ(r.per_class[1], 0.0);
  EXPECT_EQ(r.miou, 0.25);
}

TEST(MeanIou, AbsentClassesExcluded) {
  auto r = mean_iou(accumulate_confusion(SegMap(3, 3, 2), SegMap(3, 3, 2), 5));
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_EQ(std::count_if(r.per_class.begin(), r.per_class.end(), [](auto& v) { return v.has_value(); }), 1);
}

TEST(MeanIou, EmptyMatrixIsUndefined) {
  EXPECT_FALSE(mean_iou(ConfusionMatrix(4)).miou);
}

TEST(MeanIou, InvariantUnderRelabeling) {
  Rng rng(3);
  const std::vector<std::uint8_t> perm{3, 0, 2, 1};
  for (int t = 0; t < 20; ++t) {
    auto p = random_map(rng, 5, 5, 4, false), g = random_map(rng, 5, 5, 4, true);
    auto relabel = [&](SegMap m) {
      for (auto& v : m.labels)
        if (v != kIgnoreLabel) v = perm[v];
      return m;
    };
    const auto a = mean_iou(accumulate_confusion(p, g, 4));
    const auto b = mean_iou(accumulate_confusion(relabel(p), relabel(g), 4));
    ASSERT_TRUE(a.miou && b.miou);
    EXPECT_NEAR(*a.miou, *b.miou, 1e-15);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(a.per_class[c], b.per_class[perm[c]]);
  }
}

TEST(Distance, HalfHalfColumns) {
  auto d = boundary_distance_map(half_half());
  for (std::size_t y = 0; y < 4; ++y) {
    EXPECT_EQ(d.at(y, 0), 2.0);
    EXPECT_EQ(d.at(y, 1), 1.0);
    EXPECT_EQ(d.at(y, 2), 1.0);
    EXPECT_EQ(d.at(y, 3), 2.0);
  }
}

TEST(Distance, CheckerboardIsOne) {
  SegMap m(5, 6);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 6; ++x) m.at(y, x) = static_cast<std::uint8_t>((x + y) % 2);
  for (double v : boundary_distance_map(m).distance) EXPECT_EQ(v, 1.0);
}

TEST(Distance, UniformMapIsFlagged) {
  auto d = boundary_distance_map(SegMap(4, 5, 3));
  EXPECT_FALSE(d.has_boundary);
  for (double v : d.distance) EXPECT_EQ(v, inf);
}

TEST(Distance, IgnorePixelsAreTransparent) {
  // 0 | 255 | 1 along a row: the ignore pixel neither counts as a boundary
  // nor receives a distance.
  SegMap m(1, 3, std::vector<std::uint8_t>{0, kIgnoreLabel, 1});
  auto d = boundary_distance_map(m);
  EXPECT_EQ(d.at(0, 0), 2.0);
  EXPECT_EQ(d.at(0, 1), inf);
  EXPECT_EQ(d.at(0, 2), 2.0);
}

TEST(Distance, MatchesBruteForce) {
  Rng rng(4);
  for (int t = 0; t < 60; ++t) {
    const std::size_t H = 1 + testing_util::pick(rng, 12), W = 1 + testing_util::pick(rng, 12);
    auto m = random_map(rng, H, W, 1 + testing_util::pick(rng, 4), t % 2 == 0);
    // Sparse maps exercise long distances.
    if (t % 3 == 0) {
      for (auto& v : m.labels) v = rng.uniform() < 0.9 ? 0 : v;
    }
    EXPECT_EQ(boundary_distance_map(m).distance, oracle::nearest_differing(m.labels, H, W));
  }
}

TEST(Trimap, PerfectPredictionIsOneEverywhere) {
  Rng rng(5);
  auto gt = random_map(rng, 8, 8, 3, true);
  for (const auto& p : trimap_miou_curve(gt, gt, {1, 2, 3, 100}, 3)) EXPECT_EQ(p.miou, 1.0);
}

TEST(Trimap, HalfHalfBand) {
  auto curve = trimap_miou_curve(SegMap(4, 4), half_half(), {1, 2}, 2);
  EXPECT_EQ(curve[0].evaluated_pixels, 8u);
  EXPECT_EQ(curve[0].per_class[0], 0.5);
  EXPECT_EQ(curve[0].per_class[1], 0.0);
  EXPECT_EQ(curve[0].miou, 0.25);
  EXPECT_EQ(curve[1].evaluated_pixels, 16u);
}

TEST(Trimap, InfiniteRadiusEqualsGlobal) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    auto p = random_map(rng, 9, 9, 4, false), g = random_map(rng, 9, 9, 4, true);
    auto curve = trimap_miou_curve(p, g, {1, inf}, 4);
    EXPECT_EQ(curve.back().miou, mean_iou(accumulate_confusion(p, g, 4)).miou);
  }
}

TEST(Trimap, BandsAreNested) {
  Rng rng(7);
  auto p = random_map(rng, 12, 12, 3, false), g = random_map(rng, 12, 12, 3, true);
  for (auto& v : g.labels) v = rng.uniform() < 0.8 ? 1 : v;
  auto curve = trimap_miou_curve(p, g, {1, 1.5, 2, 3, 5, 8}, 3);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    EXPECT_GE(curve[i].evaluated_pixels, curve[i - 1].evaluated_pixels);
  }
}

TEST(Trimap, EmptyBandFlaggedAndSkippedInCsv) {
  auto curve = trimap_miou_curve(SegMap(3, 3), SegMap(3, 3), {1, 2}, 2);
  EXPECT_TRUE(curve[0].empty_band);
  std::ostringstream os;
  write_trimap_csv(os, curve, 2);
  EXPECT_EQ(os.str(), "radius,miou,evaluated_pixels,iou_0,iou_1\n");
}

TEST(Trimap, CsvLayout) {
  std::ostringstream os;
  write_trimap_csv(os, trimap_miou_curve(SegMap(4, 4), half_half(), {1}, 2), 2);
  EXPECT_EQ(os.str(), "radius,miou,evaluated_pixels,iou_0,iou_1\n1,0.25,8,0.5,0\n");
}

TEST(Trimap, RadiiValidation) {
  EXPECT_THROW(trimap_miou_curve(SegMap(2, 2), SegMap(2, 2), {2, 1}, 2), ValidationError);
  EXPECT_THROW(trimap_miou_curve(SegMap(2, 2), SegMap(2, 2), {0}, 2), ValidationError);
  EXPECT_THROW(trimap_miou_curve(SegMap(2, 2), SegMap(2, 2), {}, 2), ValidationError);
}

TEST(Argmax, PicksFirstMaximum) {
  Tensor<double> logits({1, 3, 1, 2}, {1, 0, 2, 5, 2, 5});
  EXPECT_EQ(argmax_labels(logits).labels, (std::vector<std::uint8_t>{1, 1}));
}
