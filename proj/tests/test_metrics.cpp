#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "adabldm/errors.hpp"
#include "adabldm/metrics.hpp"
#include "metric_oracles.hpp"

namespace adabldm::metrics {
namespace {

using adabldm::testing::random_metric_instance;

GroundTruth truth_from(int h, int w, std::initializer_list<int> positives) {
  BinaryMask m(h, w);
  for (int i : positives) m.data[i] = 1;
  return GroundTruth(m);
}

ScoreMap scores_from(int h, int w, std::vector<double> v) {
  ScoreMap s(h, w);
  s.data = std::move(v);
  return s;
}

TEST(PixelAuc, PerfectAndConstant) {
  const auto g = truth_from(2, 2, {0, 3});
  EXPECT_EQ(pixel_auc(scores_from(2, 2, {1, 0, 0, 1}), g), 1.0);
  EXPECT_EQ(pixel_auc(scores_from(2, 2, {0.3, 0.3, 0.3, 0.3}), g), 0.5);
}

TEST(PixelAuc, SingleClassIsUndefined) {
  EXPECT_THROW(pixel_auc(ScoreMap(2, 2), truth_from(2, 2, {})), UndefinedMetricError);
  EXPECT_THROW(pixel_auc(ScoreMap(1, 2), truth_from(1, 2, {0, 1})), UndefinedMetricError);
}

TEST(PixelAuc, MatchesPairwiseOracleOnRandom4x4) {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    BinaryMask m(4, 4);
    for (auto& v : m.data) v = uniform(rng, 0, 1) < 0.4;
    if (m.none()) m.data[3] = 1;
    if (m.all()) m.data[5] = 0;
    Sample s{ScoreMap(4, 4), GroundTruth(m)};
    for (double& v : s.scores.data) v = std::floor(uniform(rng, 0, 6));
    EXPECT_EQ(pixel_auc(s.scores, s.truth), adabldm::testing::brute_force_auc({s}));
  }
}

TEST(Pro, Perfect) {
  const auto g = truth_from(3, 3, {0, 8});
  EXPECT_NEAR(pro(scores_from(3, 3, {1, 0, 0, 0, 0, 0, 0, 0, 1}), g), 1.0, 1e-12);
}

TEST(Pro, HalfDetectedAtLimit) {
  // Two 3-pixel components and ten negatives. Component A outranks everything;
  // three negatives come next (FPR = 0.3), then component B.
  BinaryMask m(4, 4);
  for (int i : {0, 1, 2, 12, 13, 14}) m.data[i] = 1;
  const GroundTruth g(m);
  ASSERT_EQ(g.components().size(), 2u);
  ScoreMap s(4, 4, 0.0);
  for (int i : {0, 1, 2}) s.data[i] = 10.0;
  for (int i : {4, 5, 6}) s.data[i] = 5.0;
  for (int i : {12, 13, 14}) s.data[i] = 1.0;
  EXPECT_NEAR(pro(s, g, 0.3), 0.5, 1e-12);
  EXPECT_NEAR(pro(s, g, 0.3), adabldm::testing::brute_force_pro({{s, g}}, 0.3), 1e-12);
}

TEST(Pro, NoComponentsIsUndefined) {
  EXPECT_THROW(pro(ScoreMap(2, 2), truth_from(2, 2, {})), UndefinedMetricError);
}

TEST(AveragePrecision, PerfectAndConstant) {
  const auto g = truth_from(2, 3, {1, 4});
  EXPECT_EQ(average_precision(scores_from(2, 3, {0, 1, 0, 0, 1, 0}), g), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(ScoreMap(2, 3, 0.7), g), 2.0 / 6.0);
  EXPECT_THROW(average_precision(ScoreMap(2, 2), truth_from(2, 2, {})), UndefinedMetricError);
}

TEST(AveragePrecision, MatchesEnumerationOnRandomEightPixels) {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    BinaryMask m(2, 4);
    for (auto& v : m.data) v = uniform(rng, 0, 1) < 0.5;
    if (m.none()) m.data[0] = 1;
    Sample s{ScoreMap(2, 4), GroundTruth(m)};
    for (double& v : s.scores.data) v = uniform(rng, 0, 1);
    EXPECT_NEAR(average_precision(s.scores, s.truth), adabldm::testing::brute_force_ap({s}), 1e-12);
  }
}

TEST(Iap, Perfect) {
  const auto g = truth_from(3, 3, {0, 1, 8});
  const auto s = scores_from(3, 3, {1, 1, 0, 0, 0, 0, 0, 0, 1});
  EXPECT_EQ(iap(s, g), 1.0);
  EXPECT_EQ(iap_at_k(s, g, 90), 1.0);
}

TEST(Iap, FalsePositiveAboveSinglePixelComponent) {
  const auto g = truth_from(3, 3, {4});
  const auto s = scores_from(3, 3, {0, 0, 1.0, 0, 0.9, 0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(iap_at_k(s, g, 90), 0.5);
  EXPECT_DOUBLE_EQ(iap(s, g), 0.5);
}

TEST(Iap, FullRecallIsReachedAtTheLowestThreshold) {
  // Every pixel passes the lowest threshold, so k = 100 always resolves and
  // the zero fallback never applies to a full sweep.
  BinaryMask m(1, 5);
  m.data[0] = m.data[2] = 1;
  const GroundTruth g(m);
  EXPECT_EQ(iap_at_k(scores_from(1, 5, {1, 0, 0, 0, 0}), g, 100), 0.4);
  EXPECT_THROW(iap_at_k(ScoreMap(1, 5), g, 101), ParameterError);
  EXPECT_THROW(iap(ScoreMap(2, 2), truth_from(2, 2, {})), UndefinedMetricError);
}

TEST(Oracle, RandomInstancesMatchBruteForce) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto s = random_metric_instance(rng);
    const std::vector<Sample> v{s};
    ASSERT_NEAR(pixel_auc(v), adabldm::testing::brute_force_auc(v), 1e-9);
    ASSERT_NEAR(pro(v), adabldm::testing::brute_force_pro(v, 0.3), 1e-9);
    ASSERT_NEAR(average_precision(v), adabldm::testing::brute_force_ap(v), 1e-9);
    ASSERT_NEAR(iap(v), adabldm::testing::brute_force_iap(v), 1e-9);
    ASSERT_NEAR(iap_at_k(v, 90), adabldm::testing::brute_force_iap_at_k(v, 90), 1e-9);
  }
}

TEST(Oracle, MultiImageComponentsStayPerImage) {
  Rng rng(4);
  std::vector<Sample> v;
  for (int i = 0; i < 4; ++i) v.push_back(random_metric_instance(rng));
  const auto m = evaluate(v);
  EXPECT_NEAR(m.iap, adabldm::testing::brute_force_iap(v), 1e-9);
  EXPECT_NEAR(m.pro, adabldm::testing::brute_force_pro(v, 0.3), 1e-9);
  EXPECT_NEAR(m.pixel_auc, adabldm::testing::brute_force_auc(v), 1e-9);
}

TEST(Invariance, StrictlyIncreasingTransformIsExact) {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    auto s = random_metric_instance(rng);
    const auto before = evaluate({s});
    for (double& v : s.scores.data) v = std::exp(3.0 * v) - 7.0;
    const auto after = evaluate({s});
    ASSERT_EQ(before.pixel_auc, after.pixel_auc);
    ASSERT_EQ(before.pro, after.pro);
    ASSERT_EQ(before.ap, after.ap);
    ASSERT_EQ(before.iap, after.iap);
    ASSERT_EQ(before.iap_at_k, after.iap_at_k);
  }
}

TEST(Monotonicity, RaisingTruePositiveNeverHurts) {
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    auto s = random_metric_instance(rng);
    const auto before = evaluate({s});
    const auto& comps = s.truth.components();
    const int idx = comps[0][0];
    s.scores.data[idx] += uniform(rng, 0.0, 1.0);
    const auto after = evaluate({s});
    ASSERT_GE(after.pixel_auc, before.pixel_auc - 1e-12);
    ASSERT_GE(after.ap, before.ap - 1e-12);
  }
}

TEST(Report, AggregateIsOrderIndependent) {
  Rng rng(7);
  std::vector<MetricScores> trials;
  for (int i = 0; i < 6; ++i) trials.push_back(evaluate({random_metric_instance(rng)}));
  const auto a = aggregate(trials);
  std::reverse(trials.begin(), trials.end());
  std::swap(trials[1], trials[4]);
  const auto b = aggregate(trials);
  EXPECT_EQ(a.mean.ap, b.mean.ap);
  EXPECT_EQ(a.stddev.iap, b.stddev.iap);
  EXPECT_EQ(a.mean.pro, b.mean.pro);
  EXPECT_NE(a.to_json().find("\"connectivity\": 4"), std::string::npos);
}

}  // namespace
}  // namespace adabldm::metrics
