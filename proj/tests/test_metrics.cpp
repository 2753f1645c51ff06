// Copyright 2026 The difftrack Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "difftrack/metrics.hpp"
#include "test_support.hpp"

namespace {

using namespace difftrack;
using testing_support::brute_hausdorff;
using testing_support::random_polyline;

TEST(Hausdorff, SmallExamples) {
  const std::vector<Vec3d> a = {{0, 0, 0}, {1, 0, 0}};
  const std::vector<Vec3d> b = {{0, 1, 0}, {1, 1, 0}};
  EXPECT_DOUBLE_EQ(hausdorff(a, b), 1.0);
  const std::vector<Vec3d> p = {{0, 0, 0}}, q = {{3, 4, 0}};
  EXPECT_DOUBLE_EQ(hausdorff(p, q), 5.0);
  EXPECT_EQ(hausdorff(a, a), 0.0);
}

TEST(Hausdorff, SubsetWithOneFarPoint) {
  const std::vector<Vec3d> a = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  std::vector<Vec3d> b = a;
  b.push_back({2, 10, 0});
  EXPECT_EQ(directed_hausdorff(a, b), 0.0);
  EXPECT_DOUBLE_EQ(directed_hausdorff(b, a), 10.0);
  EXPECT_DOUBLE_EQ(hausdorff(a, b), 10.0);
}

TEST(Hausdorff, MatchesBruteForce) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> len(1, 60);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_polyline(rng, len(rng), 20.0);
    const auto b = random_polyline(rng, len(rng), 20.0);
    EXPECT_EQ(hausdorff(a, b), brute_hausdorff(a, b));
  }
}

TEST(Hausdorff, MetricProperties) {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> shift(-5.0, 5.0), scale(0.1, 4.0);
  for (int i = 0; i < 300; ++i) {
    const auto a = random_polyline(rng, 15, 5.0);
    const auto b = random_polyline(rng, 22, 5.0);
    const auto c = random_polyline(rng, 9, 5.0);
    const double ab = hausdorff(a, b);
    EXPECT_EQ(ab, hausdorff(b, a));
    EXPECT_LE(ab, hausdorff(a, c) + hausdorff(c, b) + 1e-12);

    const Vec3d t{shift(rng), shift(rng), shift(rng)};
    const double s = scale(rng);
    std::vector<Vec3d> at, bt, as, bs;
    for (const Vec3d& p : a) {
      at.push_back(p + t);
      as.push_back(s * p);
    }
    for (const Vec3d& p : b) {
      bt.push_back(p + t);
      bs.push_back(s * p);
    }
    EXPECT_NEAR(hausdorff(at, bt), ab, 1e-12 * (1 + ab));
    EXPECT_NEAR(hausdorff(as, bs), s * ab, 1e-12 * (1 + s * ab));
  }
}

TEST(Hausdorff, EmptyInputRejected) {
  const std::vector<Vec3d> a = {{0, 0, 0}}, e;
  EXPECT_THROW(hausdorff(a, e), InvalidInput);
  EXPECT_THROW(hausdorff(e, a), InvalidInput);
}

TEST(Percentiles, NearestRankExamples) {
  const std::vector<double> v = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  EXPECT_EQ(nearest_rank(v, 10), 1);
  EXPECT_EQ(nearest_rank(v, 50), 5);
  EXPECT_EQ(nearest_rank(v, 95), 10);
  EXPECT_EQ(nearest_rank(v, 99), 10);
  EXPECT_EQ(nearest_rank(v, 0), 1);
  const std::vector<double> one = {4.5};
  for (int r : kReportRanks) EXPECT_EQ(nearest_rank(one, r), 4.5);
}

TEST(Percentiles, ReportMatchesSortedOracle) {
  std::mt19937_64 rng(33);
  std::exponential_distribution<double> d(0.7);
  for (int run = 0; run < 50; ++run) {
    std::vector<double> v(std::uniform_int_distribution<int>(1, 400)(rng));
    for (double& x : v) x = d(rng);
    const DistanceReport r = percentile_report(v);
    EXPECT_EQ(r.pair_distances, v);
    std::vector<double> s = v;
    std::sort(s.begin(), s.end());
    for (int rank : kReportRanks) {
      // Smallest value with at least rank percent of the sample at or below it.
      double expect = s.back();
      for (std::size_t k = 0; k < s.size(); ++k) {
        if (100.0 * double(k + 1) >= rank * double(s.size())) {
          expect = s[k];
          break;
        }
      }
      EXPECT_EQ(r.percentiles.at(rank), expect);
    }
    EXPECT_EQ(r.count_below_1mm,
              static_cast<std::size_t>(std::count_if(v.begin(), v.end(),
                                                     [](double x) { return x < 1.0; })));
  }
  EXPECT_THROW(percentile_report({}), InvalidInput);
}

TEST(Percentiles, IdenticalSetsReportZero) {
  std::mt19937_64 rng(34);
  std::vector<Streamline> a;
  for (int i = 0; i < 20; ++i) a.push_back(random_polyline(rng, 12, 30.0));
  const DistanceReport r = percentile_report(paired_hausdorff(a, a, false));
  for (int rank : kReportRanks) EXPECT_EQ(r.percentiles.at(rank), 0.0);
  EXPECT_EQ(r.count_below_1mm, 20u);
}

TEST(Percentiles, PairingAndCropping) {
  const std::vector<Streamline> a = {{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}},
                                     {{0, 0, 0}, {0, 1, 0}}};
  const std::vector<Streamline> b = {{{0, 0, 0}, {1, 0, 0}}, {{0, 0, 2}, {0, 1, 2}},
                                     {{9, 9, 9}, {9, 9, 8}}};
  const auto full = paired_hausdorff(a, b, false);
  ASSERT_EQ(full.size(), 2u);
  EXPECT_DOUBLE_EQ(full[0], 2.0);
  EXPECT_DOUBLE_EQ(full[1], 2.0);
  const auto cropped = paired_hausdorff(a, b, true);
  EXPECT_EQ(cropped[0], 0.0);
  EXPECT_DOUBLE_EQ(cropped[1], 2.0);
}

}  // namespace
