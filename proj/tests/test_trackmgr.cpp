/*
 * Copyright 2026 The stmot Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "stmot/trackmgr.hpp"

namespace stmot {
namespace {

Detection at(Scalar u, Scalar v, int cls = 0, Scalar s_det = 0.9) {
  Detection d;
  d.u = u;
  d.v = v;
  d.cls = cls;
  d.s_det = s_det;
  return d;
}

Track track_at(Scalar u, Scalar v, Scalar vel_x, int64_t frame, int cls = 0) {
  Track t;
  t.id = 0;
  t.cls = cls;
  Detection b = at(u, v, cls);
  b.vel_x = vel_x;
  t.boxes[frame] = b;
  t.last_frame = frame;
  t.scores.push_back({0.9, 0.0, false});
  return t;
}

/// Dyadic random costs: exact in double, so summed totals compare exactly.
DenseTensor random_cost(std::mt19937_64& rng, int64_t n, int64_t m) {
  DenseTensor c({n, m});
  std::uniform_int_distribution<int> q(-1024, 1024);
  for (auto& v : c.data) v = static_cast<Scalar>(q(rng)) / 1024.0;
  return c;
}

// ---------------------------------------------------------------------------
// Distance ratio and cost

TEST(DistanceRatio, ZeroAtPredictedCenter) {
  const Track t = track_at(1.0, 2.0, 0.5, 9);
  EXPECT_DOUBLE_EQ(distance_ratio(at(1.5, 2.0), t, 4.0, 10), 0.0);
}

TEST(DistanceRatio, HalfGate) {
  const Track t = track_at(0.0, 0.0, 0.0, 9);
  EXPECT_DOUBLE_EQ(distance_ratio(at(2.0, 0.0), t, 4.0, 10), 0.5);
}

TEST(DistanceRatio, ExtrapolatesOverMissedFrames) {
  const Track t = track_at(0.0, 0.0, 1.0, 7);  // last seen 3 frames ago
  EXPECT_DOUBLE_EQ(distance_ratio(at(3.0, 0.0), t, 4.0, 10), 0.0);
}

TEST(DistanceRatio, ClippedIntoUnitInterval) {
  const Track t = track_at(0.0, 0.0, -3.0, 9);  // prediction runs away
  EXPECT_DOUBLE_EQ(distance_ratio(at(3.0, 0.0), t, 4.0, 10), 1.0);
}

TEST(BuildCost, BalancesDistanceAndScore) {
  MatchMatrix match(1, 1);
  match.set(0, 0, 0.0);
  match.probs(0, 0) = 0.8;  // fix S directly for arithmetic
  DenseTensor dist({1, 1}, {0.5});
  EXPECT_DOUBLE_EQ(build_cost(dist, match, 1.0)(0, 0), 0.5);    // pure geometric
  EXPECT_DOUBLE_EQ(build_cost(dist, match, 0.0)(0, 0), -0.8);   // pure learned
  EXPECT_DOUBLE_EQ(build_cost(dist, match, 0.5)(0, 0), -0.15);  // 0.25 - 0.40
}

TEST(BuildCost, InfeasibleEntriesGetSentinel) {
  MatchMatrix match(2, 2);
  match.set(0, 0, 0.0);
  DenseTensor dist({2, 2}, 0.25);
  const DenseTensor cost = build_cost(dist, match, 0.5);
  EXPECT_LT(cost(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(cost(0, 1), kInfeasibleCost);
  EXPECT_DOUBLE_EQ(cost(1, 0), kInfeasibleCost);
}

// ---------------------------------------------------------------------------
// Hungarian

TEST(Hungarian, SingleEntry) {
  DenseTensor cost({1, 1}, {0.3});
  const Assignment a = hungarian(cost);
  ASSERT_EQ(a.matches.size(), 1u);
  EXPECT_EQ(a.matches[0], (std::pair<int, int>{0, 0}));
}

TEST(Hungarian, TwoByTwoHandCase) {
  DenseTensor cost({2, 2}, {1.0, 2.0, 3.0, 1.0});
  const Assignment a = hungarian(cost);
  ASSERT_EQ(a.matches.size(), 2u);
  EXPECT_EQ(a.matches[0], (std::pair<int, int>{0, 0}));
  EXPECT_EQ(a.matches[1], (std::pair<int, int>{1, 1}));
  EXPECT_DOUBLE_EQ(a.total_cost, 2.0);
}

TEST(Hungarian, RectangularMatchesBruteForce) {
  std::mt19937_64 rng(3);
  const DenseTensor cost = random_cost(rng, 3, 5);
  const Assignment a = hungarian(cost);
  EXPECT_EQ(a.matches.size(), 3u);  // all rows matched on finite costs
  const auto [bm, bc] = testing::brute_force_assignment(cost, kInfeasibleThreshold);
  EXPECT_EQ(static_cast<int>(a.matches.size()), bm);
  EXPECT_EQ(a.total_cost, bc);  // dyadic costs: exact
}

TEST(Hungarian, OptimalOnRandomInstances) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t n = 1 + static_cast<int64_t>(rng() % 7);
    const int64_t m = 1 + static_cast<int64_t>(rng() % 7);
    const DenseTensor cost = random_cost(rng, n, m);
    const Assignment a = hungarian(cost);
    const auto [bm, bc] = testing::brute_force_assignment(cost, kInfeasibleThreshold);
    ASSERT_EQ(static_cast<int>(a.matches.size()), bm) << n << "x" << m;
    ASSERT_EQ(a.total_cost, bc) << n << "x" << m;
  }
}

TEST(Hungarian, InfeasiblePairsNeverMatched) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t n = 2 + static_cast<int64_t>(rng() % 5);
    const int64_t m = 2 + static_cast<int64_t>(rng() % 5);
    DenseTensor cost = random_cost(rng, n, m);
    for (auto& v : cost.data) {
      if ((rng() % 3) == 0) v = kInfeasibleCost;
    }
    const Assignment a = hungarian(cost);
    for (const auto& [i, j] : a.matches) EXPECT_LT(cost(i, j), kInfeasibleThreshold);
    const auto [bm, bc] = testing::brute_force_assignment(cost, kInfeasibleThreshold);
    ASSERT_EQ(static_cast<int>(a.matches.size()), bm);
    ASSERT_EQ(a.total_cost, bc);
  }
}

TEST(Hungarian, EmptyMatrix) {
  const Assignment a = hungarian(DenseTensor({0, 3}));
  EXPECT_TRUE(a.matches.empty());
  EXPECT_EQ(a.unmatched_cols.size(), 3u);
}

TEST(Hungarian, CostMonotonicityInMatchScore) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const int64_t n = 2 + static_cast<int64_t>(rng() % 4);
    const int64_t m = 2 + static_cast<int64_t>(rng() % 4);
    MatchMatrix match(n, m);
    DenseTensor dist({n, m});
    std::uniform_real_distribution<Scalar> u01(0.0, 1.0);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < m; ++j) {
        match.set(i, j, 0.0);
        match.probs(i, j) = u01(rng);
        dist(i, j) = u01(rng);
      }
    }
    const Scalar lambda_d = 0.5;
    const Assignment before = hungarian(build_cost(dist, match, lambda_d));
    ASSERT_FALSE(before.matches.empty());
    const auto [i0, j0] = before.matches[static_cast<size_t>(rng() % before.matches.size())];
    match.probs(i0, j0) = std::min<Scalar>(1.0, match.probs(i0, j0) + 0.3);
    const Assignment after = hungarian(build_cost(dist, match, lambda_d));
    bool still = false;
    for (const auto& [i, j] : after.matches) {
      if (i == i0 && j == j0) still = true;
    }
    EXPECT_TRUE(still);
  }
}

// ---------------------------------------------------------------------------
// Lifecycle

TEST(TrackSet, ThreeDetectionsFoundThreeTracks) {
  TrackSet ts;
  MatchMatrix match(3, 0);
  Assignment a;
  a.unmatched_rows = {0, 1, 2};
  ts.update({at(0, 0), at(5, 0), at(0, 5)}, match, a, 0);
  ASSERT_EQ(ts.live().size(), 3u);
  EXPECT_EQ(ts.live()[0].id, 0);
  EXPECT_EQ(ts.live()[1].id, 1);
  EXPECT_EQ(ts.live()[2].id, 2);
  EXPECT_EQ(ts.next_id(), 3);
}

TEST(TrackSet, DiesAfterStrictlyMoreThanTMisses) {
  TrackSet ts(TrackSetConfig{0.5, 0.2, 3});
  MatchMatrix m0(1, 0);
  Assignment a0;
  a0.unmatched_rows = {0};
  ts.update({at(0, 0)}, m0, a0, 0);
  ASSERT_EQ(ts.live().size(), 1u);
  for (int64_t frame = 1; frame <= 3; ++frame) {
    MatchMatrix m(0, 1);
    Assignment a;
    a.unmatched_cols = {0};
    ts.update({}, m, a, frame);
    EXPECT_EQ(ts.live().size(), 1u) << "still live at misses=" << frame;
  }
  MatchMatrix m(0, 1);
  Assignment a;
  a.unmatched_cols = {0};
  ts.update({}, m, a, 4);  // misses becomes 4 > T
  EXPECT_TRUE(ts.live().empty());
  ASSERT_EQ(ts.dead().size(), 1u);
  EXPECT_EQ(ts.dead()[0].misses, 4);
}

TEST(TrackSet, HistoryWindowSlides) {
  TrackSet ts(TrackSetConfig{0.5, 0.2, 3});
  MatchMatrix m0(1, 0);
  Assignment a0;
  a0.unmatched_rows = {0};
  ts.update({at(0, 0)}, m0, a0, 0);
  for (int64_t frame = 1; frame <= 5; ++frame) {
    MatchMatrix m(1, 1);
    m.set(0, 0, 0.0);
    Assignment a;
    a.matches = {{0, 0}};
    ts.update({at(static_cast<Scalar>(frame), 0)}, m, a, frame);
  }
  // Only the last T-1 = 2 boxes remain for alignment.
  ASSERT_EQ(ts.live().size(), 1u);
  EXPECT_EQ(ts.live()[0].boxes.size(), 2u);
  EXPECT_EQ(ts.live()[0].boxes.begin()->first, 4);
  const auto window = ts.live()[0].window_boxes(6, 3);
  EXPECT_EQ(window.size(), 2u);
  EXPECT_TRUE(window.count(2));
  EXPECT_TRUE(window.count(3));
}

TEST(TrackSet, NoDetectionJoinsTwoTracks) {
  TrackSet ts;
  MatchMatrix m0(2, 0);
  Assignment a0;
  a0.unmatched_rows = {0, 1};
  ts.update({at(0, 0), at(6, 0)}, m0, a0, 0);
  // One detection near both tracks: assignment pairs it with exactly one.
  MatchMatrix m(1, 2);
  m.set(0, 0, 2.0);
  m.set(0, 1, -2.0);
  DenseTensor dist({1, 2}, {0.1, 0.9});
  const Assignment a = hungarian(build_cost(dist, m, 0.5));
  ASSERT_EQ(a.matches.size(), 1u);
  ts.update({at(0.5, 0)}, m, a, 1);
  int matched_now = 0;
  for (const auto& t : ts.live()) {
    if (t.last_frame == 1) ++matched_now;
  }
  EXPECT_EQ(matched_now, 1);
}

TEST(TrackSet, IdsStrictlyIncreaseAndNeverRecycle) {
  TrackSet ts(TrackSetConfig{0.5, 0.2, 1});
  std::set<int64_t> seen;
  for (int64_t frame = 0; frame < 6; ++frame) {
    MatchMatrix m(1, static_cast<int64_t>(ts.live().size()));
    Assignment a;
    a.unmatched_rows = {0};  // never match: every det births a track
    for (int j = 0; j < static_cast<int>(ts.live().size()); ++j) a.unmatched_cols.push_back(j);
    ts.update({at(static_cast<Scalar>(frame) * 3, 0)}, m, a, frame);
    for (const auto& t : ts.live()) {
      EXPECT_TRUE(t.id >= 0);
      seen.insert(t.id);
    }
  }
  for (const auto& t : ts.dead()) seen.insert(t.id);
  EXPECT_EQ(static_cast<int64_t>(seen.size()), ts.next_id());
}

// ---------------------------------------------------------------------------
// Track confidence

TEST(TrackConfidence, DetectionOnlyAtLambdaZero) {
  Track t;
  t.scores = {{0.9, 0.5, true}, {0.7, 0.2, true}, {0.5, 0.0, false}};
  EXPECT_NEAR(track_confidence(t, 0.0), (0.9 + 0.7 + 0.5) / 3.0, 1e-15);
}

TEST(TrackConfidence, SingleMatchedFrameBlend) {
  Track t;
  t.scores = {{0.9, 0.5, true}};
  EXPECT_DOUBLE_EQ(track_confidence(t, 0.2), 0.8 * 0.9 + 0.2 * 0.5);
}

TEST(TrackConfidence, BirthFramesUseDetectionScoreAlone) {
  Track t;
  t.scores = {{0.6, 0.0, false}, {0.8, 1.0, true}};
  EXPECT_DOUBLE_EQ(track_confidence(t, 0.5), (0.6 + (0.5 * 0.8 + 0.5 * 1.0)) / 2.0);
}

TEST(TrackConfidence, StaysInUnitInterval) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<Scalar> u01(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Track t;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) t.scores.push_back({u01(rng), u01(rng), (rng() % 2) == 0});
    const Scalar c = track_confidence(t, u01(rng));
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
}

// ---------------------------------------------------------------------------
// Degenerate-lambda equivalence

TEST(Assignment, PureGeometricEqualsDirectLapOnD) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t n = 2 + static_cast<int64_t>(rng() % 4);
    const int64_t m = 2 + static_cast<int64_t>(rng() % 4);
    MatchMatrix match(n, m);
    DenseTensor dist({n, m});
    std::uniform_int_distribution<int> q(0, 1024);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < m; ++j) {
        if ((rng() % 4) != 0) match.set(i, j, 0.0);  // constant S on feasible pairs
        dist(i, j) = static_cast<Scalar>(q(rng)) / 1024.0;
      }
    }
    // lambda_d = 1: the learned score drops out entirely.
    const Assignment a = hungarian(build_cost(dist, match, 1.0));
    DenseTensor gated = dist;
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < m; ++j) {
        if (!match.is_feasible(i, j)) gated(i, j) = kInfeasibleCost;
      }
    }
    const Assignment b = hungarian(gated);
    EXPECT_EQ(a.matches, b.matches);
    EXPECT_EQ(a.total_cost, b.total_cost);
  }
}

}  // namespace
}  // namespace stmot
