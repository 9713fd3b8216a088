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

#include "stmot/assoc.hpp"
#include "stmot/nn.hpp"

namespace stmot {
namespace {

Detection at(Scalar u, Scalar v, int cls = 0) {
  Detection d;
  d.u = u;
  d.v = v;
  d.cls = cls;
  d.w = 1.8;
  d.l = 4.2;
  d.h = 1.5;
  d.s_det = 0.9;
  return d;
}

GtTrackWindow gt_window(int64_t id, int cls, Scalar u, Scalar v, int history_len = 2) {
  GtTrackWindow w;
  w.gt_id = id;
  w.cls = cls;
  w.has_current = true;
  w.current = at(u, v, cls);
  for (int t = 2; t < 2 + history_len; ++t) {
    w.history[t] = at(u - 0.5 * t, v, cls);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Heuristic filter

TEST(HeuristicFilter, SameClassZeroDistance) {
  const GatingTable gating({4.0, 1.0});
  EXPECT_TRUE(heuristic_filter(1.0, 2.0, 0, 1.0, 2.0, 0, gating));
}

TEST(HeuristicFilter, ClassMismatchAlwaysFails) {
  const GatingTable gating({4.0, 1.0});
  EXPECT_FALSE(heuristic_filter(0.0, 0.0, 0, 0.0, 0.0, 1, gating));
}

TEST(HeuristicFilter, GateIsStrict) {
  const GatingTable gating({4.0, 1.0});
  EXPECT_FALSE(heuristic_filter(0.0, 0.0, 0, 4.0, 0.0, 0, gating));  // exactly G
  EXPECT_TRUE(heuristic_filter(0.0, 0.0, 0, 3.999, 0.0, 0, gating));
}

TEST(HeuristicFilter, RuntimeFormUsesMostRecentBox) {
  const GatingTable gating({4.0, 1.0});
  Track tr;
  tr.cls = 0;
  tr.boxes[3] = at(0.0, 0.0);
  tr.boxes[5] = at(10.0, 0.0);  // most recent
  tr.last_frame = 5;
  EXPECT_FALSE(heuristic_filter(at(0.0, 0.0), tr, gating));
  EXPECT_TRUE(heuristic_filter(at(9.0, 0.0), tr, gating));
}

TEST(GatingTable, Validation) {
  EXPECT_THROW(GatingTable({4.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(GatingTable({4.0}).at(3), std::out_of_range);
}

// ---------------------------------------------------------------------------
// Training pairs

TEST(TrainingPairs, SingleTrack) {
  const GatingTable gating({4.0, 1.0});
  const TrainingPairSet set = gen_training_pairs({gt_window(0, 0, 1.0, 1.0)}, gating);
  ASSERT_EQ(set.pairs.size(), 1u);
  EXPECT_TRUE(set.pairs[0].positive);
}

TEST(TrainingPairs, TwoNearbyTracksKeepHardNegatives) {
  const GatingTable gating({4.0, 1.0});
  const TrainingPairSet set =
      gen_training_pairs({gt_window(0, 0, 0.0, 0.0), gt_window(1, 0, 2.0, 0.0)}, gating);
  int64_t pos = 0, neg = 0;
  for (const auto& p : set.pairs) (p.positive ? pos : neg) += 1;
  EXPECT_EQ(pos, 2);
  EXPECT_EQ(neg, 2);
}

TEST(TrainingPairs, CrossClassNegativesFiltered) {
  const GatingTable gating({4.0, 1.0});
  const TrainingPairSet set =
      gen_training_pairs({gt_window(0, 0, 0.0, 0.0), gt_window(1, 1, 0.5, 0.0)}, gating);
  int64_t pos = 0, neg = 0;
  for (const auto& p : set.pairs) (p.positive ? pos : neg) += 1;
  EXPECT_EQ(pos, 2);
  EXPECT_EQ(neg, 0);
}

TEST(TrainingPairs, LabelCountProperty) {
  const GatingTable gating({4.0, 1.0});
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<Scalar> pos(-10.0, 10.0);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = 1 + static_cast<int>(rng() % 6);
    std::vector<GtTrackWindow> windows;
    for (int i = 0; i < k; ++i) {
      windows.push_back(gt_window(i, static_cast<int>(rng() % 2), pos(rng), pos(rng)));
    }
    const TrainingPairSet set = gen_training_pairs(windows, gating);
    int64_t p = 0, n = 0;
    for (const auto& pr : set.pairs) (pr.positive ? p : n) += 1;
    EXPECT_EQ(p, k);  // positives == K, never filtered
    EXPECT_LE(n, static_cast<int64_t>(k) * (k - 1));

    // Equality holds exactly when no cross pair fails the filter.
    bool any_filtered = false;
    for (int i = 0; i < k && !any_filtered; ++i) {
      for (int j = 0; j < k; ++j) {
        if (i == j) continue;
        if (!heuristic_filter(windows[i].current.u, windows[i].current.v, windows[i].cls,
                              windows[j].current.u, windows[j].current.v, windows[j].cls,
                              gating)) {
          any_filtered = true;
          break;
        }
      }
    }
    EXPECT_EQ(n == static_cast<int64_t>(k) * (k - 1), !any_filtered);
  }
}

TEST(TrainingPairs, PosNegRatioRecorded) {
  const GatingTable gating({4.0, 1.0});
  const TrainingPairSet set =
      gen_training_pairs({gt_window(0, 0, 0.0, 0.0), gt_window(1, 0, 1.0, 0.0)}, gating);
  EXPECT_DOUBLE_EQ(set.pos_neg_ratio(0), 1.0);  // 2 positives : 2 negatives
  EXPECT_DOUBLE_EQ(set.pos_neg_ratio(1), 0.0);  // class unseen
}

// ---------------------------------------------------------------------------
// Match classifier

TEST(MatchClassifier, ZeroFinalLayerGivesHalfProbability) {
  ParamStore ps;
  std::mt19937_64 rng(7);
  MatchClassifier clf(ps, "clf", 3, 4, {8}, rng);
  // Zero the last layer: logits become exactly 0 regardless of the input.
  ps.at("clf.mlp.fc1.w").value.fill(0.0);
  ps.at("clf.mlp.fc1.b").value.fill(0.0);
  DenseTensor roi({3, 4, 4});
  const Scalar logit = clf.forward(roi);
  EXPECT_DOUBLE_EQ(sigmoid(logit), 0.5);
}

TEST(MatchClassifier, OutputsAreProbabilities) {
  ParamStore ps;
  std::mt19937_64 rng(8);
  MatchClassifier clf(ps, "clf", 2, 3, {8, 4}, rng);
  for (int trial = 0; trial < 10; ++trial) {
    DenseTensor roi({2, 3, 3});
    init_normal(roi, rng, 2.0);
    const Scalar p = sigmoid(clf.forward(roi));
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
}

TEST(MatchMatrix, MaskMatchesFeasibility) {
  MatchMatrix m(2, 3);
  m.set(0, 1, 0.7);
  m.set(1, 2, -0.4);
  EXPECT_TRUE(m.is_feasible(0, 1));
  EXPECT_TRUE(m.is_feasible(1, 2));
  EXPECT_FALSE(m.is_feasible(0, 0));
  EXPECT_DOUBLE_EQ(m.probs(0, 0), 0.0);  // masked entries never carry scores
  EXPECT_NEAR(m.probs(0, 1), sigmoid(0.7), 1e-15);
}

TEST(MatchClassifier, GradCheckThroughMlp) {
  ParamStore ps;
  std::mt19937_64 rng(9);
  MatchClassifier clf(ps, "clf", 2, 3, {6}, rng);
  DenseTensor roi({2, 3, 3});
  init_normal(roi, rng, 1.0);
  MatchClassifier::Cache cache;
  clf.forward(roi, &cache);
  const DenseTensor d_roi = clf.backward(cache, 1.0);
  auto f = [&clf](const DenseTensor& r) { return clf.forward(r); };
  EXPECT_LT(grad_check(f, roi, d_roi, 1e-6), 1e-3);
}

// ---------------------------------------------------------------------------
// Losses

TEST(TrackMatchLoss, MeanAndGradient) {
  const FocalAlphaTable alphas({4.0, 2.0});
  const std::vector<Scalar> logits{0.3, -0.7, 1.2};
  const std::vector<uint8_t> labels{1, 0, 0};
  const std::vector<int> classes{0, 0, 1};
  const TrackLossResult r = track_match_loss(logits, labels, classes, alphas, 2.0);

  long double expect = 0.0;
  expect += binary_focal_loss(0.3, true, {4.0, 2.0}).loss;
  expect += binary_focal_loss(-0.7, false, {4.0, 2.0}).loss;
  expect += binary_focal_loss(1.2, false, {2.0, 2.0}).loss;
  EXPECT_NEAR(r.loss, static_cast<Scalar>(expect / 3.0), 1e-12);

  DenseTensor x({3}, logits);
  DenseTensor analytic({3}, r.d_logits);
  auto f = [&](const DenseTensor& t) {
    return track_match_loss({t[0], t[1], t[2]}, labels, classes, alphas, 2.0).loss;
  };
  EXPECT_LT(grad_check(f, x, analytic, 1e-6), 1e-4);
}

TEST(TrackMatchLoss, EmptyPairsGiveZero) {
  const FocalAlphaTable alphas({4.0});
  const TrackLossResult r = track_match_loss({}, {}, {}, alphas, 2.0);
  EXPECT_DOUBLE_EQ(r.loss, 0.0);
  EXPECT_TRUE(r.d_logits.empty());
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_DOUBLE_EQ(total_loss(0.4, 0.2, 0.0).total, 0.4);  // detector only
  EXPECT_DOUBLE_EQ(total_loss(0.4, 0.2, 1.0).total, 0.6);
  const TotalLoss t = total_loss(0.4, 0.2, 1.0);
  EXPECT_DOUBLE_EQ(t.det, 0.4);
  EXPECT_DOUBLE_EQ(t.track, 0.2);
  EXPECT_THROW(total_loss(std::nan(""), 0.0, 1.0), std::invalid_argument);
}

}  // namespace
}  // namespace stmot
