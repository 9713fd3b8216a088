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

/// Track match and confidence update: the velocity-backprojected distance
/// ratio, the blended cost matrix, an exact Hungarian solver over feasible
/// pairs, track lifecycle (birth, misses, death), and the match-score
/// augmented track confidence.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "stmot/assoc.hpp"
#include "stmot/detect.hpp"
#include "stmot/tensor.hpp"

namespace stmot {

/// Finite stand-in for +inf in cost matrices. Any feasible entry satisfies
/// |cost| <= 1, so this cleanly dominates every real assignment.
inline constexpr Scalar kInfeasibleCost = 1e6;

/// Matches above this are treated as forced pads and discarded.
inline constexpr Scalar kInfeasibleThreshold = 0.5 * kInfeasibleCost;

// ---------------------------------------------------------------------------
// Distance ratio and cost

/// Gated, velocity-backprojected center distance normalized by the class
/// gating distance. The track's most recent box is advanced by its own
/// per-frame velocity once per elapsed frame; callers only evaluate pairs
/// that passed the filter, and the ratio is clipped into [0, 1].
inline Scalar distance_ratio(const Detection& det, const Track& track, Scalar gate,
                             int64_t current_frame) {
  const Detection& recent = track.most_recent_box();
  const auto gap = static_cast<Scalar>(current_frame - track.last_frame);
  const Scalar pred_u = recent.u + recent.vel_x * gap;
  const Scalar pred_v = recent.v + recent.vel_y * gap;
  const Scalar d = bev_distance(det.u, det.v, pred_u, pred_v) / gate;
  return std::min<Scalar>(d, 1.0);
}

/// lambda_d * D - (1 - lambda_d) * S on feasible entries, kInfeasibleCost
/// elsewhere. D and S must share shape; the mask comes from the match matrix.
inline DenseTensor build_cost(const DenseTensor& dist_ratio, const MatchMatrix& match,
                              Scalar lambda_d) {
  if (dist_ratio.rank() != 2 || dist_ratio.dim(0) != match.n || dist_ratio.dim(1) != match.m) {
    throw std::invalid_argument("build_cost: shape mismatch");
  }
  if (!(lambda_d >= 0.0 && lambda_d <= 1.0)) {
    throw std::invalid_argument("build_cost: lambda_d must be in [0, 1]");
  }
  DenseTensor cost({match.n, match.m});
  for (int64_t i = 0; i < match.n; ++i) {
    for (int64_t j = 0; j < match.m; ++j) {
      cost(i, j) = match.is_feasible(i, j)
                       ? lambda_d * dist_ratio(i, j) - (1.0 - lambda_d) * match.probs(i, j)
                       : kInfeasibleCost;
    }
  }
  return cost;
}

// ---------------------------------------------------------------------------
// Hungarian assignment

struct Assignment {
  std::vector<std::pair<int, int>> matches;  // (row, column) = (det, track)
  std::vector<int> unmatched_rows;
  std::vector<int> unmatched_cols;
  Scalar total_cost = 0.0;  // over real matches only
};

/// Exact minimum-cost assignment via shortest augmenting paths with
/// potentials. The matrix is padded square with kInfeasibleCost, which makes
/// the solver first maximize the number of feasible matches and then minimize
/// their summed cost; padded or infeasible matches are dropped from the
/// result.
inline Assignment hungarian(const DenseTensor& cost) {
  if (cost.rank() != 2) throw std::invalid_argument("hungarian: cost must be 2D");
  const int64_t n_rows = cost.dim(0), n_cols = cost.dim(1);
  Assignment out;
  if (n_rows == 0 || n_cols == 0) {
    for (int i = 0; i < n_rows; ++i) out.unmatched_rows.push_back(i);
    for (int j = 0; j < n_cols; ++j) out.unmatched_cols.push_back(j);
    return out;
  }
  const int64_t n = std::max(n_rows, n_cols);
  auto a = [&](int64_t i, int64_t j) -> Scalar {
    if (i < n_rows && j < n_cols) return cost(i, j);
    return kInfeasibleCost;
  };

  const Scalar inf = std::numeric_limits<Scalar>::infinity();
  std::vector<Scalar> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int64_t> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<Scalar> minv(static_cast<size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<size_t>(n) + 1, false);
    do {
      used[static_cast<size_t>(j0)] = true;
      const int64_t i0 = p[static_cast<size_t>(j0)];
      Scalar delta = inf;
      int64_t j1 = -1;
      for (int64_t j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const Scalar cur = a(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int64_t j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }

  std::vector<char> row_matched(static_cast<size_t>(n_rows), false);
  std::vector<char> col_matched(static_cast<size_t>(n_cols), false);
  for (int64_t j = 1; j <= n; ++j) {
    const int64_t i = p[static_cast<size_t>(j)];
    if (i >= 1 && i <= n_rows && j <= n_cols && cost(i - 1, j - 1) < kInfeasibleThreshold) {
      out.matches.emplace_back(static_cast<int>(i - 1), static_cast<int>(j - 1));
      out.total_cost += cost(i - 1, j - 1);
      row_matched[static_cast<size_t>(i - 1)] = true;
      col_matched[static_cast<size_t>(j - 1)] = true;
    }
  }
  std::sort(out.matches.begin(), out.matches.end());
  for (int i = 0; i < n_rows; ++i) {
    if (!row_matched[static_cast<size_t>(i)]) out.unmatched_rows.push_back(i);
  }
  for (int j = 0; j < n_cols; ++j) {
    if (!col_matched[static_cast<size_t>(j)]) out.unmatched_cols.push_back(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Track lifecycle

struct TrackSetConfig {
  Scalar lambda_d = 0.5;
  Scalar lambda_s = 0.2;
  int t_len = 3;
};

/// Mean over the track's recorded frames of
/// (1 - lambda_s) * s_det + lambda_s * S; frames without a match score
/// (track birth) contribute s_det alone.
inline Scalar track_confidence(const Track& track, Scalar lambda_s) {
  if (track.scores.empty()) throw std::invalid_argument("track_confidence: no recorded frames");
  long double acc = 0.0;
  for (const TrackScore& s : track.scores) {
    acc += s.has_match ? (1.0 - lambda_s) * s.s_det + lambda_s * s.match : s.s_det;
  }
  return static_cast<Scalar>(acc / static_cast<long double>(track.scores.size()));
}

/// Live and retired tracks plus the id counter. Ids are never reused.
class TrackSet {
 public:
  explicit TrackSet(TrackSetConfig cfg = {}) : cfg_(cfg) {}

  const TrackSetConfig& config() const { return cfg_; }
  std::vector<Track>& live() { return live_; }
  const std::vector<Track>& live() const { return live_; }
  const std::vector<Track>& dead() const { return dead_; }
  int64_t next_id() const { return next_id_; }

  /// Applies an assignment: matched detections extend their track and record
  /// (s_det, S_ij); unmatched detections found new tracks; unmatched tracks
  /// accrue a miss and retire once misses exceed T. Box histories are pruned
  /// to the last T-1 frames, which is all ROI alignment can consume.
  void update(const std::vector<Detection>& dets, const MatchMatrix& match,
              const Assignment& assignment, int64_t frame) {
    std::vector<char> det_used(dets.size(), false);
    std::vector<char> track_matched(live_.size(), false);
    for (const auto& [di, tj] : assignment.matches) {
      Track& tr = live_.at(static_cast<size_t>(tj));
      const Detection& det = dets.at(static_cast<size_t>(di));
      tr.boxes[frame] = det;
      tr.last_frame = frame;
      tr.misses = 0;
      tr.scores.push_back({det.s_det, match.probs(di, tj), true});
      det_used[static_cast<size_t>(di)] = true;
      track_matched[static_cast<size_t>(tj)] = true;
    }
    for (size_t di = 0; di < dets.size(); ++di) {
      if (det_used[di]) continue;
      Track tr;
      tr.id = next_id_++;
      tr.cls = dets[di].cls;
      tr.boxes[frame] = dets[di];
      tr.last_frame = frame;
      tr.scores.push_back({dets[di].s_det, 0.0, false});
      live_.push_back(std::move(tr));
    }
    std::vector<Track> kept;
    kept.reserve(live_.size());
    for (size_t tj = 0; tj < live_.size(); ++tj) {
      Track& tr = live_[tj];
      if (tj < track_matched.size() && !track_matched[tj]) tr.misses += 1;
      // Slide the history window: ROI alignment reaches back T-1 frames. The
      // most recent box always stays so the gating filter has an anchor.
      while (tr.boxes.size() > 1 && tr.boxes.begin()->first < frame - (cfg_.t_len - 2)) {
        tr.boxes.erase(tr.boxes.begin());
      }
      if (tr.misses > cfg_.t_len) {
        dead_.push_back(std::move(tr));  // unmatched for longer than T
      } else {
        kept.push_back(std::move(tr));
      }
    }
    live_ = std::move(kept);
  }

 private:
  TrackSetConfig cfg_;
  std::vector<Track> live_;
  std::vector<Track> dead_;
  int64_t next_id_ = 0;
};

}  // namespace stmot
