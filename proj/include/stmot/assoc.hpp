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

/// The association stage: identity-carrying tracks, the class + gating
/// distance hard-negative filter, training-pair generation from ground-truth
/// tracks, the detection-to-track match classifier, and the combined loss.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "stmot/detect.hpp"
#include "stmot/nn.hpp"
#include "stmot/tensor.hpp"
#include "stmot/trackalign.hpp"

namespace stmot {

/// Per-frame score record of a track: the detection confidence and, for
/// matched frames, the predicted match probability.
struct TrackScore {
  Scalar s_det = 0.0;
  Scalar match = 0.0;
  bool has_match = false;
};

/// An identity-carrying, time-indexed sequence of boxes. `boxes` maps
/// absolute frame index to the box observed there; only a sliding window of
/// recent boxes is retained for ROI alignment.
struct Track {
  int64_t id = -1;
  int cls = 0;
  std::map<int64_t, Detection> boxes;  // absolute frame -> box
  std::vector<TrackScore> scores;      // one per recorded frame
  int misses = 0;
  int64_t last_frame = -1;

  const Detection& most_recent_box() const {
    if (boxes.empty()) throw std::logic_error("Track: no boxes");
    return boxes.rbegin()->second;
  }

  /// Boxes of the window ending at `current_frame`, keyed by relative
  /// temporal index: the box of frame current_frame - 1 appears at t=2, and
  /// so on up to t=t_len.
  std::map<int, Detection> window_boxes(int64_t current_frame, int t_len) const {
    std::map<int, Detection> out;
    for (const auto& [frame, box] : boxes) {
      const int64_t t = current_frame - frame + 1;
      if (t >= 2 && t <= t_len) out[static_cast<int>(t)] = box;
    }
    return out;
  }
};

/// Per-class gating distance G in meters.
struct GatingTable {
  std::vector<Scalar> g;

  explicit GatingTable(std::vector<Scalar> values = {4.0, 1.0}) : g(std::move(values)) {
    for (Scalar v : g) {
      if (!(v > 0.0)) throw std::invalid_argument("GatingTable: G must be > 0");
    }
  }

  Scalar at(int cls) const {
    if (cls < 0 || cls >= static_cast<int>(g.size())) {
      throw std::out_of_range("GatingTable: unknown class " + std::to_string(cls));
    }
    return g[static_cast<size_t>(cls)];
  }
  int num_classes() const { return static_cast<int>(g.size()); }
};

/// Per-class focal-loss alpha (the post-filter positive-to-negative ratio).
struct FocalAlphaTable {
  std::vector<Scalar> alpha;

  explicit FocalAlphaTable(std::vector<Scalar> values = {4.0, 4.0}) : alpha(std::move(values)) {}

  Scalar at(int cls) const {
    if (cls < 0 || cls >= static_cast<int>(alpha.size())) {
      throw std::out_of_range("FocalAlphaTable: unknown class " + std::to_string(cls));
    }
    return alpha[static_cast<size_t>(cls)];
  }
};

// ---------------------------------------------------------------------------
// Heuristic filter

/// Box-level form: classes must match and the BEV center distance must be
/// strictly below the class gating distance.
inline bool heuristic_filter(Scalar au, Scalar av, int a_cls, Scalar bu, Scalar bv, int b_cls,
                             const GatingTable& gating) {
  if (a_cls != b_cls) return false;
  return bev_distance(au, av, bu, bv) < gating.at(a_cls);
}

/// Runtime form: a current-frame detection against a track's most recent box.
inline bool heuristic_filter(const Detection& det, const Track& track,
                             const GatingTable& gating) {
  const Detection& recent = track.most_recent_box();
  return heuristic_filter(det.u, det.v, det.cls, recent.u, recent.v, track.cls, gating);
}

// ---------------------------------------------------------------------------
// Training pairs

/// One ground-truth track restricted to the current window. `current` is the
/// t=1 box (absent when occluded at the current frame); `history` holds the
/// boxes at t in [2, T], with occluded frames missing.
struct GtTrackWindow {
  int64_t gt_id = -1;
  int cls = 0;
  bool has_current = false;
  Detection current;
  std::map<int, Detection> history;
};

struct TrainingPair {
  int det_index = 0;    // index into the det-side list
  int track_index = 0;  // index into the track-side list
  bool positive = false;
  int cls = 0;
};

struct TrainingPairSet {
  std::vector<int> det_side;    // indices into the input windows (has_current)
  std::vector<int> track_side;  // indices into the input windows (non-empty history)
  std::vector<TrainingPair> pairs;
  std::map<int, std::pair<int64_t, int64_t>> class_counts;  // cls -> (pos, neg)

  /// Post-filter positive:negative ratio for a class; 0 when unseen.
  Scalar pos_neg_ratio(int cls) const {
    auto it = class_counts.find(cls);
    if (it == class_counts.end() || it->second.second == 0) return 0.0;
    return static_cast<Scalar>(it->second.first) / static_cast<Scalar>(it->second.second);
  }
};

/// All combinations of a current-frame ground-truth box (standing in for a
/// detection) with a ground-truth track history. The (i == j) pair is the
/// positive; (i != j) pairs survive only when they pass the heuristic filter,
/// which compares the two tracks' current-frame positions.
inline TrainingPairSet gen_training_pairs(const std::vector<GtTrackWindow>& windows,
                                          const GatingTable& gating) {
  TrainingPairSet out;
  for (int k = 0; k < static_cast<int>(windows.size()); ++k) {
    if (windows[static_cast<size_t>(k)].has_current) out.det_side.push_back(k);
    if (!windows[static_cast<size_t>(k)].history.empty()) out.track_side.push_back(k);
  }
  auto anchor_of = [](const GtTrackWindow& w) -> const Detection& {
    // The track's current-frame position; falls back to its most recent
    // history box when the current frame is occluded.
    return w.has_current ? w.current : w.history.begin()->second;
  };
  for (size_t di = 0; di < out.det_side.size(); ++di) {
    const GtTrackWindow& wi = windows[static_cast<size_t>(out.det_side[di])];
    for (size_t tj = 0; tj < out.track_side.size(); ++tj) {
      const GtTrackWindow& wj = windows[static_cast<size_t>(out.track_side[tj])];
      const bool positive = wi.gt_id == wj.gt_id;
      if (!positive) {
        const Detection& anchor = anchor_of(wj);
        if (!heuristic_filter(wi.current.u, wi.current.v, wi.cls, anchor.u, anchor.v, wj.cls,
                              gating)) {
          continue;
        }
      }
      out.pairs.push_back(
          {static_cast<int>(di), static_cast<int>(tj), positive, wi.cls});
      auto& counts = out.class_counts[wi.cls];
      (positive ? counts.first : counts.second) += 1;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Match classifier

/// N x M match probabilities with the feasibility mask from the filter.
/// Infeasible entries hold probability 0 and are never used for assignment.
struct MatchMatrix {
  int64_t n = 0, m = 0;
  DenseTensor probs;              // (N, M)
  DenseTensor logits;             // (N, M)
  std::vector<uint8_t> feasible;  // N*M

  MatchMatrix() = default;
  MatchMatrix(int64_t n_, int64_t m_)
      : n(n_), m(m_), probs({n_, m_}), logits({n_, m_}),
        feasible(static_cast<size_t>(n_ * m_), 0) {}

  bool is_feasible(int64_t i, int64_t j) const {
    return feasible[static_cast<size_t>(i * m + j)] != 0;
  }
  void set(int64_t i, int64_t j, Scalar logit) {
    feasible[static_cast<size_t>(i * m + j)] = 1;
    logits(i, j) = logit;
    probs(i, j) = sigmoid(logit);
  }
};

/// Flattens an ROI grid and runs it through a small MLP to one match logit.
class MatchClassifier {
 public:
  struct Cache {
    Mlp::Cache mlp;
    std::vector<int64_t> grid_shape;
  };

  MatchClassifier() = default;
  MatchClassifier(ParamStore& ps, const std::string& prefix, int64_t channels, int64_t bins,
                  const std::vector<int64_t>& hidden, std::mt19937_64& rng) {
    std::vector<int64_t> widths;
    widths.push_back(channels * bins * bins);
    for (int64_t hw : hidden) widths.push_back(hw);
    widths.push_back(1);
    mlp_ = Mlp(ps, prefix + ".mlp", widths, rng);
  }

  int64_t in_features() const { return mlp_.in_features(); }

  Scalar forward(const DenseTensor& roi_grid, Cache* cache = nullptr) const {
    if (roi_grid.numel() != mlp_.in_features()) {
      throw std::invalid_argument("MatchClassifier: ROI grid size mismatch");
    }
    DenseTensor flat({1, roi_grid.numel()}, roi_grid.data);
    DenseTensor logit = mlp_.forward(flat, cache ? &cache->mlp : nullptr);
    if (cache) cache->grid_shape = roi_grid.shape;
    return logit[0];
  }

  /// Returns the gradient w.r.t. the ROI grid.
  DenseTensor backward(const Cache& cache, Scalar d_logit) const {
    DenseTensor dy({1, 1});
    dy[0] = d_logit;
    DenseTensor d_flat = mlp_.backward(cache.mlp, dy);
    return DenseTensor(cache.grid_shape, std::move(d_flat.data));
  }

 private:
  Mlp mlp_;
};

// ---------------------------------------------------------------------------
// Losses

struct TrackLossResult {
  Scalar loss = 0.0;
  std::vector<Scalar> d_logits;
};

/// Mean binary focal loss over the generated pairs; alpha comes from the
/// per-class table, gamma is shared.
inline TrackLossResult track_match_loss(const std::vector<Scalar>& logits,
                                        const std::vector<uint8_t>& positives,
                                        const std::vector<int>& classes,
                                        const FocalAlphaTable& alphas, Scalar gamma) {
  if (logits.size() != positives.size() || logits.size() != classes.size()) {
    throw std::invalid_argument("track_match_loss: size mismatch");
  }
  TrackLossResult out;
  out.d_logits.assign(logits.size(), 0.0);
  if (logits.empty()) return out;
  const Scalar inv_n = 1.0 / static_cast<Scalar>(logits.size());
  long double acc = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    FocalLossConfig cfg{alphas.at(classes[i]), gamma};
    const FocalLossResult r = binary_focal_loss(logits[i], positives[i] != 0, cfg);
    acc += r.loss;
    out.d_logits[i] = r.dloss_dlogit * inv_n;
  }
  out.loss = static_cast<Scalar>(acc) * inv_n;
  return out;
}

struct TotalLoss {
  Scalar total = 0.0;
  Scalar det = 0.0;
  Scalar track = 0.0;
};

/// L = L_det + lambda_track * L_track, with both terms reported separately.
inline TotalLoss total_loss(Scalar l_det, Scalar l_track, Scalar lambda_track) {
  if (!std::isfinite(l_det) || !std::isfinite(l_track)) {
    throw std::invalid_argument("total_loss: non-finite term");
  }
  return {l_det + lambda_track * l_track, l_det, l_track};
}

}  // namespace stmot
