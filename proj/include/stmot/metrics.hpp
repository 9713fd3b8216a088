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

/// Tracking evaluation: per-frame greedy matching by confidence, CLEAR-MOT
/// accounting (FP, FN, IDS, FRAG), MOTA, recall, a confidence-swept AMOTA,
/// and a center-distance detection AP for the ablation comparisons.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "stmot/detect.hpp"
#include "stmot/tensor.hpp"

namespace stmot {

/// One predicted track box (a track dump row).
struct PredBox {
  int scene = 0;
  int64_t frame = 0;
  int64_t track_id = 0;
  int cls = 0;
  Scalar u = 0.0, v = 0.0;
  Scalar conf = 0.0;  // track confidence at emit time
};

/// One ground-truth box with its persistent trajectory id.
struct GtBox {
  int scene = 0;
  int64_t frame = 0;
  int64_t gt_id = 0;
  int cls = 0;
  Scalar u = 0.0, v = 0.0;
};

inline constexpr Scalar kMatchDistance = 2.0;  // meters, BEV center distance
inline constexpr int kRecallSteps = 40;

// ---------------------------------------------------------------------------
// Per-frame matching

struct FrameMatch {
  std::vector<std::pair<int64_t, int64_t>> pairs;  // (gt_id, track_id)
  int64_t fp = 0;
  int64_t fn = 0;
};

/// Greedy, confidence-ordered matching of predictions to ground truth within
/// dist_thresh, class-exact. Each side is used at most once.
inline FrameMatch match_frame(const std::vector<GtBox>& gts, const std::vector<PredBox>& preds,
                              Scalar dist_thresh = kMatchDistance) {
  FrameMatch out;
  std::vector<size_t> order(preds.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&preds](size_t a, size_t b) {
    if (preds[a].conf != preds[b].conf) return preds[a].conf > preds[b].conf;
    return preds[a].track_id < preds[b].track_id;
  });
  std::vector<char> gt_used(gts.size(), false);
  for (size_t oi : order) {
    const PredBox& p = preds[oi];
    int64_t best = -1;
    Scalar best_d = dist_thresh;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_used[gi] || gts[gi].cls != p.cls) continue;
      const Scalar d = bev_distance(p.u, p.v, gts[gi].u, gts[gi].v);
      if (d <= best_d) {  // inclusive threshold
        best_d = d;
        best = static_cast<int64_t>(gi);
      }
    }
    if (best >= 0) {
      gt_used[static_cast<size_t>(best)] = true;
      out.pairs.emplace_back(gts[static_cast<size_t>(best)].gt_id, p.track_id);
    } else {
      out.fp += 1;
    }
  }
  out.fn = static_cast<int64_t>(gts.size()) - static_cast<int64_t>(out.pairs.size());
  return out;
}

// ---------------------------------------------------------------------------
// Scene-set accounting

struct MatchEvents {
  int64_t num_gt = 0;
  int64_t matches = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t ids = 0;
  int64_t frag = 0;
};

/// Runs per-frame matching over the whole dump and accumulates CLEAR-MOT
/// events. IDS counts a change of the matched track id between a ground-truth
/// trajectory's consecutive matched frames; FRAG counts tracked -> untracked
/// -> tracked transitions along each trajectory's existing frames.
inline MatchEvents accumulate_events(const std::vector<GtBox>& gts,
                                     const std::vector<PredBox>& preds,
                                     Scalar dist_thresh = kMatchDistance) {
  std::map<std::pair<int, int64_t>, std::vector<GtBox>> gt_by_frame;
  std::map<std::pair<int, int64_t>, std::vector<PredBox>> pred_by_frame;
  for (const GtBox& g : gts) gt_by_frame[{g.scene, g.frame}].push_back(g);
  for (const PredBox& p : preds) pred_by_frame[{p.scene, p.frame}].push_back(p);

  std::set<std::pair<int, int64_t>> frames;
  for (const auto& [k, v] : gt_by_frame) frames.insert(k);
  for (const auto& [k, v] : pred_by_frame) frames.insert(k);

  MatchEvents ev;
  std::map<std::pair<int, int64_t>, int64_t> last_matched_track;        // (scene, gt_id)
  std::map<std::pair<int, int64_t>, std::vector<char>> timelines;       // tracked status
  for (const auto& key : frames) {
    static const std::vector<GtBox> no_gt;
    static const std::vector<PredBox> no_pred;
    const auto git = gt_by_frame.find(key);
    const auto pit = pred_by_frame.find(key);
    const auto& g = git == gt_by_frame.end() ? no_gt : git->second;
    const auto& p = pit == pred_by_frame.end() ? no_pred : pit->second;
    const FrameMatch fm = match_frame(g, p, dist_thresh);
    ev.num_gt += static_cast<int64_t>(g.size());
    ev.matches += static_cast<int64_t>(fm.pairs.size());
    ev.fp += fm.fp;
    ev.fn += fm.fn;
    std::set<int64_t> matched_gt;
    for (const auto& [gt_id, track_id] : fm.pairs) {
      matched_gt.insert(gt_id);
      const std::pair<int, int64_t> tkey{key.first, gt_id};
      auto it = last_matched_track.find(tkey);
      if (it != last_matched_track.end() && it->second != track_id) ev.ids += 1;
      last_matched_track[tkey] = track_id;
    }
    for (const GtBox& gb : g) {
      timelines[{key.first, gb.gt_id}].push_back(matched_gt.count(gb.gt_id) ? 1 : 0);
    }
  }
  for (const auto& [key, timeline] : timelines) {
    bool in_gap = false, seen_tracked = false;
    for (char tracked : timeline) {
      if (tracked) {
        if (seen_tracked && in_gap) ev.frag += 1;
        seen_tracked = true;
        in_gap = false;
      } else if (seen_tracked) {
        in_gap = true;
      }
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// MOTA / AMOTA

/// MOTA = 1 - (FP + FN + IDS) / num_GT; absent when there is no ground truth.
inline std::optional<Scalar> mota(const MatchEvents& ev) {
  if (ev.num_gt == 0) return std::nullopt;
  return 1.0 - static_cast<Scalar>(ev.fp + ev.fn + ev.ids) / static_cast<Scalar>(ev.num_gt);
}

/// Track-level confidence: the confidence recorded at the track's last
/// emitted frame, i.e. the average over its whole life.
inline std::map<std::pair<int, int64_t>, Scalar> track_confidences(
    const std::vector<PredBox>& preds) {
  std::map<std::pair<int, int64_t>, std::pair<int64_t, Scalar>> latest;
  for (const PredBox& p : preds) {
    auto& slot = latest[{p.scene, p.track_id}];
    if (slot.first <= p.frame) slot = {p.frame, p.conf};
  }
  std::map<std::pair<int, int64_t>, Scalar> out;
  for (const auto& [key, fc] : latest) out[key] = fc.second;
  return out;
}

struct AmotaResult {
  Scalar amota = 0.0;
  std::vector<Scalar> motar;  // per recall target, 0 where unachievable
};

/// Sweeps kRecallSteps recall targets r = k/40. For each target the highest
/// confidence threshold whose achieved recall reaches r is selected, and
/// MOTAR = max(0, 1 - (IDS_r + FP_r + FN_r - (1-r)*P) / (r*P)) is evaluated
/// at the achieved recall (which makes the FN term cancel exactly). AMOTA is
/// the mean over all targets with unachievable ones contributing 0.
inline AmotaResult amota(const std::vector<GtBox>& gts, const std::vector<PredBox>& preds,
                         Scalar dist_thresh = kMatchDistance) {
  AmotaResult out;
  out.motar.assign(kRecallSteps, 0.0);
  if (gts.empty()) return out;
  const auto confs = track_confidences(preds);

  std::vector<Scalar> thresholds;
  for (const auto& [key, c] : confs) thresholds.push_back(c);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  struct Sweep {
    Scalar recall;
    MatchEvents ev;
  };
  std::vector<Sweep> sweeps;  // threshold descending => recall non-decreasing
  for (Scalar tau : thresholds) {
    std::vector<PredBox> kept;
    for (const PredBox& p : preds) {
      if (confs.at({p.scene, p.track_id}) >= tau) kept.push_back(p);
    }
    MatchEvents ev = accumulate_events(gts, kept, dist_thresh);
    sweeps.push_back(
        {static_cast<Scalar>(ev.matches) / static_cast<Scalar>(ev.num_gt), ev});
  }

  const auto p_total = static_cast<Scalar>(accumulate_events(gts, {}, dist_thresh).num_gt);
  long double acc = 0.0;
  for (int k = 1; k <= kRecallSteps; ++k) {
    const Scalar target = static_cast<Scalar>(k) / static_cast<Scalar>(kRecallSteps);
    const Sweep* chosen = nullptr;
    for (const Sweep& s : sweeps) {  // highest threshold first
      if (s.recall >= target) {
        chosen = &s;
        break;
      }
    }
    if (!chosen) continue;  // unachievable target contributes 0
    const Scalar r = chosen->recall;
    const Scalar motar =
        std::max<Scalar>(0.0, 1.0 - (static_cast<Scalar>(chosen->ev.ids + chosen->ev.fp +
                                                         chosen->ev.fn) -
                                      (1.0 - r) * p_total) /
                                         (r * p_total));
    out.motar[static_cast<size_t>(k - 1)] = motar;
    acc += motar;
  }
  out.amota = static_cast<Scalar>(acc / kRecallSteps);
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct ClassMetrics {
  Scalar amota = 0.0;
  std::optional<Scalar> mota;
  Scalar recall = 0.0;
  MatchEvents events;
};

struct MetricsReport {
  Scalar amota = 0.0;
  Scalar mota = 0.0;      // clamped at 0
  Scalar mota_raw = 0.0;  // unclamped
  Scalar recall = 0.0;
  int64_t fp = 0, fn = 0, ids = 0, frag = 0, num_gt = 0;
  std::map<int, ClassMetrics> per_class;
};

inline MetricsReport evaluate_tracking(const std::vector<GtBox>& gts,
                                       const std::vector<PredBox>& preds,
                                       Scalar dist_thresh = kMatchDistance) {
  MetricsReport rep;
  const MatchEvents ev = accumulate_events(gts, preds, dist_thresh);
  rep.fp = ev.fp;
  rep.fn = ev.fn;
  rep.ids = ev.ids;
  rep.frag = ev.frag;
  rep.num_gt = ev.num_gt;
  rep.recall = ev.num_gt ? static_cast<Scalar>(ev.matches) / static_cast<Scalar>(ev.num_gt) : 0.0;
  const auto m = mota(ev);
  rep.mota_raw = m.value_or(0.0);
  rep.mota = std::max<Scalar>(0.0, rep.mota_raw);
  rep.amota = amota(gts, preds, dist_thresh).amota;

  std::set<int> classes;
  for (const GtBox& g : gts) classes.insert(g.cls);
  for (int cls : classes) {
    std::vector<GtBox> g_cls;
    std::vector<PredBox> p_cls;
    for (const GtBox& g : gts) {
      if (g.cls == cls) g_cls.push_back(g);
    }
    for (const PredBox& p : preds) {
      if (p.cls == cls) p_cls.push_back(p);
    }
    ClassMetrics cm;
    cm.events = accumulate_events(g_cls, p_cls, dist_thresh);
    cm.mota = mota(cm.events);
    cm.recall = cm.events.num_gt ? static_cast<Scalar>(cm.events.matches) /
                                       static_cast<Scalar>(cm.events.num_gt)
                                 : 0.0;
    cm.amota = amota(g_cls, p_cls, dist_thresh).amota;
    rep.per_class[cls] = cm;
  }
  return rep;
}

/// Aligned plain-text table (one row per entry) with the usual columns.
inline std::string format_metrics_table(
    const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "Method" << std::right << std::setw(8) << "AMOTA"
     << std::setw(8) << "MOTA" << std::setw(8) << "RECALL" << std::setw(8) << "FP" << std::setw(8)
     << "FN" << std::setw(8) << "IDS" << std::setw(8) << "FRAG" << "\n";
  for (const auto& [name, r] : rows) {
    os << std::left << std::setw(28) << name << std::right << std::fixed << std::setprecision(3)
       << std::setw(8) << r.amota << std::setw(8) << r.mota << std::setw(8) << r.recall
       << std::setw(8) << r.fp << std::setw(8) << r.fn << std::setw(8) << r.ids << std::setw(8)
       << r.frag << "\n";
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Detection AP (for the encoder ablation)

/// Detection with score, matched greedily score-descending within each frame
/// against same-class ground truth. AP is the area under the resulting
/// precision-recall steps; mean over the classes present in the ground truth.
struct ScoredDet {
  int scene = 0;
  int64_t frame = 0;
  int cls = 0;
  Scalar u = 0.0, v = 0.0;
  Scalar score = 0.0;
};

inline Scalar detection_ap_class(const std::vector<GtBox>& gts, const std::vector<ScoredDet>& dets,
                                 int cls, Scalar dist_thresh) {
  int64_t num_gt = 0;
  std::map<std::pair<int, int64_t>, std::vector<const GtBox*>> gt_by_frame;
  for (const GtBox& g : gts) {
    if (g.cls != cls) continue;
    gt_by_frame[{g.scene, g.frame}].push_back(&g);
    ++num_gt;
  }
  if (num_gt == 0) return 0.0;

  std::vector<const ScoredDet*> cand;
  for (const ScoredDet& d : dets) {
    if (d.cls == cls) cand.push_back(&d);
  }
  std::sort(cand.begin(), cand.end(), [](const ScoredDet* a, const ScoredDet* b) {
    if (a->score != b->score) return a->score > b->score;
    return std::tie(a->scene, a->frame, a->u, a->v) < std::tie(b->scene, b->frame, b->u, b->v);
  });

  std::map<std::pair<int, int64_t>, std::vector<char>> used;
  for (auto& [key, v] : gt_by_frame) used[key].assign(v.size(), false);

  std::vector<char> is_tp;
  is_tp.reserve(cand.size());
  for (const ScoredDet* d : cand) {
    const auto key = std::make_pair(d->scene, d->frame);
    auto it = gt_by_frame.find(key);
    bool tp = false;
    if (it != gt_by_frame.end()) {
      Scalar best_d = dist_thresh;
      int64_t best = -1;
      for (size_t gi = 0; gi < it->second.size(); ++gi) {
        if (used[key][gi]) continue;
        const Scalar dd = bev_distance(d->u, d->v, it->second[gi]->u, it->second[gi]->v);
        if (dd <= best_d) {
          best_d = dd;
          best = static_cast<int64_t>(gi);
        }
      }
      if (best >= 0) {
        used[key][static_cast<size_t>(best)] = true;
        tp = true;
      }
    }
    is_tp.push_back(tp);
  }

  Scalar ap = 0.0, prev_recall = 0.0;
  int64_t tp_count = 0;
  for (size_t i = 0; i < is_tp.size(); ++i) {
    if (is_tp[i]) {
      ++tp_count;
      const Scalar recall = static_cast<Scalar>(tp_count) / static_cast<Scalar>(num_gt);
      const Scalar precision = static_cast<Scalar>(tp_count) / static_cast<Scalar>(i + 1);
      ap += (recall - prev_recall) * precision;
      prev_recall = recall;
    }
  }
  return ap;
}

inline Scalar detection_map(const std::vector<GtBox>& gts, const std::vector<ScoredDet>& dets,
                            Scalar dist_thresh = kMatchDistance) {
  std::set<int> classes;
  for (const GtBox& g : gts) classes.insert(g.cls);
  if (classes.empty()) return 0.0;
  Scalar sum = 0.0;
  for (int cls : classes) sum += detection_ap_class(gts, dets, cls, dist_thresh);
  return sum / static_cast<Scalar>(classes.size());
}

}  // namespace stmot
