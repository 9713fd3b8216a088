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

/// The end-to-end driver: sliding-window assembly, the online tracking loop
/// (encode, detect, align, classify, assign, update), the training loop, and
/// the ablation ladder runner.

#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "stmot/io.hpp"
#include "stmot/metrics.hpp"
#include "stmot/model.hpp"
#include "stmot/sim.hpp"
#include "stmot/trackmgr.hpp"

namespace stmot {

// ---------------------------------------------------------------------------
// Window assembly

/// The sliding window at frame index fi holds min(T, fi+1) frames; index k of
/// the result is relative timestep t = k+1, so k=0 is the current frame.
inline std::vector<std::vector<Point4D>> build_window(const SimScene& scene, int fi, int t_len) {
  const int count = std::min(t_len, fi + 1);
  std::vector<std::vector<Point4D>> window;
  window.reserve(static_cast<size_t>(count));
  for (int k = 0; k < count; ++k) {
    window.push_back(scene.frames[static_cast<size_t>(fi - k)].points);
  }
  return window;
}

/// Ground-truth boxes of the current frame (occluded ones included: the
/// object is still there, and the temporal context may recover it).
inline std::vector<Detection> gt_boxes_at(const SimScene& scene, int fi) {
  std::vector<Detection> out;
  for (const SimGtBox& g : scene.frames[static_cast<size_t>(fi)].gt) out.push_back(g.box);
  return out;
}

/// Ground-truth track windows for training-pair generation. Occluded frames
/// leave holes: an occluded current frame removes the det side, an occluded
/// history frame goes missing from the history map.
inline std::vector<GtTrackWindow> build_gt_windows(const SimScene& scene, int fi, int t_len) {
  const int count = std::min(t_len, fi + 1);
  std::map<int64_t, GtTrackWindow> by_id;
  for (int t = 1; t <= count; ++t) {
    const SimFrame& frame = scene.frames[static_cast<size_t>(fi - (t - 1))];
    for (const SimGtBox& g : frame.gt) {
      GtTrackWindow& w = by_id[g.track_id];
      w.gt_id = g.track_id;
      w.cls = g.box.cls;
      if (g.occluded) continue;
      if (t == 1) {
        w.has_current = true;
        w.current = g.box;
      } else {
        w.history[t] = g.box;
      }
    }
  }
  std::vector<GtTrackWindow> out;
  for (auto& [id, w] : by_id) out.push_back(std::move(w));
  return out;
}

// ---------------------------------------------------------------------------
// Online tracking

struct LatencyReport {
  Scalar network_seconds = 0.0;  // encoder + detector + align + classifier
  Scalar tracker_seconds = 0.0;  // cost, assignment, lifecycle
  int64_t frames = 0;
};

struct PipelineOutput {
  std::vector<TrackDumpRow> tracks;
  std::vector<ScoredDet> det_rows;
  std::vector<Detection> det_boxes;  // parallel to det_rows
  LatencyReport latency;
};

/// One pass over every scene: the window is assembled, the network runs, and
/// the tracker matches detections against live tracks with the blended cost.
/// Emitted rows cover exactly the frames where a track was observed.
inline PipelineOutput run_pipeline(const Model& model, const SceneDataset& data, Scalar lambda_d,
                                   Scalar lambda_s) {
  using clock = std::chrono::steady_clock;
  PipelineOutput out;
  const int t_len = model.cfg.grid.t_len;
  for (const SimScene& scene : data.scenes) {
    TrackSet ts(TrackSetConfig{lambda_d, lambda_s, t_len});
    for (int fi = 0; fi < static_cast<int>(scene.frames.size()); ++fi) {
      const auto t0 = clock::now();
      const auto window = build_window(scene, fi, t_len);
      const Model::WindowInference inf = model.infer(window);
      const MatchMatrix match = model.classify_pairs(inf, inf.dets, ts.live(), fi);
      const auto t1 = clock::now();

      DenseTensor dist({match.n, match.m});
      for (int64_t i = 0; i < match.n; ++i) {
        for (int64_t j = 0; j < match.m; ++j) {
          if (!match.is_feasible(i, j)) continue;
          const Track& track = ts.live()[static_cast<size_t>(j)];
          dist(i, j) = distance_ratio(inf.dets[static_cast<size_t>(i)], track,
                                      model.gating.at(track.cls), fi);
        }
      }
      const Assignment assignment = hungarian(build_cost(dist, match, lambda_d));
      ts.update(inf.dets, match, assignment, fi);
      for (const Track& tr : ts.live()) {
        if (tr.last_frame != fi) continue;
        out.tracks.push_back({scene.id, fi, tr.id, tr.cls, tr.boxes.at(fi),
                              track_confidence(tr, lambda_s)});
      }
      const auto t2 = clock::now();

      out.latency.network_seconds += std::chrono::duration<Scalar>(t1 - t0).count();
      out.latency.tracker_seconds += std::chrono::duration<Scalar>(t2 - t1).count();
      out.latency.frames += 1;
      for (const Detection& d : inf.dets) {
        out.det_rows.push_back({scene.id, fi, d.cls, d.u, d.v, d.s_det});
        out.det_boxes.push_back(d);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int64_t steps = 500;
  int64_t batch = 4;  // windows averaged per optimizer step
  Scalar lr = 1e-3;
  Scalar weight_decay = 1e-2;
  Scalar lambda_track = 1.0;
  bool one_cycle = false;
  int64_t log_every = 50;
  uint64_t seed = 1;

  static TrainConfig from_kv(const KVConfig& kv) {
    TrainConfig tc;
    tc.steps = kv.get_int("steps", tc.steps);
    tc.batch = std::max<int64_t>(1, kv.get_int("batch", tc.batch));
    tc.lr = kv.get_num("lr", tc.lr);
    tc.weight_decay = kv.get_num("weight_decay", tc.weight_decay);
    tc.lambda_track = kv.get_num("lambda_track", tc.lambda_track);
    tc.one_cycle = kv.get_str("lr_schedule", "constant") == "onecycle";
    tc.log_every = kv.get_int("log_every", tc.log_every);
    tc.seed = static_cast<uint64_t>(kv.get_int("train_seed", static_cast<int64_t>(tc.seed)));
    return tc;
  }
};

struct TrainResult {
  Scalar first_total = 0.0, last_total = 0.0;
  Scalar first_det = 0.0, last_det = 0.0;
  Scalar first_track = 0.0, last_track = 0.0;
  int64_t steps_run = 0;
};

inline Scalar one_cycle_lr(Scalar base, int64_t step, int64_t total) {
  const Scalar warm = 0.3 * static_cast<Scalar>(total);
  const auto s = static_cast<Scalar>(step);
  if (s < warm) return base * (s + 1.0) / warm;
  const Scalar progress = (s - warm) / std::max<Scalar>(1.0, static_cast<Scalar>(total) - warm);
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

/// Joint optimization of encoder, detector and classifier. Each optimizer
/// step averages the gradients of `batch` windows drawn round-robin over
/// scenes with a seeded random frame. Throws on divergence.
inline TrainResult train(Model& model, const SceneDataset& data, const TrainConfig& tc,
                         std::ostream* log = nullptr) {
  if (data.scenes.empty()) throw std::invalid_argument("train: need at least one scene");
  std::mt19937_64 rng(tc.seed);
  AdamW opt;
  opt.weight_decay = tc.weight_decay;
  TrainResult res;
  const int t_len = model.cfg.grid.t_len;
  int64_t sample = 0;
  for (int64_t step = 0; step < tc.steps; ++step) {
    Scalar total = 0.0, det = 0.0, track = 0.0;
    int64_t pairs = 0;
    for (int64_t b = 0; b < tc.batch; ++b, ++sample) {
      const SimScene& scene =
          data.scenes[static_cast<size_t>(sample % static_cast<int64_t>(data.scenes.size()))];
      std::uniform_int_distribution<int> frame_dist(0,
                                                    static_cast<int>(scene.frames.size()) - 1);
      const int fi = frame_dist(rng);
      const auto window = build_window(scene, fi, t_len);
      const auto gt_current = gt_boxes_at(scene, fi);
      const auto gt_windows = build_gt_windows(scene, fi, t_len);
      const Model::TrainStepStats stats =
          model.forward_backward(window, gt_current, gt_windows, tc.lambda_track);
      total += stats.total;
      det += stats.det;
      track += stats.track;
      pairs += stats.num_pairs;
    }
    const Scalar inv = 1.0 / static_cast<Scalar>(tc.batch);
    total *= inv;
    det *= inv;
    track *= inv;
    model.params.scale_grads(inv);
    if (!std::isfinite(total)) {
      throw std::runtime_error("train: non-finite loss at optimizer step " +
                               std::to_string(model.params.step()) + " (diverged)");
    }
    opt.lr = tc.one_cycle ? one_cycle_lr(tc.lr, step, tc.steps) : tc.lr;
    opt.step(model.params);

    if (step == 0) {
      res.first_total = total;
      res.first_det = det;
      res.first_track = track;
    }
    res.last_total = total;
    res.last_det = det;
    res.last_track = track;
    ++res.steps_run;
    if (log && (step % tc.log_every == 0 || step + 1 == tc.steps)) {
      (*log) << "step " << model.params.step() << " total " << total << " det " << det
             << " track " << track << " pairs " << pairs << " lr " << opt.lr << "\n";
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablation ladder

struct AblationRow {
  std::string name;
  std::string ckpt_key;
  Scalar lambda_d = 0.5;
  Scalar lambda_s = 0.2;
  bool available = false;
  std::string note;
  MetricsReport metrics;
  Scalar det_map = 0.0;
};

struct SweepPoint {
  Scalar value = 0.0;
  Scalar amota = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::vector<SweepPoint> lambda_d_sweep;
  std::vector<SweepPoint> lambda_s_sweep;
  Scalar best_lambda_d = 0.0;
  Scalar best_lambda_s = 0.0;
  LatencyReport latency;  // from the full-model row
};

/// Evaluates the ablation ladder on one dataset. `ckpts` may provide
/// "t1" (single-frame encoder, detector-only training),
/// "t3_det" (temporal encoder, detector-only training) and
/// "t3" (temporal encoder, joint training). Missing checkpoints skip their
/// rows with a notice. The full model additionally drives the lambda sweeps.
inline AblationReport run_ablation(const SceneDataset& data,
                                   const std::map<std::string, std::string>& ckpts,
                                   std::ostream* log = nullptr) {
  AblationReport report;
  std::map<std::string, std::unique_ptr<Model>> models;
  for (const auto& [key, path] : ckpts) models[key] = Model::load(path);

  const std::vector<GtBox> gts = dataset_to_gt(data);
  auto eval_row = [&](AblationRow row) {
    auto it = models.find(row.ckpt_key);
    if (it == models.end() || !it->second) {
      row.available = false;
      row.note = "checkpoint '" + row.ckpt_key + "' missing; row skipped";
      if (log) (*log) << row.name << ": " << row.note << "\n";
      report.rows.push_back(std::move(row));
      return;
    }
    const Model& model = *it->second;
    const PipelineOutput out = run_pipeline(model, data, row.lambda_d, row.lambda_s);
    row.available = true;
    row.metrics = evaluate_tracking(gts, tracks_to_pred(out.tracks));
    row.det_map = detection_map(gts, out.det_rows);
    if (row.ckpt_key == "t3" && row.lambda_d == 0.5 && row.lambda_s == 0.2) {
      report.latency = out.latency;
    }
    if (log) {
      (*log) << row.name << ": AMOTA " << row.metrics.amota << " mAP " << row.det_map << "\n";
    }
    report.rows.push_back(std::move(row));
  };

  eval_row({"baseline", "t1", 1.0, 0.0});
  eval_row({"4d_encoder", "t3_det", 1.0, 0.0});
  eval_row({"4d_encoder+track", "t3", 1.0, 0.0});
  eval_row({"4d_encoder+track+score", "t3", 0.5, 0.0});
  eval_row({"4d_encoder+track+conf", "t3", 1.0, 0.2});
  eval_row({"4d_encoder+track+score+conf", "t3", 0.5, 0.2});

  auto full = models.find("t3");
  if (full != models.end() && full->second) {
    const Model& model = *full->second;
    for (const Scalar ld : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      const PipelineOutput out = run_pipeline(model, data, ld, 0.2);
      report.lambda_d_sweep.push_back(
          {ld, evaluate_tracking(gts, tracks_to_pred(out.tracks)).amota});
    }
    for (const Scalar ls : {0.0, 0.2, 0.5, 1.0}) {
      const PipelineOutput out = run_pipeline(model, data, 0.5, ls);
      report.lambda_s_sweep.push_back(
          {ls, evaluate_tracking(gts, tracks_to_pred(out.tracks)).amota});
    }
    auto best_of = [](const std::vector<SweepPoint>& sweep) {
      Scalar best_v = sweep.front().value, best_a = sweep.front().amota;
      for (const SweepPoint& p : sweep) {
        if (p.amota > best_a) {
          best_a = p.amota;
          best_v = p.value;
        }
      }
      return best_v;
    };
    report.best_lambda_d = best_of(report.lambda_d_sweep);
    report.best_lambda_s = best_of(report.lambda_s_sweep);
  }
  return report;
}

inline json ablation_to_json(const AblationReport& report) {
  json j;
  json rows = json::array();
  for (const AblationRow& r : report.rows) {
    json row;
    row["name"] = r.name;
    row["ckpt"] = r.ckpt_key;
    row["lambda_d"] = r.lambda_d;
    row["lambda_s"] = r.lambda_s;
    row["available"] = r.available;
    if (!r.note.empty()) row["note"] = r.note;
    if (r.available) {
      row["metrics"] = metrics_to_json(r.metrics);
      row["det_map"] = r.det_map;
    }
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  auto sweep_json = [](const std::vector<SweepPoint>& sweep) {
    json arr = json::array();
    for (const SweepPoint& p : sweep) arr.push_back({{"value", p.value}, {"amota", p.amota}});
    return arr;
  };
  j["lambda_d_sweep"] = sweep_json(report.lambda_d_sweep);
  j["lambda_s_sweep"] = sweep_json(report.lambda_s_sweep);
  j["best_lambda_d"] = report.best_lambda_d;
  j["best_lambda_s"] = report.best_lambda_s;
  j["latency"] = {{"network_seconds", report.latency.network_seconds},
                  {"tracker_seconds", report.latency.tracker_seconds},
                  {"frames", report.latency.frames}};
  return j;
}

}  // namespace stmot
