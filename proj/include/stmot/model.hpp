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

/// The full two-stage network: 4D sparse encoder, branch convolutions,
/// center-heatmap detector and detection-to-track match classifier, bundled
/// with one parameter store. Provides window inference for the tracker and a
/// joint forward/backward for training.

#pragma once

#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stmot/assoc.hpp"
#include "stmot/checkpoint.hpp"
#include "stmot/detect.hpp"
#include "stmot/encoder.hpp"
#include "stmot/io.hpp"
#include "stmot/nn.hpp"
#include "stmot/sparse4d.hpp"
#include "stmot/trackalign.hpp"

namespace stmot {

struct ModelConfig {
  VoxelGridSpec grid;
  int num_classes = 2;
  std::vector<Scalar> gating{4.0, 1.0};       // meters, per class
  std::vector<Scalar> focal_alpha{4.0, 4.0};  // per class
  Scalar focal_gamma = 2.0;
  int64_t vfe_channels = 16;
  std::vector<int64_t> stage_channels{16, 32, 64};
  std::vector<int64_t> stage_strides{1, 2, 2};  // applied to z, y, x alike
  int kernel_t = 3;
  int kernel_s = 3;
  int64_t head_channels = 32;
  int64_t head_kernel = 3;
  int64_t roi_bins = 5;
  std::vector<int64_t> mlp_hidden{128, 64};
  Scalar score_thresh = 0.1;
  int64_t top_k = 100;
  uint64_t seed = 1;

  EncoderConfig encoder_config() const {
    if (stage_channels.size() != stage_strides.size() || stage_channels.empty()) {
      throw std::invalid_argument("ModelConfig: stage_channels/stage_strides mismatch");
    }
    std::vector<EncoderStageConfig> stages;
    for (size_t i = 0; i < stage_channels.size(); ++i) {
      EncoderStageConfig s;
      s.channels = stage_channels[i];
      s.kernel = KernelSize{kernel_t, kernel_s, kernel_s, kernel_s};
      const int st = static_cast<int>(stage_strides[i]);
      s.stride = ConvStride{1, st, st, st};
      stages.push_back(s);
    }
    return EncoderConfig(vfe_channels, stages);
  }

  static ModelConfig from_kv(const KVConfig& kv) {
    ModelConfig cfg;
    cfg.grid = grid_from_kv(kv);
    cfg.num_classes = static_cast<int>(kv.get_int("num_classes", cfg.num_classes));
    cfg.gating = kv.get_num_list("gating", cfg.gating);
    cfg.focal_alpha = kv.get_num_list("focal_alpha", cfg.focal_alpha);
    cfg.focal_gamma = kv.get_num("focal_gamma", cfg.focal_gamma);
    cfg.vfe_channels = kv.get_int("vfe_channels", cfg.vfe_channels);
    cfg.stage_channels = kv.get_int_list("stage_channels", cfg.stage_channels);
    cfg.stage_strides = kv.get_int_list("stage_strides", cfg.stage_strides);
    cfg.kernel_t = static_cast<int>(kv.get_int("kernel_t", cfg.kernel_t));
    cfg.kernel_s = static_cast<int>(kv.get_int("kernel_s", cfg.kernel_s));
    cfg.head_channels = kv.get_int("head_channels", cfg.head_channels);
    cfg.head_kernel = kv.get_int("head_kernel", cfg.head_kernel);
    cfg.roi_bins = kv.get_int("roi_bins", cfg.roi_bins);
    cfg.mlp_hidden = kv.get_int_list("mlp_hidden", cfg.mlp_hidden);
    cfg.score_thresh = kv.get_num("score_thresh", cfg.score_thresh);
    cfg.top_k = kv.get_int("top_k", cfg.top_k);
    cfg.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<int64_t>(cfg.seed)));
    if (static_cast<int>(cfg.gating.size()) != cfg.num_classes ||
        static_cast<int>(cfg.focal_alpha.size()) != cfg.num_classes) {
      throw std::invalid_argument("ModelConfig: gating/focal_alpha must have one entry per class");
    }
    return cfg;
  }

  KVConfig to_kv() const {
    KVConfig kv;
    auto join_num = [](const auto& v) {
      std::ostringstream os;
      os.precision(17);
      for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
      return os.str();
    };
    kv.set("range_min", join_num(grid.range_min));
    kv.set("range_max", join_num(grid.range_max));
    kv.set("voxel_size", join_num(grid.voxel_size));
    kv.set_int("t_len", grid.t_len);
    kv.set_int("num_classes", num_classes);
    kv.set("gating", join_num(gating));
    kv.set("focal_alpha", join_num(focal_alpha));
    kv.set_num("focal_gamma", focal_gamma);
    kv.set_int("vfe_channels", vfe_channels);
    kv.set("stage_channels", join_num(stage_channels));
    kv.set("stage_strides", join_num(stage_strides));
    kv.set_int("kernel_t", kernel_t);
    kv.set_int("kernel_s", kernel_s);
    kv.set_int("head_channels", head_channels);
    kv.set_int("head_kernel", head_kernel);
    kv.set_int("roi_bins", roi_bins);
    kv.set("mlp_hidden", join_num(mlp_hidden));
    kv.set_num("score_thresh", score_thresh);
    kv.set_int("top_k", top_k);
    kv.set_int("seed", static_cast<int64_t>(seed));
    return kv;
  }
};

class Model {
 public:
  explicit Model(const ModelConfig& config)
      : cfg(config), gating(config.gating), alphas(config.focal_alpha) {
    std::mt19937_64 rng(cfg.seed);
    encoder = Encoder(params, "enc", cfg.encoder_config(), rng);
    const int64_t c_bev = encoder.bev_channels(cfg.grid);
    branches = HeadBranches(params, "branch", c_bev, cfg.head_kernel, rng);
    head = DetectHead(params, "det", c_bev, cfg.head_channels, cfg.num_classes, rng);
    classifier = MatchClassifier(params, "match", c_bev, cfg.roi_bins, cfg.mlp_hidden, rng);
  }

  // The layers hold pointers into `params`; the model stays where it is born.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Rebuilds a model from a checkpoint's embedded config and loads weights.
  static std::unique_ptr<Model> load(const std::string& path) {
    const std::string config_text = peek_checkpoint_config(path);
    auto model = std::make_unique<Model>(ModelConfig::from_kv(KVConfig::parse(config_text)));
    load_checkpoint(path, model->params);
    return model;
  }

  void save(const std::string& path) const {
    save_checkpoint(path, params, cfg.to_kv().to_text());
  }

  int64_t bev_channels() const { return encoder.bev_channels(cfg.grid); }

  // -------------------------------------------------------------------------
  // Inference

  struct WindowInference {
    BEVSequence bev;
    std::vector<DenseTensor> inst_maps;  // instance branch output per t
    RawMaps raw;
    std::vector<Detection> dets;
  };

  /// window[k] holds the points of relative timestep t = k+1 (k = 0 is the
  /// current frame).
  WindowInference infer(const std::vector<std::vector<Point4D>>& window) const {
    WindowInference out;
    out.bev = encoder.forward(window, cfg.grid);
    const DenseTensor feat_cls = branches.forward_cls(out.bev.maps.at(0));
    const DenseTensor feat_reg = branches.forward_reg(out.bev.maps.at(0));
    for (const DenseTensor& m : out.bev.maps) out.inst_maps.push_back(branches.forward_inst(m));
    out.raw = head.forward(feat_cls, feat_reg);
    out.dets = decode_detections(out.raw, cfg.score_thresh, cfg.top_k, out.bev.geom);
    return out;
  }

  /// Match probabilities for every filter-passing detection/track pair.
  MatchMatrix classify_pairs(const WindowInference& inf, const std::vector<Detection>& dets,
                             const std::vector<Track>& tracks, int64_t frame) const {
    MatchMatrix match(static_cast<int64_t>(dets.size()), static_cast<int64_t>(tracks.size()));
    for (size_t i = 0; i < dets.size(); ++i) {
      for (size_t j = 0; j < tracks.size(); ++j) {
        if (!heuristic_filter(dets[i], tracks[j], gating)) continue;
        const RoiFeature roi =
            track_align(inf.inst_maps, inf.bev.geom, dets[i],
                        tracks[j].window_boxes(frame, cfg.grid.t_len), cfg.roi_bins);
        match.set(static_cast<int64_t>(i), static_cast<int64_t>(j),
                  classifier.forward(roi.grid));
      }
    }
    return match;
  }

  // -------------------------------------------------------------------------
  // Training

  struct TrainStepStats {
    Scalar total = 0.0;
    Scalar det = 0.0;
    Scalar track = 0.0;
    int64_t num_pairs = 0;
  };

  /// One joint forward/backward over a window. Accumulates parameter
  /// gradients; the caller owns the optimizer step.
  TrainStepStats forward_backward(const std::vector<std::vector<Point4D>>& window,
                                  const std::vector<Detection>& gt_current,
                                  const std::vector<GtTrackWindow>& gt_windows,
                                  Scalar lambda_track) {
    Encoder::Cache enc_cache;
    const BEVSequence bev = encoder.forward(window, cfg.grid, &enc_cache);

    HeadBranches::Cache branch_cache;
    const DenseTensor feat_cls = branches.forward_cls(bev.maps.at(0), &branch_cache);
    const DenseTensor feat_reg = branches.forward_reg(bev.maps.at(0), &branch_cache);
    std::vector<DenseTensor> inst_maps;
    for (const DenseTensor& m : bev.maps) {
      inst_maps.push_back(branches.forward_inst(m, &branch_cache));
    }

    DetectHead::Cache head_cache;
    const RawMaps raw = head.forward(feat_cls, feat_reg, &head_cache);
    const DetectionTargets targets = render_targets(gt_current, bev.geom, cfg.num_classes);
    const DetectionLossResult det_loss = detection_loss(raw, targets);

    // Detection-to-track pairs from ground-truth combinations.
    const TrainingPairSet pairs = gen_training_pairs(gt_windows, gating);
    std::vector<Scalar> logits;
    std::vector<uint8_t> labels;
    std::vector<int> classes;
    std::vector<TrackAlignCache> align_caches(pairs.pairs.size());
    std::vector<MatchClassifier::Cache> clf_caches(pairs.pairs.size());
    for (size_t p = 0; p < pairs.pairs.size(); ++p) {
      const TrainingPair& pr = pairs.pairs[p];
      const GtTrackWindow& wi =
          gt_windows[static_cast<size_t>(pairs.det_side[static_cast<size_t>(pr.det_index)])];
      const GtTrackWindow& wj =
          gt_windows[static_cast<size_t>(pairs.track_side[static_cast<size_t>(pr.track_index)])];
      const RoiFeature roi = track_align(inst_maps, bev.geom, wi.current, wj.history,
                                         cfg.roi_bins, &align_caches[p]);
      logits.push_back(classifier.forward(roi.grid, &clf_caches[p]));
      labels.push_back(pr.positive ? 1 : 0);
      classes.push_back(pr.cls);
    }
    const TrackLossResult track_loss =
        track_match_loss(logits, labels, classes, alphas, cfg.focal_gamma);
    if (!std::isfinite(det_loss.total) || !std::isfinite(track_loss.loss)) {
      throw std::runtime_error("forward_backward: non-finite loss (training diverged)");
    }
    const TotalLoss losses = total_loss(det_loss.total, track_loss.loss, lambda_track);

    // Backward.
    std::vector<DenseTensor> d_inst(inst_maps.size());
    for (size_t t = 0; t < inst_maps.size(); ++t) d_inst[t] = DenseTensor(inst_maps[t].shape);
    for (size_t p = 0; p < pairs.pairs.size(); ++p) {
      const DenseTensor d_roi =
          classifier.backward(clf_caches[p], lambda_track * track_loss.d_logits[p]);
      track_align_backward(align_caches[p], d_roi, d_inst);
    }

    auto [d_feat_cls, d_feat_reg] =
        head.backward(head_cache, det_loss.d_heat_logits, det_loss.d_reg, det_loss.d_vel);

    std::vector<DenseTensor> d_maps(bev.maps.size());
    for (size_t t = 0; t < bev.maps.size(); ++t) d_maps[t] = DenseTensor(bev.maps[t].shape);
    accumulate(d_maps[0], branches.backward_cls(branch_cache, d_feat_cls));
    accumulate(d_maps[0], branches.backward_reg(branch_cache, d_feat_reg));
    for (size_t t = 0; t < inst_maps.size(); ++t) {
      accumulate(d_maps[t], branches.backward_inst(branch_cache, t, d_inst[t]));
    }
    encoder.backward(enc_cache, d_maps);

    TrainStepStats stats;
    stats.total = losses.total;
    stats.det = losses.det;
    stats.track = losses.track;
    stats.num_pairs = static_cast<int64_t>(pairs.pairs.size());
    return stats;
  }

  ModelConfig cfg;
  ParamStore params;
  Encoder encoder;
  HeadBranches branches;
  DetectHead head;
  MatchClassifier classifier;
  GatingTable gating;
  FocalAlphaTable alphas;
};

}  // namespace stmot
