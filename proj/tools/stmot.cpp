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

/// Command-line front end: dataset generation, training, tracking,
/// evaluation, gradient checking and the ablation ladder.

#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "stmot/gradsuite.hpp"
#include "stmot/io.hpp"
#include "stmot/metrics.hpp"
#include "stmot/model.hpp"
#include "stmot/pipeline.hpp"
#include "stmot/sim.hpp"

namespace {

using namespace stmot;

int cmd_gen(const std::string& config_path, const std::string& out_path) {
  const KVConfig kv = config_path.empty() ? KVConfig{} : KVConfig::load(config_path);
  const VoxelGridSpec grid = grid_from_kv(kv);
  const SceneConfig cfg = scene_config_from_kv(kv);
  const Scalar frame_interval = kv.get_num("frame_interval", 0.5);
  const SceneDataset data = gen_scenes(cfg, grid, frame_interval);
  save_dataset(out_path, data);
  int64_t total_gt = 0, total_points = 0;
  for (const auto& scene : data.scenes) {
    for (const auto& f : scene.frames) {
      total_gt += static_cast<int64_t>(f.gt.size());
      total_points += static_cast<int64_t>(f.points.size());
    }
  }
  std::cout << "wrote " << out_path << ": " << data.scenes.size() << " scenes, " << total_gt
            << " gt boxes, " << total_points << " points\n";
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& config_path,
              const std::string& out_path, const std::string& resume_path, int64_t steps_override,
              Scalar lambda_track_override, int tlen_override) {
  const SceneDataset data = load_dataset(data_path);
  const KVConfig kv = config_path.empty() ? KVConfig{} : KVConfig::load(config_path);

  std::unique_ptr<Model> model;
  if (!resume_path.empty()) {
    model = Model::load(resume_path);
  } else {
    ModelConfig mc = ModelConfig::from_kv(kv);
    mc.grid = data.grid;  // the model always matches the dataset geometry
    if (kv.has("tlen")) mc.grid.t_len = static_cast<int>(kv.get_int("tlen", mc.grid.t_len));
    if (tlen_override > 0) mc.grid.t_len = tlen_override;
    model = std::make_unique<Model>(mc);
  }

  TrainConfig tc = TrainConfig::from_kv(kv);
  if (steps_override > 0) tc.steps = steps_override;
  if (lambda_track_override >= 0.0) tc.lambda_track = lambda_track_override;

  const TrainResult res = train(*model, data, tc, &std::cout);
  model->save(out_path);
  std::cout << "trained " << res.steps_run << " steps (optimizer step "
            << model->params.step() << "), loss " << res.first_total << " -> " << res.last_total
            << "; wrote " << out_path << "\n";
  return 0;
}

int cmd_track(const std::string& data_path, const std::string& ckpt_path, Scalar lambda_d,
              Scalar lambda_s, const std::string& out_path, const std::string& dets_path) {
  const SceneDataset data = load_dataset(data_path);
  const std::unique_ptr<Model> model = Model::load(ckpt_path);
  const PipelineOutput out = run_pipeline(*model, data, lambda_d, lambda_s);
  save_tracks(out_path, out.tracks);
  if (!dets_path.empty()) {
    std::ofstream os(dets_path);
    if (!os) throw std::runtime_error("cannot open " + dets_path);
    write_detections(os, out.det_rows, out.det_boxes);
  }
  std::cout << "wrote " << out_path << ": " << out.tracks.size() << " track rows over "
            << out.latency.frames << " frames\n";
  if (out.latency.frames > 0) {
    std::cout << "latency per frame: network "
              << 1e3 * out.latency.network_seconds / static_cast<Scalar>(out.latency.frames)
              << " ms, tracker "
              << 1e3 * out.latency.tracker_seconds / static_cast<Scalar>(out.latency.frames)
              << " ms\n";
  }
  return 0;
}

int cmd_eval(const std::string& tracks_path, const std::string& gt_path,
             const std::string& report_path) {
  const std::vector<TrackDumpRow> rows = load_tracks(tracks_path);
  const SceneDataset data = load_dataset(gt_path);
  const MetricsReport rep = evaluate_tracking(dataset_to_gt(data), tracks_to_pred(rows));
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    if (!os) throw std::runtime_error("cannot open " + report_path);
    os << metrics_to_json(rep).dump(2) << "\n";
  }
  std::cout << format_metrics_table({{tracks_path, rep}});
  return 0;
}

int cmd_gradcheck(uint64_t seed) {
  const auto results = run_gradient_suite(seed);
  bool all_pass = true;
  for (const auto& r : results) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.op << ": max rel err " << r.max_rel_err
              << " (tolerance " << r.tolerance << ")\n";
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

int cmd_ablate(const std::string& data_path, const std::string& ckpts_arg,
               const std::string& report_path) {
  const SceneDataset data = load_dataset(data_path);
  std::map<std::string, std::string> ckpts;
  std::istringstream is(ckpts_arg);
  std::string item;
  while (std::getline(is, item, ',')) {
    const size_t eq = item.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("--ckpts expects key=path[,key=path...], got '" + item + "'");
    }
    ckpts[item.substr(0, eq)] = item.substr(eq + 1);
  }
  const AblationReport report = run_ablation(data, ckpts, &std::cout);
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    if (!os) throw std::runtime_error("cannot open " + report_path);
    os << ablation_to_json(report).dump(2) << "\n";
  }
  std::vector<std::pair<std::string, MetricsReport>> table_rows;
  for (const auto& r : report.rows) {
    if (r.available) table_rows.emplace_back(r.name, r.metrics);
  }
  std::cout << format_metrics_table(table_rows);
  if (!report.lambda_d_sweep.empty()) {
    std::cout << "lambda_d sweep best: " << report.best_lambda_d << ", lambda_s sweep best: "
              << report.best_lambda_s << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"4D spatio-temporal joint detection and tracking, desk scale"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_path, ckpt_path, resume_path, tracks_path, gt_path;
  std::string report_path, dets_path, ckpts_arg;
  Scalar lambda_d = 0.5, lambda_s = 0.2, lambda_track_override = -1.0;
  int64_t steps_override = -1;
  int tlen_override = -1;
  uint64_t seed = 42;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "flat key=value config file");
  gen->add_option("--out", out_path, "output dataset (JSONL)")->required();

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--data", data_path, "training dataset")->required();
  tr->add_option("--config", config_path, "flat key=value config file");
  tr->add_option("--out", out_path, "output checkpoint")->required();
  tr->add_option("--resume", resume_path, "checkpoint to continue from");
  tr->add_option("--steps", steps_override, "override step count");
  tr->add_option("--lambda-track", lambda_track_override, "override tracking-loss weight");
  tr->add_option("--tlen", tlen_override, "override temporal window length");

  auto* tk = app.add_subcommand("track", "run the tracking pipeline");
  tk->add_option("--data", data_path, "dataset to track")->required();
  tk->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  tk->add_option("--lambda-d", lambda_d, "distance-vs-score balance in the cost");
  tk->add_option("--lambda-s", lambda_s, "match-score share of track confidence");
  tk->add_option("--out", out_path, "output track dump")->required();
  tk->add_option("--dets-out", dets_path, "optional detection dump");

  auto* ev = app.add_subcommand("eval", "evaluate a track dump against ground truth");
  ev->add_option("--tracks", tracks_path, "track dump")->required();
  ev->add_option("--gt", gt_path, "dataset with ground truth")->required();
  ev->add_option("--report", report_path, "JSON report path");

  auto* gc = app.add_subcommand("gradcheck", "run the gradient checks");
  gc->add_option("--seed", seed, "random seed");

  auto* ab = app.add_subcommand("ablate", "run the ablation ladder");
  ab->add_option("--data", data_path, "held-out dataset")->required();
  ab->add_option("--ckpts", ckpts_arg, "key=path list, keys t1, t3_det, t3")->required();
  ab->add_option("--report", report_path, "JSON report path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(config_path, out_path);
    if (tr->parsed()) {
      return cmd_train(data_path, config_path, out_path, resume_path, steps_override,
                       lambda_track_override, tlen_override);
    }
    if (tk->parsed()) {
      return cmd_track(data_path, ckpt_path, lambda_d, lambda_s, out_path, dets_path);
    }
    if (ev->parsed()) return cmd_eval(tracks_path, gt_path, report_path);
    if (gc->parsed()) return cmd_gradcheck(seed);
    if (ab->parsed()) return cmd_ablate(data_path, ckpts_arg, report_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
