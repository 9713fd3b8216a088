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

/// File formats: a flat key=value config parser, and UTF-8 line-delimited
/// JSON for datasets, track dumps and detection dumps, each starting with a
/// one-line schema header. Floats serialize round-trippable.

#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "stmot/detect.hpp"
#include "stmot/metrics.hpp"
#include "stmot/sparse4d.hpp"
#include "stmot/tensor.hpp"

namespace stmot {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Flat key=value config

/// Parses "key = value" lines; '#' starts a comment, blank lines are ignored.
class KVConfig {
 public:
  KVConfig() = default;

  static KVConfig parse(const std::string& text) {
    KVConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const size_t eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": expected key = value");
      }
      cfg.values_[trim(trimmed.substr(0, eq))] = trim(trimmed.substr(eq + 1));
    }
    return cfg;
  }

  static KVConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return parse(buf.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  Scalar get_num(const std::string& key, Scalar fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return std::stod(it->second);
  }

  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return std::stoll(it->second);
  }

  std::vector<Scalar> get_num_list(const std::string& key,
                                   const std::vector<Scalar>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<Scalar> out;
    std::istringstream is(it->second);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      const std::string t = trim(tok);
      if (!t.empty()) out.push_back(std::stod(t));
    }
    return out;
  }

  std::vector<int64_t> get_int_list(const std::string& key,
                                    const std::vector<int64_t>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<int64_t> out;
    std::istringstream is(it->second);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      const std::string t = trim(tok);
      if (!t.empty()) out.push_back(std::stoll(t));
    }
    return out;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_num(const std::string& key, Scalar value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    values_[key] = os.str();
  }
  void set_int(const std::string& key, int64_t value) { values_[key] = std::to_string(value); }

  /// Sorted key=value lines; parse(to_text()) round-trips.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

inline VoxelGridSpec grid_from_kv(const KVConfig& kv) {
  VoxelGridSpec grid;
  const auto rmin = kv.get_num_list("range_min", {grid.range_min.begin(), grid.range_min.end()});
  const auto rmax = kv.get_num_list("range_max", {grid.range_max.begin(), grid.range_max.end()});
  const auto vox = kv.get_num_list("voxel_size", {grid.voxel_size.begin(), grid.voxel_size.end()});
  if (rmin.size() != 3 || rmax.size() != 3 || vox.size() != 3) {
    throw std::invalid_argument("grid config: range_min/range_max/voxel_size need 3 values");
  }
  std::copy(rmin.begin(), rmin.end(), grid.range_min.begin());
  std::copy(rmax.begin(), rmax.end(), grid.range_max.begin());
  std::copy(vox.begin(), vox.end(), grid.voxel_size.begin());
  grid.t_len = static_cast<int>(kv.get_int("t_len", grid.t_len));
  grid.validate();
  return grid;
}

// ---------------------------------------------------------------------------
// Dataset

/// One ground-truth box of a simulated object at one frame. Occluded frames
/// keep their box (the object exists) but emit no points.
struct SimGtBox {
  int64_t track_id = -1;
  bool occluded = false;
  Detection box;  // cls, center, size, yaw, per-frame velocity; s_det unused
};

struct SimFrame {
  std::vector<Point4D> points;  // t unset; assigned when windows are built
  std::vector<SimGtBox> gt;
};

struct SimScene {
  int id = 0;
  std::vector<SimFrame> frames;
};

struct SceneDataset {
  VoxelGridSpec grid;
  Scalar frame_interval = 0.5;  // seconds per frame
  std::vector<SimScene> scenes;
};

inline constexpr char kDatasetSchema[] = "stmot.dataset.v1";
inline constexpr char kTracksSchema[] = "stmot.tracks.v1";
inline constexpr char kDetsSchema[] = "stmot.dets.v1";

inline void write_dataset(std::ostream& os, const SceneDataset& data) {
  json header;
  header["schema"] = kDatasetSchema;
  header["frame_interval"] = data.frame_interval;
  header["grid"] = {{"range_min", data.grid.range_min},
                    {"range_max", data.grid.range_max},
                    {"voxel_size", data.grid.voxel_size},
                    {"t_len", data.grid.t_len}};
  os << header.dump() << "\n";
  for (const SimScene& scene : data.scenes) {
    for (size_t f = 0; f < scene.frames.size(); ++f) {
      const SimFrame& frame = scene.frames[f];
      json rec;
      rec["scene"] = scene.id;
      rec["frame"] = f;
      json pts = json::array();
      for (const Point4D& p : frame.points) pts.push_back({p.x, p.y, p.z, p.r});
      rec["points"] = std::move(pts);
      json gts = json::array();
      for (const SimGtBox& g : frame.gt) {
        gts.push_back({{"id", g.track_id},
                       {"cls", g.box.cls},
                       {"box", {g.box.u, g.box.v, g.box.d, g.box.w, g.box.l, g.box.h,
                                g.box.alpha}},
                       {"vel", {g.box.vel_x, g.box.vel_y}},
                       {"occ", g.occluded}});
      }
      rec["gt"] = std::move(gts);
      os << rec.dump() << "\n";
    }
  }
}

inline void save_dataset(const std::string& path, const SceneDataset& data) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("dataset: cannot open for write: " + path);
  write_dataset(os, data);
}

inline SceneDataset read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("dataset: empty file");
  const json header = json::parse(line);
  if (header.value("schema", "") != kDatasetSchema) {
    throw std::runtime_error("dataset: unexpected schema");
  }
  SceneDataset data;
  data.frame_interval = header.at("frame_interval").get<Scalar>();
  const json& grid = header.at("grid");
  data.grid.range_min = grid.at("range_min").get<std::array<Scalar, 3>>();
  data.grid.range_max = grid.at("range_max").get<std::array<Scalar, 3>>();
  data.grid.voxel_size = grid.at("voxel_size").get<std::array<Scalar, 3>>();
  data.grid.t_len = grid.at("t_len").get<int>();
  data.grid.validate();

  std::map<int, SimScene> scenes;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    const int scene_id = rec.at("scene").get<int>();
    const auto frame = rec.at("frame").get<size_t>();
    SimScene& scene = scenes[scene_id];
    scene.id = scene_id;
    if (scene.frames.size() <= frame) scene.frames.resize(frame + 1);
    SimFrame& fr = scene.frames[frame];
    for (const json& p : rec.at("points")) {
      fr.points.push_back({p.at(0).get<Scalar>(), p.at(1).get<Scalar>(), p.at(2).get<Scalar>(), 1,
                           p.at(3).get<Scalar>()});
    }
    for (const json& g : rec.at("gt")) {
      SimGtBox gt;
      gt.track_id = g.at("id").get<int64_t>();
      gt.occluded = g.value("occ", false);
      const json& b = g.at("box");
      gt.box.u = b.at(0).get<Scalar>();
      gt.box.v = b.at(1).get<Scalar>();
      gt.box.d = b.at(2).get<Scalar>();
      gt.box.w = b.at(3).get<Scalar>();
      gt.box.l = b.at(4).get<Scalar>();
      gt.box.h = b.at(5).get<Scalar>();
      gt.box.alpha = b.at(6).get<Scalar>();
      gt.box.vel_x = g.at("vel").at(0).get<Scalar>();
      gt.box.vel_y = g.at("vel").at(1).get<Scalar>();
      gt.box.cls = g.at("cls").get<int>();
      gt.box.s_det = 1.0;
      fr.gt.push_back(gt);
    }
  }
  for (auto& [id, scene] : scenes) data.scenes.push_back(std::move(scene));
  return data;
}

inline SceneDataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);
  return read_dataset(is);
}

// ---------------------------------------------------------------------------
// Track and detection dumps

struct TrackDumpRow {
  int scene = 0;
  int64_t frame = 0;
  int64_t track_id = 0;
  int cls = 0;
  Detection box;  // carries s_det as well
  Scalar conf = 0.0;
};

inline void write_tracks(std::ostream& os, const std::vector<TrackDumpRow>& rows) {
  json header;
  header["schema"] = kTracksSchema;
  os << header.dump() << "\n";
  for (const TrackDumpRow& r : rows) {
    json rec;
    rec["scene"] = r.scene;
    rec["frame"] = r.frame;
    rec["id"] = r.track_id;
    rec["cls"] = r.cls;
    rec["box"] = {r.box.u, r.box.v, r.box.d, r.box.w, r.box.l, r.box.h, r.box.alpha};
    rec["vel"] = {r.box.vel_x, r.box.vel_y};
    rec["s_det"] = r.box.s_det;
    rec["conf"] = r.conf;
    os << rec.dump() << "\n";
  }
}

inline void save_tracks(const std::string& path, const std::vector<TrackDumpRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("tracks: cannot open for write: " + path);
  write_tracks(os, rows);
}

inline std::vector<TrackDumpRow> read_tracks(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("tracks: empty file");
  if (json::parse(line).value("schema", "") != kTracksSchema) {
    throw std::runtime_error("tracks: unexpected schema");
  }
  std::vector<TrackDumpRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    TrackDumpRow r;
    r.scene = rec.at("scene").get<int>();
    r.frame = rec.at("frame").get<int64_t>();
    r.track_id = rec.at("id").get<int64_t>();
    r.cls = rec.at("cls").get<int>();
    const json& b = rec.at("box");
    r.box.u = b.at(0).get<Scalar>();
    r.box.v = b.at(1).get<Scalar>();
    r.box.d = b.at(2).get<Scalar>();
    r.box.w = b.at(3).get<Scalar>();
    r.box.l = b.at(4).get<Scalar>();
    r.box.h = b.at(5).get<Scalar>();
    r.box.alpha = b.at(6).get<Scalar>();
    r.box.vel_x = rec.at("vel").at(0).get<Scalar>();
    r.box.vel_y = rec.at("vel").at(1).get<Scalar>();
    r.box.s_det = rec.at("s_det").get<Scalar>();
    r.box.cls = r.cls;
    r.conf = rec.at("conf").get<Scalar>();
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<TrackDumpRow> load_tracks(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("tracks: cannot open " + path);
  return read_tracks(is);
}

/// Detection dump rows: {frame, u, v, d, w, l, h, alpha, vel_x, vel_y, cls,
/// s_det}, plus the scene id.
inline void write_detections(std::ostream& os, const std::vector<ScoredDet>& dets,
                             const std::vector<Detection>& boxes) {
  if (dets.size() != boxes.size()) throw std::invalid_argument("write_detections: size mismatch");
  json header;
  header["schema"] = kDetsSchema;
  os << header.dump() << "\n";
  for (size_t i = 0; i < dets.size(); ++i) {
    const Detection& b = boxes[i];
    json rec;
    rec["scene"] = dets[i].scene;
    rec["frame"] = dets[i].frame;
    rec["u"] = b.u;
    rec["v"] = b.v;
    rec["d"] = b.d;
    rec["w"] = b.w;
    rec["l"] = b.l;
    rec["h"] = b.h;
    rec["alpha"] = b.alpha;
    rec["vel_x"] = b.vel_x;
    rec["vel_y"] = b.vel_y;
    rec["cls"] = b.cls;
    rec["s_det"] = b.s_det;
    os << rec.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Metrics adapters

/// Every ground-truth box counts, occluded or not: an occluded object still
/// exists and an ideal tracker carries it through.
inline std::vector<GtBox> dataset_to_gt(const SceneDataset& data) {
  std::vector<GtBox> out;
  for (const SimScene& scene : data.scenes) {
    for (size_t f = 0; f < scene.frames.size(); ++f) {
      for (const SimGtBox& g : scene.frames[f].gt) {
        out.push_back({scene.id, static_cast<int64_t>(f), g.track_id, g.box.cls, g.box.u,
                       g.box.v});
      }
    }
  }
  return out;
}

inline std::vector<PredBox> tracks_to_pred(const std::vector<TrackDumpRow>& rows) {
  std::vector<PredBox> out;
  out.reserve(rows.size());
  for (const TrackDumpRow& r : rows) {
    out.push_back({r.scene, r.frame, r.track_id, r.cls, r.box.u, r.box.v, r.conf});
  }
  return out;
}

inline json metrics_to_json(const MetricsReport& rep) {
  json j;
  j["amota"] = rep.amota;
  j["mota"] = rep.mota;
  j["mota_raw"] = rep.mota_raw;
  j["recall"] = rep.recall;
  j["fp"] = rep.fp;
  j["fn"] = rep.fn;
  j["ids"] = rep.ids;
  j["frag"] = rep.frag;
  j["num_gt"] = rep.num_gt;
  json per_class = json::object();
  for (const auto& [cls, cm] : rep.per_class) {
    json c;
    c["amota"] = cm.amota;
    if (cm.mota.has_value()) c["mota"] = *cm.mota;
    c["recall"] = cm.recall;
    c["fp"] = cm.events.fp;
    c["fn"] = cm.events.fn;
    c["ids"] = cm.events.ids;
    c["frag"] = cm.events.frag;
    per_class[std::to_string(cls)] = std::move(c);
  }
  j["per_class"] = std::move(per_class);
  return j;
}

}  // namespace stmot
