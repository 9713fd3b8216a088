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

/// Synthetic 4D scene generator: objects spawn with a constant-velocity or
/// constant-turn-rate motion model, emit surface-sampled points with a little
/// jitter, occasionally go unobserved (occlusion dropout), and despawn by
/// bouncing back into the world. Every quantity derives from one seeded
/// generator, so a fixed seed reproduces the dataset bit for bit.

#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "stmot/detect.hpp"
#include "stmot/io.hpp"
#include "stmot/sparse4d.hpp"

namespace stmot {

/// Per-class appearance and motion priors. Class 0 is car-like, class 1
/// pedestrian-like; the table can be extended.
struct SimClassSpec {
  Scalar w_mean = 1.9, l_mean = 4.6, h_mean = 1.6;
  Scalar size_jitter = 0.15;           // relative
  Scalar z_center = 0.8;
  Scalar speed_min = 0.5, speed_max = 1.5;  // meters per frame
  int points = 70;
};

struct SceneConfig {
  int num_scenes = 1;
  int frames = 40;
  int initial_objects = 4;
  Scalar spawn_prob = 0.05;       // chance of one new object per frame
  Scalar turn_fraction = 0.5;     // constant-turn share of the motion mix
  Scalar turn_rate_min = 0.05;    // rad per frame
  Scalar turn_rate_max = 0.3;
  Scalar occlusion_dropout = 0.0;  // chance a frame's observation is dropped
  Scalar ped_fraction = 0.3;
  Scalar clutter_points = 40.0;   // uniform background points per frame
  Scalar point_jitter = 0.02;     // meters, Gaussian, per axis
  Scalar spawn_margin = 3.0;      // keep spawns this far from the border
  uint64_t seed = 1;
  std::vector<SimClassSpec> classes{
      SimClassSpec{},
      SimClassSpec{0.7, 0.7, 1.7, 0.1, 0.85, 0.15, 0.5, 25},
  };

  void validate() const {
    if (frames < 1) throw std::invalid_argument("SceneConfig: frames must be >= 1");
    if (num_scenes < 1) throw std::invalid_argument("SceneConfig: num_scenes must be >= 1");
    for (Scalar p : {spawn_prob, turn_fraction, occlusion_dropout, ped_fraction}) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw std::invalid_argument("SceneConfig: probabilities must be in [0, 1]");
      }
    }
  }
};

namespace sim_detail {

struct SimObject {
  int64_t id = -1;
  int cls = 0;
  Scalar x = 0, y = 0, yaw = 0;
  Scalar speed = 0;      // meters per frame
  Scalar turn = 0;       // radians per frame
  Scalar w = 1, l = 1, h = 1, zc = 0.5;
  Scalar prev_x = 0, prev_y = 0;
  bool has_prev = false;
};

/// Exact constant-turn / constant-velocity step over one frame.
inline void motion_step(Scalar x, Scalar y, Scalar yaw, Scalar speed, Scalar turn, Scalar* nx,
                        Scalar* ny, Scalar* nyaw) {
  if (std::abs(turn) < 1e-12) {
    *nx = x + speed * std::cos(yaw);
    *ny = y + speed * std::sin(yaw);
    *nyaw = yaw;
  } else {
    const Scalar radius = speed / turn;
    *nx = x + radius * (std::sin(yaw + turn) - std::sin(yaw));
    *ny = y - radius * (std::cos(yaw + turn) - std::cos(yaw));
    *nyaw = normalize_angle(yaw + turn);
  }
}

/// Uniform sample on the box surface (4 sides + top), in world coordinates.
inline Point4D sample_surface_point(const SimObject& o, std::mt19937_64& rng) {
  std::uniform_real_distribution<Scalar> u01(0.0, 1.0);
  const Scalar side_w = o.l * o.h;  // faces normal to the lateral axis
  const Scalar side_l = o.w * o.h;  // faces normal to the heading axis
  const Scalar top = o.w * o.l;
  const Scalar total = 2 * side_w + 2 * side_l + top;
  Scalar pick = u01(rng) * total;
  Scalar ax = 0, lat = 0, z = 0;  // box frame: ax along heading, lat across
  if (pick < 2 * side_w) {
    const Scalar sign = pick < side_w ? 1.0 : -1.0;
    ax = (u01(rng) - 0.5) * o.l;
    lat = sign * o.w / 2.0;
    z = u01(rng) * o.h;
  } else if (pick < 2 * side_w + 2 * side_l) {
    pick -= 2 * side_w;
    const Scalar sign = pick < side_l ? 1.0 : -1.0;
    ax = sign * o.l / 2.0;
    lat = (u01(rng) - 0.5) * o.w;
    z = u01(rng) * o.h;
  } else {
    ax = (u01(rng) - 0.5) * o.l;
    lat = (u01(rng) - 0.5) * o.w;
    z = o.h;
  }
  const Scalar ca = std::cos(o.yaw), sa = std::sin(o.yaw);
  Point4D p;
  p.x = o.x + ca * ax - sa * lat;
  p.y = o.y + sa * ax + ca * lat;
  p.z = o.zc - o.h / 2.0 + z;
  p.r = u01(rng);
  p.t = 1;
  return p;
}

}  // namespace sim_detail

/// Generates the scenes of one dataset. Objects bounce back toward the world
/// center when they would leave the safe extent, so ids persist for the whole
/// scene.
inline SceneDataset gen_scenes(const SceneConfig& cfg, const VoxelGridSpec& grid,
                               Scalar frame_interval = 0.5) {
  cfg.validate();
  grid.validate();
  SceneDataset data;
  data.grid = grid;
  data.frame_interval = frame_interval;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<Scalar> u01(0.0, 1.0);

  const Scalar xmin = grid.range_min[0] + cfg.spawn_margin;
  const Scalar xmax = grid.range_max[0] - cfg.spawn_margin;
  const Scalar ymin = grid.range_min[1] + cfg.spawn_margin;
  const Scalar ymax = grid.range_max[1] - cfg.spawn_margin;

  for (int s = 0; s < cfg.num_scenes; ++s) {
    SimScene scene;
    scene.id = s;
    std::vector<sim_detail::SimObject> objects;
    int64_t next_id = 0;

    auto spawn = [&]() {
      sim_detail::SimObject o;
      o.id = next_id++;
      o.cls = u01(rng) < cfg.ped_fraction ? 1 : 0;
      const SimClassSpec& spec = cfg.classes.at(static_cast<size_t>(o.cls));
      std::uniform_real_distribution<Scalar> px(xmin, xmax), py(ymin, ymax);
      o.x = px(rng);
      o.y = py(rng);
      o.yaw = (u01(rng) * 2.0 - 1.0) * M_PI;
      std::uniform_real_distribution<Scalar> spd(spec.speed_min, spec.speed_max);
      o.speed = spd(rng);
      if (u01(rng) < cfg.turn_fraction) {
        std::uniform_real_distribution<Scalar> tr(cfg.turn_rate_min, cfg.turn_rate_max);
        o.turn = (u01(rng) < 0.5 ? 1.0 : -1.0) * tr(rng);
      }
      auto jitter = [&](Scalar m) { return m * (1.0 + spec.size_jitter * (u01(rng) * 2.0 - 1.0)); };
      o.w = jitter(spec.w_mean);
      o.l = jitter(spec.l_mean);
      o.h = jitter(spec.h_mean);
      o.zc = spec.z_center;
      objects.push_back(o);
    };

    for (int i = 0; i < cfg.initial_objects; ++i) spawn();

    for (int f = 0; f < cfg.frames; ++f) {
      if (f > 0 && u01(rng) < cfg.spawn_prob) spawn();
      SimFrame frame;

      for (auto& o : objects) {
        // Ground truth with the velocity label as the displacement into this
        // frame; first frames use the analytic step instead.
        SimGtBox gt;
        gt.track_id = o.id;
        gt.box.cls = o.cls;
        gt.box.u = o.x;
        gt.box.v = o.y;
        gt.box.d = o.zc;
        gt.box.w = o.w;
        gt.box.l = o.l;
        gt.box.h = o.h;
        gt.box.alpha = o.yaw;
        gt.box.s_det = 1.0;
        if (o.has_prev) {
          gt.box.vel_x = o.x - o.prev_x;
          gt.box.vel_y = o.y - o.prev_y;
        } else {
          Scalar nx, ny, nyaw;
          sim_detail::motion_step(o.x, o.y, o.yaw, o.speed, o.turn, &nx, &ny, &nyaw);
          gt.box.vel_x = nx - o.x;
          gt.box.vel_y = ny - o.y;
        }
        gt.occluded = u01(rng) < cfg.occlusion_dropout;
        if (!gt.occluded) {
          const SimClassSpec& spec = cfg.classes.at(static_cast<size_t>(o.cls));
          std::normal_distribution<Scalar> noise(0.0, cfg.point_jitter);
          for (int k = 0; k < spec.points; ++k) {
            Point4D p = sim_detail::sample_surface_point(o, rng);
            p.x += noise(rng);
            p.y += noise(rng);
            p.z += noise(rng);
            frame.points.push_back(p);
          }
        }
        frame.gt.push_back(gt);
      }

      // Uniform background clutter across the full grid volume.
      const int n_clutter = static_cast<int>(cfg.clutter_points);
      std::uniform_real_distribution<Scalar> cx(grid.range_min[0], grid.range_max[0]);
      std::uniform_real_distribution<Scalar> cy(grid.range_min[1], grid.range_max[1]);
      std::uniform_real_distribution<Scalar> cz(grid.range_min[2], grid.range_max[2]);
      for (int k = 0; k < n_clutter; ++k) {
        frame.points.push_back({cx(rng), cy(rng), cz(rng), 1, u01(rng)});
      }

      scene.frames.push_back(std::move(frame));

      // Advance the world one frame.
      for (auto& o : objects) {
        o.prev_x = o.x;
        o.prev_y = o.y;
        o.has_prev = true;
        Scalar nx, ny, nyaw;
        sim_detail::motion_step(o.x, o.y, o.yaw, o.speed, o.turn, &nx, &ny, &nyaw);
        if (nx < xmin || nx > xmax || ny < ymin || ny > ymax) {
          // Bounce: turn back toward the world center and retry the step.
          o.yaw = normalize_angle(std::atan2(-o.y, -o.x) + 0.2 * (u01(rng) - 0.5));
          sim_detail::motion_step(o.x, o.y, o.yaw, o.speed, o.turn, &nx, &ny, &nyaw);
        }
        o.x = nx;
        o.y = ny;
        o.yaw = nyaw;
      }
    }
    data.scenes.push_back(std::move(scene));
  }
  return data;
}

inline SceneConfig scene_config_from_kv(const KVConfig& kv) {
  SceneConfig cfg;
  cfg.num_scenes = static_cast<int>(kv.get_int("scenes", cfg.num_scenes));
  cfg.frames = static_cast<int>(kv.get_int("frames", cfg.frames));
  cfg.initial_objects = static_cast<int>(kv.get_int("objects", cfg.initial_objects));
  cfg.spawn_prob = kv.get_num("spawn_prob", cfg.spawn_prob);
  cfg.turn_fraction = kv.get_num("turn_fraction", cfg.turn_fraction);
  cfg.turn_rate_min = kv.get_num("turn_rate_min", cfg.turn_rate_min);
  cfg.turn_rate_max = kv.get_num("turn_rate_max", cfg.turn_rate_max);
  cfg.occlusion_dropout = kv.get_num("occlusion_dropout", cfg.occlusion_dropout);
  cfg.ped_fraction = kv.get_num("ped_fraction", cfg.ped_fraction);
  cfg.clutter_points = kv.get_num("clutter_points", cfg.clutter_points);
  cfg.point_jitter = kv.get_num("point_jitter", cfg.point_jitter);
  cfg.spawn_margin = kv.get_num("spawn_margin", cfg.spawn_margin);
  cfg.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<int64_t>(cfg.seed)));
  if (kv.has("car_points")) {
    cfg.classes[0].points = static_cast<int>(kv.get_int("car_points", cfg.classes[0].points));
  }
  if (kv.has("ped_points")) {
    cfg.classes[1].points = static_cast<int>(kv.get_int("ped_points", cfg.classes[1].points));
  }
  if (kv.has("speed_min")) cfg.classes[0].speed_min = kv.get_num("speed_min", 0.5);
  if (kv.has("speed_max")) cfg.classes[0].speed_max = kv.get_num("speed_max", 1.5);
  return cfg;
}

}  // namespace stmot
