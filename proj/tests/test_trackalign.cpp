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

#include <algorithm>
#include <random>

#include "stmot/nn.hpp"
#include "stmot/trackalign.hpp"

namespace stmot {
namespace {

BevGeometry centered_geom(int64_t n, Scalar cell = 1.0) {
  BevGeometry g;
  g.origin_x = -static_cast<Scalar>(n) * cell / 2.0;
  g.origin_y = -static_cast<Scalar>(n) * cell / 2.0;
  g.cell_x = cell;
  g.cell_y = cell;
  g.width = n;
  g.height = n;
  return g;
}

TEST(Bbox3dTo2d, DropsZAxisElements) {
  Detection b;
  b.u = 1.0;
  b.v = 2.0;
  b.d = 5.0;
  b.w = 2.0;
  b.l = 4.0;
  b.h = 1.0;
  b.alpha = 0.3;
  const RotatedBox2D r = bbox3d_to_2d(b);
  EXPECT_DOUBLE_EQ(r.cx, 1.0);
  EXPECT_DOUBLE_EQ(r.cy, 2.0);
  EXPECT_DOUBLE_EQ(r.w, 2.0);
  EXPECT_DOUBLE_EQ(r.l, 4.0);
  EXPECT_DOUBLE_EQ(r.alpha, 0.3);  // preserved exactly
}

TEST(RotatedRoiAlign, ConstantMapSamplesConstant) {
  const BevGeometry geom = centered_geom(12);
  DenseTensor map({3, 12, 12}, 2.75);
  const RotatedBox2D box{0.7, -1.3, 2.0, 4.0, 0.6};
  const DenseTensor grid = rotated_roi_align(map, box, 5, geom);
  for (Scalar v : grid.data) EXPECT_NEAR(v, 2.75, 1e-12);
}

TEST(RotatedRoiAlign, ExactPixelForUnitBoxAtPixelCenter) {
  const BevGeometry geom = centered_geom(8);
  DenseTensor map({1, 8, 8});
  std::mt19937_64 rng(3);
  init_normal(map, rng, 1.0);
  const RotatedBox2D box{geom.center_x(5), geom.center_y(2), geom.cell_y, geom.cell_x, 0.0};
  const DenseTensor grid = rotated_roi_align(map, box, 1, geom);
  ASSERT_EQ(grid.numel(), 1);
  EXPECT_DOUBLE_EQ(grid[0], map(0, 2, 5));  // bilinear weights degenerate to 1
}

TEST(RotatedRoiAlign, OutOfMapSamplesReadZero) {
  const BevGeometry geom = centered_geom(8);
  DenseTensor map({1, 8, 8}, 1.0);
  const RotatedBox2D box{geom.origin_x - 10.0, 0.0, 2.0, 2.0, 0.0};  // fully outside
  const DenseTensor grid = rotated_roi_align(map, box, 3, geom);
  for (Scalar v : grid.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(RotatedRoiAlign, RotationEquivariance) {
  const int64_t n = 10;
  const BevGeometry geom = centered_geom(n);
  std::mt19937_64 rng(5);
  DenseTensor map({2, n, n});
  init_normal(map, rng, 1.0);
  // World rotation by +90 degrees: (x, y) -> (-y, x). With the symmetric
  // geometry this maps pixel (iy, ix) to (iy', ix') = (ix, n-1-iy).
  DenseTensor rot({2, n, n});
  for (int64_t c = 0; c < 2; ++c) {
    for (int64_t iy = 0; iy < n; ++iy) {
      for (int64_t ix = 0; ix < n; ++ix) rot(c, ix, n - 1 - iy) = map(c, iy, ix);
    }
  }
  const RotatedBox2D box{1.2, -0.7, 1.5, 3.0, 0.35};
  const RotatedBox2D box_rot{-box.cy, box.cx, box.w, box.l, box.alpha + M_PI / 2.0};
  const DenseTensor a = rotated_roi_align(map, box, 5, geom);
  const DenseTensor b = rotated_roi_align(rot, box_rot, 5, geom);
  EXPECT_LT(max_abs_diff(a, b), 1e-5);
}

TEST(TrackAlign, IdenticalFeaturesEveryStepEqualSingleStep) {
  const BevGeometry geom = centered_geom(10);
  std::mt19937_64 rng(7);
  DenseTensor base({2, 10, 10});
  init_normal(base, rng, 1.0);
  const std::vector<DenseTensor> maps{base, base, base};
  Detection det;
  det.u = 0.4;
  det.v = -0.2;
  det.w = 2.0;
  det.l = 3.0;
  det.alpha = 0.2;
  std::map<int, Detection> history{{2, det}, {3, det}};  // same box everywhere
  const RoiFeature pooled = track_align(maps, geom, det, history, 5);
  const DenseTensor single = rotated_roi_align(base, bbox3d_to_2d(det), 5, geom);
  EXPECT_EQ(pooled.grid.data, single.data);  // max is idempotent
  EXPECT_EQ(pooled.source_ts, (std::vector<int>{1, 2, 3}));
}

TEST(TrackAlign, TwoStepsPoolToElementwiseMax) {
  const BevGeometry geom = centered_geom(10);
  std::mt19937_64 rng(8);
  std::vector<DenseTensor> maps;
  for (int t = 0; t < 2; ++t) {
    DenseTensor m({2, 10, 10});
    init_normal(m, rng, 1.0);
    maps.push_back(m);
  }
  Detection det;
  det.u = 0.3;
  det.v = 0.1;
  det.w = 2.0;
  det.l = 2.5;
  det.alpha = -0.4;
  Detection past = det;
  past.u = -0.5;
  past.alpha = -0.2;
  const RoiFeature pooled = track_align(maps, geom, det, {{2, past}}, 4);

  const DenseTensor a = rotated_roi_align(maps[0], bbox3d_to_2d(det), 4, geom);
  const DenseTensor b = rotated_roi_align(maps[1], bbox3d_to_2d(past), 4, geom);
  for (int64_t i = 0; i < a.numel(); ++i) {
    EXPECT_DOUBLE_EQ(pooled.grid[i], std::max(a[i], b[i]));
  }
}

TEST(TrackAlign, MissingTimestepSkipped) {
  const BevGeometry geom = centered_geom(10);
  std::mt19937_64 rng(9);
  std::vector<DenseTensor> maps;
  for (int t = 0; t < 5; ++t) {
    DenseTensor m({1, 10, 10});
    init_normal(m, rng, 1.0);
    maps.push_back(m);
  }
  Detection det;
  det.u = 0.0;
  det.v = 0.0;
  det.w = 2.0;
  det.l = 2.0;
  std::map<int, Detection> history;  // t=3 missing: {2, 4, 5}
  for (int t : {2, 4, 5}) {
    Detection b = det;
    b.u = 0.2 * t;
    history[t] = b;
  }
  const RoiFeature pooled = track_align(maps, geom, det, history, 3);
  EXPECT_EQ(pooled.source_ts, (std::vector<int>{1, 2, 4, 5}));

  // Padding-free oracle over the available steps only.
  std::vector<DenseTensor> grids{rotated_roi_align(maps[0], bbox3d_to_2d(det), 3, geom)};
  for (int t : {2, 4, 5}) {
    grids.push_back(rotated_roi_align(maps[static_cast<size_t>(t - 1)],
                                      bbox3d_to_2d(history[t]), 3, geom));
  }
  DenseTensor expect = grids[0];
  for (size_t s = 1; s < grids.size(); ++s) {
    for (int64_t i = 0; i < expect.numel(); ++i) expect[i] = std::max(expect[i], grids[s][i]);
  }
  EXPECT_EQ(pooled.grid.data, expect.data);
}

TEST(TrackAlign, EmptyHistoryPoolsOverCurrentAlone) {
  const BevGeometry geom = centered_geom(10);
  std::mt19937_64 rng(10);
  DenseTensor m({1, 10, 10});
  init_normal(m, rng, 1.0);
  const std::vector<DenseTensor> maps{m, m, m};
  Detection det;
  det.u = 0.1;
  det.v = 0.2;
  det.w = 1.5;
  det.l = 2.0;
  const RoiFeature pooled = track_align(maps, geom, det, {}, 5);
  EXPECT_EQ(pooled.source_ts, (std::vector<int>{1}));
  const DenseTensor single = rotated_roi_align(m, bbox3d_to_2d(det), 5, geom);
  EXPECT_EQ(pooled.grid.data, single.data);
}

TEST(MaxPool, TemporalPermutationInvariance) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<DenseTensor> grids;
    const int n = 2 + static_cast<int>(rng() % 4);
    for (int s = 0; s < n; ++s) {
      DenseTensor g({3, 4, 4});
      init_normal(g, rng, 1.0);
      grids.push_back(g);
    }
    std::vector<const DenseTensor*> order;
    for (const auto& g : grids) order.push_back(&g);
    const DenseTensor ref = elementwise_max_pool(order);
    for (int shuffle = 0; shuffle < 5; ++shuffle) {
      std::shuffle(order.begin(), order.end(), rng);
      const DenseTensor got = elementwise_max_pool(order);
      EXPECT_EQ(got.data, ref.data);  // exact
    }
  }
}

TEST(MaxPool, WindowLengthAgnostic) {
  std::mt19937_64 rng(12);
  std::vector<DenseTensor> grids;
  for (int s = 0; s < 3; ++s) {
    DenseTensor g({2, 3, 3});
    init_normal(g, rng, 1.0);
    grids.push_back(g);
  }
  std::vector<const DenseTensor*> order{&grids[0], &grids[1], &grids[2]};
  const DenseTensor ref = elementwise_max_pool(order);
  DenseTensor dominated = ref;
  for (auto& v : dominated.data) v -= 0.5;  // elementwise <= the current max
  order.push_back(&dominated);
  const DenseTensor got = elementwise_max_pool(order);
  EXPECT_EQ(got.data, ref.data);
}

TEST(RoiAlignGradient, BilinearSamplingGradCheck) {
  const BevGeometry geom = centered_geom(8);
  std::mt19937_64 rng(13);
  DenseTensor map({2, 8, 8});
  init_normal(map, rng, 1.0);
  // Box offset from pixel centers so no sample sits on a grid line.
  const RotatedBox2D box{0.37, -0.83, 1.7, 2.9, 0.51};
  DenseTensor weights({2, 5, 5});
  init_normal(weights, rng, 1.0);

  RoiAlignCache cache;
  rotated_roi_align(map, box, 5, geom, &cache);
  DenseTensor d_map({2, 8, 8});
  rotated_roi_align_backward(cache, weights, d_map);

  auto f = [&](const DenseTensor& m) {
    const DenseTensor g = rotated_roi_align(m, box, 5, geom);
    Scalar s = 0.0;
    for (int64_t i = 0; i < g.numel(); ++i) s += weights[i] * g[i];
    return s;
  };
  EXPECT_LT(grad_check(f, map, d_map, 1e-6), 1e-3);
}

TEST(TrackAlignGradient, RoutesThroughArgmax) {
  const BevGeometry geom = centered_geom(8);
  std::mt19937_64 rng(14);
  std::vector<DenseTensor> maps;
  for (int t = 0; t < 3; ++t) {
    DenseTensor m({2, 8, 8});
    init_normal(m, rng, 1.0);
    maps.push_back(m);
  }
  Detection det;
  det.u = 0.23;
  det.v = -0.41;
  det.w = 1.9;
  det.l = 2.7;
  det.alpha = 0.3;
  Detection p2 = det;
  p2.u -= 0.7;
  Detection p3 = det;
  p3.u -= 1.3;
  const std::map<int, Detection> history{{2, p2}, {3, p3}};
  DenseTensor weights({2, 4, 4});
  init_normal(weights, rng, 1.0);

  TrackAlignCache cache;
  track_align(maps, geom, det, history, 4, &cache);
  std::vector<DenseTensor> d_maps;
  for (const auto& m : maps) d_maps.emplace_back(m.shape);
  track_align_backward(cache, weights, d_maps);

  for (int t = 0; t < 3; ++t) {
    auto f = [&](const DenseTensor& m) {
      std::vector<DenseTensor> local = maps;
      local[static_cast<size_t>(t)] = m;
      const RoiFeature pooled = track_align(local, geom, det, history, 4);
      Scalar s = 0.0;
      for (int64_t i = 0; i < pooled.grid.numel(); ++i) s += weights[i] * pooled.grid[i];
      return s;
    };
    EXPECT_LT(grad_check(f, maps[static_cast<size_t>(t)], d_maps[static_cast<size_t>(t)], 1e-7),
              1e-3)
        << "t=" << t + 1;
  }
}

}  // namespace
}  // namespace stmot
