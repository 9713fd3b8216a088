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

/// Rotated ROI sampling on BEV feature images plus a symmetric temporal max
/// pool. Each timestep contributes an R x R grid of bilinearly interpolated
/// samples taken in the box's rotated frame; timesteps with no box are simply
/// skipped, and the pool is invariant to the order of the available steps.

#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "stmot/detect.hpp"
#include "stmot/encoder.hpp"
#include "stmot/tensor.hpp"

namespace stmot {

/// BEV footprint of a 3D box: the Z-axis elements (d and h) are dropped.
struct RotatedBox2D {
  Scalar cx = 0.0;
  Scalar cy = 0.0;
  Scalar w = 1.0;  // lateral extent
  Scalar l = 1.0;  // extent along the heading
  Scalar alpha = 0.0;
};

inline RotatedBox2D bbox3d_to_2d(const Detection& b) { return {b.u, b.v, b.w, b.l, b.alpha}; }

// ---------------------------------------------------------------------------
// Rotated bilinear ROI sampling

struct RoiAlignCache {
  // Four taps (flat y*W+x index, -1 when outside the map) and weights per
  // sample point; all channels share them.
  std::vector<std::array<int64_t, 4>> taps;
  std::vector<std::array<Scalar, 4>> weights;
  int64_t channels = 0, height = 0, width = 0;
};

/// Samples an R x R grid of bin centers in the box's rotated frame from one
/// (C, H, W) BEV image. Grid axis gx runs along the heading (length l), gy
/// across it (width w). Samples falling outside the map read as zero.
inline DenseTensor rotated_roi_align(const DenseTensor& map, const RotatedBox2D& box, int64_t bins,
                                     const BevGeometry& geom, RoiAlignCache* cache = nullptr) {
  if (bins < 1) throw std::invalid_argument("rotated_roi_align: bins must be >= 1");
  if (map.rank() != 3) throw std::invalid_argument("rotated_roi_align: map must be (C, H, W)");
  if (!(box.w > 0.0) || !(box.l > 0.0)) {
    throw std::invalid_argument("rotated_roi_align: box extents must be > 0");
  }
  const int64_t c_n = map.dim(0), h = map.dim(1), w = map.dim(2);
  const Scalar ca = std::cos(box.alpha), sa = std::sin(box.alpha);
  DenseTensor grid({c_n, bins, bins});
  if (cache) {
    cache->taps.assign(static_cast<size_t>(bins * bins), {-1, -1, -1, -1});
    cache->weights.assign(static_cast<size_t>(bins * bins), {0, 0, 0, 0});
    cache->channels = c_n;
    cache->height = h;
    cache->width = w;
  }
  for (int64_t gy = 0; gy < bins; ++gy) {
    const Scalar lat = ((static_cast<Scalar>(gy) + 0.5) / static_cast<Scalar>(bins) - 0.5) * box.w;
    for (int64_t gx = 0; gx < bins; ++gx) {
      const Scalar alo =
          ((static_cast<Scalar>(gx) + 0.5) / static_cast<Scalar>(bins) - 0.5) * box.l;
      const Scalar wx = box.cx + ca * alo - sa * lat;
      const Scalar wy = box.cy + sa * alo + ca * lat;
      const Scalar px = geom.to_px(wx);
      const Scalar py = geom.to_py(wy);
      const auto x0 = static_cast<int64_t>(std::floor(px));
      const auto y0 = static_cast<int64_t>(std::floor(py));
      const Scalar fx = px - static_cast<Scalar>(x0);
      const Scalar fy = py - static_cast<Scalar>(y0);
      const std::array<std::pair<int64_t, int64_t>, 4> corners{
          std::pair<int64_t, int64_t>{y0, x0}, {y0, x0 + 1}, {y0 + 1, x0}, {y0 + 1, x0 + 1}};
      const std::array<Scalar, 4> ws{(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
      std::array<int64_t, 4> taps{-1, -1, -1, -1};
      for (int k = 0; k < 4; ++k) {
        const auto [ty, tx] = corners[static_cast<size_t>(k)];
        if (ty >= 0 && ty < h && tx >= 0 && tx < w) taps[static_cast<size_t>(k)] = ty * w + tx;
      }
      for (int64_t ch = 0; ch < c_n; ++ch) {
        Scalar acc = 0.0;
        for (int k = 0; k < 4; ++k) {
          if (taps[static_cast<size_t>(k)] >= 0) {
            acc += ws[static_cast<size_t>(k)] * map[ch * h * w + taps[static_cast<size_t>(k)]];
          }
        }
        grid(ch, gy, gx) = acc;
      }
      if (cache) {
        cache->taps[static_cast<size_t>(gy * bins + gx)] = taps;
        cache->weights[static_cast<size_t>(gy * bins + gx)] = ws;
      }
    }
  }
  return grid;
}

/// Scatters the grid gradient back into a (C, H, W) map gradient.
inline void rotated_roi_align_backward(const RoiAlignCache& cache, const DenseTensor& d_grid,
                                       DenseTensor& d_map) {
  const int64_t c_n = cache.channels, hw = cache.height * cache.width;
  const int64_t bins2 = static_cast<int64_t>(cache.taps.size());
  for (int64_t s = 0; s < bins2; ++s) {
    const auto& taps = cache.taps[static_cast<size_t>(s)];
    const auto& ws = cache.weights[static_cast<size_t>(s)];
    for (int64_t ch = 0; ch < c_n; ++ch) {
      const Scalar g = d_grid[ch * bins2 + s];
      if (g == 0.0) continue;
      for (int k = 0; k < 4; ++k) {
        if (taps[static_cast<size_t>(k)] >= 0) {
          d_map[ch * hw + taps[static_cast<size_t>(k)]] += ws[static_cast<size_t>(k)] * g;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Temporal max pool

/// Elementwise max over a non-empty stack of equally shaped grids. Returns
/// the pooled grid and, via argmax, the index of the winning source per
/// element (first winner on ties). Exactly order-invariant in the values.
inline DenseTensor elementwise_max_pool(const std::vector<const DenseTensor*>& grids,
                                        std::vector<int32_t>* argmax = nullptr) {
  if (grids.empty()) throw std::invalid_argument("elementwise_max_pool: empty stack");
  DenseTensor out = *grids.front();
  if (argmax) argmax->assign(static_cast<size_t>(out.numel()), 0);
  for (size_t s = 1; s < grids.size(); ++s) {
    const DenseTensor& g = *grids[s];
    if (!g.same_shape(out)) throw std::invalid_argument("elementwise_max_pool: shape mismatch");
    for (int64_t i = 0; i < out.numel(); ++i) {
      if (g[i] > out[i]) {
        out[i] = g[i];
        if (argmax) (*argmax)[static_cast<size_t>(i)] = static_cast<int32_t>(s);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// TrackAlign

/// Joint detection/track ROI feature: max over the per-timestep grids that
/// were actually available.
struct RoiFeature {
  DenseTensor grid;             // (C, R, R)
  std::vector<int> source_ts;   // pooled timesteps, ascending, t=1 first
};

struct TrackAlignCache {
  std::vector<int> ts;                // iteration order of pooled timesteps
  std::vector<RoiAlignCache> roi;     // one per pooled timestep
  std::vector<int32_t> argmax;        // per grid element: index into ts
  std::vector<int64_t> grid_shape;    // (C, R, R)
};

/// Pools the detection's ROI at t=1 with the track's ROIs at every t in
/// [2, T] that has both a stored box and a BEV map. Missing timesteps are
/// skipped rather than padded; an empty history pools over t=1 alone.
/// inst_maps[k] is the instance-branch image for t = k+1.
inline RoiFeature track_align(const std::vector<DenseTensor>& inst_maps, const BevGeometry& geom,
                              const Detection& det, const std::map<int, Detection>& track_boxes,
                              int64_t bins, TrackAlignCache* cache = nullptr) {
  if (inst_maps.empty()) throw std::invalid_argument("track_align: no BEV maps");
  TrackAlignCache local;
  TrackAlignCache& c = cache ? *cache : local;
  c.ts.clear();
  c.roi.clear();

  std::vector<DenseTensor> grids;
  c.ts.push_back(1);
  c.roi.emplace_back();
  grids.push_back(
      rotated_roi_align(inst_maps[0], bbox3d_to_2d(det), bins, geom, &c.roi.back()));
  for (const auto& [t, box] : track_boxes) {  // std::map: ascending t
    if (t < 2 || t > static_cast<int>(inst_maps.size())) continue;
    c.ts.push_back(t);
    c.roi.emplace_back();
    grids.push_back(rotated_roi_align(inst_maps[static_cast<size_t>(t - 1)], bbox3d_to_2d(box),
                                      bins, geom, &c.roi.back()));
  }

  std::vector<const DenseTensor*> ptrs;
  ptrs.reserve(grids.size());
  for (const auto& g : grids) ptrs.push_back(&g);
  RoiFeature out;
  out.grid = elementwise_max_pool(ptrs, cache ? &c.argmax : nullptr);
  out.source_ts = c.ts;
  c.grid_shape = out.grid.shape;
  return out;
}

/// Routes the pooled-grid gradient to each element's winning timestep and
/// scatters it into the per-timestep map gradients (accumulating).
inline void track_align_backward(const TrackAlignCache& cache, const DenseTensor& d_grid,
                                 std::vector<DenseTensor>& d_inst_maps) {
  std::vector<DenseTensor> d_source(cache.ts.size(), DenseTensor(cache.grid_shape));
  for (int64_t i = 0; i < d_grid.numel(); ++i) {
    d_source[static_cast<size_t>(cache.argmax[static_cast<size_t>(i)])][i] = d_grid[i];
  }
  for (size_t s = 0; s < cache.ts.size(); ++s) {
    const int t = cache.ts[s];
    rotated_roi_align_backward(cache.roi[s], d_source[s],
                               d_inst_maps[static_cast<size_t>(t - 1)]);
  }
}

}  // namespace stmot
