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

/// Center-heatmap 3D detection head on the current-frame BEV image: Gaussian
/// target rendering, per-class heatmap + box/velocity regression, peak
/// decoding back to world-space boxes, and the detection loss with exact
/// gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "stmot/encoder.hpp"
#include "stmot/nn.hpp"
#include "stmot/tensor.hpp"

namespace stmot {

inline Scalar normalize_angle(Scalar a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a <= -M_PI) a += 2.0 * M_PI;
  return a;
}

/// One 3D box: BEV center (u, v) plus height d, size (w, l, h), yaw alpha in
/// (-pi, pi], per-frame BEV displacement (vel_x, vel_y), class and score.
struct Detection {
  Scalar u = 0.0, v = 0.0, d = 0.0;
  Scalar w = 1.0, l = 1.0, h = 1.0;
  Scalar alpha = 0.0;
  Scalar vel_x = 0.0, vel_y = 0.0;
  int cls = 0;
  Scalar s_det = 0.0;
};

inline Scalar bev_distance(Scalar ax, Scalar ay, Scalar bx, Scalar by) {
  const Scalar dx = ax - bx, dy = ay - by;
  return std::sqrt(dx * dx + dy * dy);
}

// ---------------------------------------------------------------------------
// Target rendering

/// Regression channel layout at a peak cell.
enum RegChannel : int64_t {
  kRegDx = 0,  // sub-cell offset in pixel units, [-0.5, 0.5)
  kRegDy = 1,
  kRegD = 2,  // center height in meters
  kRegLogW = 3,
  kRegLogL = 4,
  kRegLogH = 5,
  kRegSin = 6,
  kRegCos = 7,
  kRegChannels = 8,
};

struct DetectionTargets {
  DenseTensor heatmap;  // (C_cls, H, W), values in [0,1], one 1.0 peak per box
  DenseTensor reg;      // (8, H, W)
  DenseTensor vel;      // (2, H, W)
  DenseTensor mask;     // (H, W), 1 at peak cells
  int64_t num_pos = 0;
  int64_t skipped = 0;  // boxes outside the BEV extent
};

/// Radius of the target Gaussian so a blob of that size still overlaps the
/// footprint by at least min_overlap (the usual three-case bound).
inline int gaussian_radius(Scalar width_px, Scalar length_px, Scalar min_overlap = 0.3) {
  const Scalar w = width_px, h = length_px;
  const Scalar a1 = 1.0, b1 = h + w, c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
  const Scalar r1 = (b1 - std::sqrt(std::max<Scalar>(0.0, b1 * b1 - 4 * a1 * c1))) / (2 * a1);
  const Scalar a2 = 4.0, b2 = 2.0 * (h + w), c2 = (1.0 - min_overlap) * w * h;
  const Scalar r2 = (b2 - std::sqrt(std::max<Scalar>(0.0, b2 * b2 - 4 * a2 * c2))) / (2 * a2);
  const Scalar a3 = 4.0 * min_overlap, b3 = -2.0 * min_overlap * (h + w),
               c3 = (min_overlap - 1.0) * w * h;
  const Scalar r3 = (-b3 + std::sqrt(std::max<Scalar>(0.0, b3 * b3 - 4 * a3 * c3))) / (2 * a3);
  const Scalar r = std::min(r1, std::min(r2, r3));
  return std::max(1, static_cast<int>(r));
}

inline void splat_gaussian(DenseTensor& heatmap, int64_t cls, int64_t cy, int64_t cx, int radius) {
  const int64_t h = heatmap.dim(1), w = heatmap.dim(2);
  const Scalar sigma = (2.0 * radius + 1.0) / 6.0;
  for (int dy = -radius; dy <= radius; ++dy) {
    const int64_t y = cy + dy;
    if (y < 0 || y >= h) continue;
    for (int dx = -radius; dx <= radius; ++dx) {
      const int64_t x = cx + dx;
      if (x < 0 || x >= w) continue;
      const Scalar val = std::exp(-(Scalar(dx) * dx + Scalar(dy) * dy) / (2.0 * sigma * sigma));
      heatmap(cls, y, x) = std::max(heatmap(cls, y, x), val);  // overlaps combine by max
    }
  }
}

inline DetectionTargets render_targets(const std::vector<Detection>& gt_boxes,
                                       const BevGeometry& geom, int num_classes) {
  DetectionTargets t;
  t.heatmap = DenseTensor({num_classes, geom.height, geom.width});
  t.reg = DenseTensor({kRegChannels, geom.height, geom.width});
  t.vel = DenseTensor({2, geom.height, geom.width});
  t.mask = DenseTensor({geom.height, geom.width});
  for (const Detection& b : gt_boxes) {
    if (b.cls < 0 || b.cls >= num_classes) {
      ++t.skipped;
      continue;
    }
    const Scalar px = geom.to_px(b.u);
    const Scalar py = geom.to_py(b.v);
    const auto cx = static_cast<int64_t>(std::floor(px + 0.5));
    const auto cy = static_cast<int64_t>(std::floor(py + 0.5));
    if (cx < 0 || cx >= geom.width || cy < 0 || cy >= geom.height) {
      ++t.skipped;
      continue;
    }
    const int radius = gaussian_radius(b.w / geom.cell_x, b.l / geom.cell_y);
    splat_gaussian(t.heatmap, b.cls, cy, cx, radius);
    t.heatmap(b.cls, cy, cx) = 1.0;  // exact unit peak
    t.reg(kRegDx, cy, cx) = px - static_cast<Scalar>(cx);
    t.reg(kRegDy, cy, cx) = py - static_cast<Scalar>(cy);
    t.reg(kRegD, cy, cx) = b.d;
    t.reg(kRegLogW, cy, cx) = std::log(b.w);
    t.reg(kRegLogL, cy, cx) = std::log(b.l);
    t.reg(kRegLogH, cy, cx) = std::log(b.h);
    t.reg(kRegSin, cy, cx) = std::sin(b.alpha);
    t.reg(kRegCos, cy, cx) = std::cos(b.alpha);
    t.vel(0, cy, cx) = b.vel_x;
    t.vel(1, cy, cx) = b.vel_y;
    t.mask(cy, cx) = 1.0;
    ++t.num_pos;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Detection head

/// Sigmoid heatmap probabilities plus linear regression/velocity maps.
struct RawMaps {
  DenseTensor heatmap;  // (C_cls, H, W) probabilities
  DenseTensor reg;      // (8, H, W)
  DenseTensor vel;      // (2, H, W)
};

/// Two small convolutional towers on the classification / regression branch
/// features. The final heatmap bias starts negative so the initial
/// probability field is sparse.
class DetectHead {
 public:
  struct Cache {
    Conv2d::Cache heat_trunk, heat_out, reg_trunk, reg_out, vel_out;
    ReluCache heat_relu, reg_relu;
    DenseTensor probs;  // clamp-free sigmoid outputs, reused by the loss
  };

  DetectHead() = default;
  DetectHead(ParamStore& ps, const std::string& prefix, int64_t in_channels, int64_t hidden,
             int num_classes, std::mt19937_64& rng)
      : heat_trunk_(ps, prefix + ".heat.trunk", in_channels, hidden, 3, rng),
        heat_out_(ps, prefix + ".heat.out", hidden, num_classes, 1, rng),
        reg_trunk_(ps, prefix + ".reg.trunk", in_channels, hidden, 3, rng),
        reg_out_(ps, prefix + ".reg.out", hidden, kRegChannels, 1, rng),
        vel_out_(ps, prefix + ".vel.out", hidden, 2, 1, rng),
        num_classes_(num_classes) {
    Param& b = ps.at(heat_out_.bias_name());
    b.value.fill(-2.19);  // prior detection probability of about 0.1
  }

  int num_classes() const { return num_classes_; }

  RawMaps forward(const DenseTensor& feat_cls, const DenseTensor& feat_reg,
                  Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    DenseTensor h = heat_trunk_.forward(feat_cls, &c.heat_trunk);
    h = relu(h, &c.heat_relu);
    DenseTensor logits = heat_out_.forward(h, &c.heat_out);

    DenseTensor r = reg_trunk_.forward(feat_reg, &c.reg_trunk);
    r = relu(r, &c.reg_relu);

    RawMaps out;
    out.heatmap = logits;
    for (auto& v : out.heatmap.data) v = sigmoid(v);
    out.reg = reg_out_.forward(r, &c.reg_out);
    out.vel = vel_out_.forward(r, &c.vel_out);
    if (cache) c.probs = out.heatmap;
    return out;
  }

  /// d_logits is the gradient w.r.t. pre-sigmoid heatmap logits.
  /// Returns (d_feat_cls, d_feat_reg).
  std::pair<DenseTensor, DenseTensor> backward(Cache& cache, const DenseTensor& d_logits,
                                               const DenseTensor& d_reg,
                                               const DenseTensor& d_vel) const {
    DenseTensor dh = heat_out_.backward(cache.heat_out, d_logits);
    dh = relu_backward(cache.heat_relu, dh);
    DenseTensor d_feat_cls = heat_trunk_.backward(cache.heat_trunk, dh);

    DenseTensor dr = reg_out_.backward(cache.reg_out, d_reg);
    accumulate(dr, vel_out_.backward(cache.vel_out, d_vel));
    dr = relu_backward(cache.reg_relu, dr);
    DenseTensor d_feat_reg = reg_trunk_.backward(cache.reg_trunk, dr);
    return {std::move(d_feat_cls), std::move(d_feat_reg)};
  }

 private:
  Conv2d heat_trunk_, heat_out_, reg_trunk_, reg_out_, vel_out_;
  int num_classes_ = 1;
};

// ---------------------------------------------------------------------------
// Decoding

/// 3x3 local-max suppression on the heatmap, then top_k peaks at or above
/// score_thresh, inverted through the regression maps into world units.
inline std::vector<Detection> decode_detections(const RawMaps& raw, Scalar score_thresh,
                                                int64_t top_k, const BevGeometry& geom) {
  if (!raw.heatmap.all_finite() || !raw.reg.all_finite() || !raw.vel.all_finite()) {
    throw std::invalid_argument("decode_detections: non-finite maps");
  }
  const int64_t n_cls = raw.heatmap.dim(0), h = raw.heatmap.dim(1), w = raw.heatmap.dim(2);
  struct Peak {
    Scalar score;
    int64_t cls, y, x;
  };
  std::vector<Peak> peaks;
  for (int64_t c = 0; c < n_cls; ++c) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const Scalar p = raw.heatmap(c, y, x);
        if (p < score_thresh) continue;
        bool is_max = true;
        for (int dy = -1; dy <= 1 && is_max; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            const int64_t ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (raw.heatmap(c, ny, nx) > p) {
              is_max = false;
              break;
            }
          }
        }
        if (is_max) peaks.push_back({p, c, y, x});
      }
    }
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.cls, a.y, a.x) < std::tie(b.cls, b.y, b.x);
  });
  if (static_cast<int64_t>(peaks.size()) > top_k) peaks.resize(static_cast<size_t>(top_k));

  std::vector<Detection> dets;
  dets.reserve(peaks.size());
  for (const Peak& pk : peaks) {
    Detection d;
    d.u = geom.center_x(pk.x) + raw.reg(kRegDx, pk.y, pk.x) * geom.cell_x;
    d.v = geom.center_y(pk.y) + raw.reg(kRegDy, pk.y, pk.x) * geom.cell_y;
    d.d = raw.reg(kRegD, pk.y, pk.x);
    d.w = std::exp(raw.reg(kRegLogW, pk.y, pk.x));
    d.l = std::exp(raw.reg(kRegLogL, pk.y, pk.x));
    d.h = std::exp(raw.reg(kRegLogH, pk.y, pk.x));
    d.alpha = normalize_angle(
        std::atan2(raw.reg(kRegSin, pk.y, pk.x), raw.reg(kRegCos, pk.y, pk.x)));
    d.vel_x = raw.vel(0, pk.y, pk.x);
    d.vel_y = raw.vel(1, pk.y, pk.x);
    d.cls = static_cast<int>(pk.cls);
    d.s_det = pk.score;
    dets.push_back(d);
  }
  return dets;
}

// ---------------------------------------------------------------------------
// Detection loss

struct DetectionLossResult {
  Scalar total = 0.0;
  Scalar heat = 0.0;
  Scalar loc = 0.0;
  DenseTensor d_heat_logits;  // gradient w.r.t. pre-sigmoid logits
  DenseTensor d_reg;
  DenseTensor d_vel;
};

/// Penalty-reduced focal loss on the heatmap plus L1 on the regression and
/// velocity maps at peak cells, both normalized by the number of boxes.
inline DetectionLossResult detection_loss(const RawMaps& raw, const DetectionTargets& targets) {
  if (!raw.heatmap.same_shape(targets.heatmap) || !raw.reg.same_shape(targets.reg) ||
      !raw.vel.same_shape(targets.vel)) {
    throw std::invalid_argument("detection_loss: shape mismatch");
  }
  DetectionLossResult res;
  res.d_heat_logits = DenseTensor(raw.heatmap.shape);
  res.d_reg = DenseTensor(raw.reg.shape);
  res.d_vel = DenseTensor(raw.vel.shape);
  const Scalar n = static_cast<Scalar>(std::max<int64_t>(1, targets.num_pos));

  long double heat_acc = 0.0;
  for (int64_t i = 0; i < raw.heatmap.numel(); ++i) {
    const Scalar rawp = raw.heatmap[i];
    // Clamp written so a NaN probability propagates into the loss instead of
    // being silently pinned to the clamp bound.
    const Scalar p =
        rawp < kProbEps ? kProbEps : (rawp > 1.0 - kProbEps ? 1.0 - kProbEps : rawp);
    const bool clamped = (p != rawp);
    const Scalar y = targets.heatmap[i];
    Scalar dldp;
    if (y == 1.0) {
      const Scalar q = 1.0 - p;
      heat_acc += -q * q * std::log(p);
      dldp = 2.0 * q * std::log(p) - q * q / p;
    } else {
      const Scalar pen = std::pow(1.0 - y, 4.0);
      heat_acc += -pen * p * p * std::log(1.0 - p);
      dldp = -pen * (2.0 * p * std::log(1.0 - p) - p * p / (1.0 - p));
    }
    res.d_heat_logits[i] = clamped ? 0.0 : dldp * rawp * (1.0 - rawp) / n;
  }
  res.heat = static_cast<Scalar>(heat_acc) / n;

  long double loc_acc = 0.0;
  const int64_t hw = targets.mask.numel();
  for (int64_t cell = 0; cell < hw; ++cell) {
    if (targets.mask[cell] == 0.0) continue;
    for (int64_t ch = 0; ch < kRegChannels; ++ch) {
      const int64_t i = ch * hw + cell;
      const Scalar diff = raw.reg[i] - targets.reg[i];
      loc_acc += std::abs(diff);
      res.d_reg[i] = (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / n;
    }
    for (int64_t ch = 0; ch < 2; ++ch) {
      const int64_t i = ch * hw + cell;
      const Scalar diff = raw.vel[i] - targets.vel[i];
      loc_acc += std::abs(diff);
      res.d_vel[i] = (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / n;
    }
  }
  res.loc = static_cast<Scalar>(loc_acc) / n;
  res.total = res.heat + res.loc;
  return res;
}

}  // namespace stmot
