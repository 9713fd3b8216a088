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

/// The 4D sparse middle encoder: voxelize -> VFE -> a stack of sparse
/// convolution stages that stride spatially but never temporally, then a
/// densify step that squashes the remaining Z slices into channels and splits
/// the result into one bird's-eye-view feature image per timestep.

#pragma once

#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "stmot/nn.hpp"
#include "stmot/sparse4d.hpp"
#include "stmot/tensor.hpp"

namespace stmot {

struct EncoderStageConfig {
  int64_t channels = 16;
  KernelSize kernel{};
  ConvStride stride{};
};

/// Validated encoder layout. Construction fails for any stage with a temporal
/// stride other than 1, for mismatched x/y strides, and for even kernels on
/// stride-1 (submanifold) stages.
class EncoderConfig {
 public:
  EncoderConfig(int64_t vfe_channels, std::vector<EncoderStageConfig> stages)
      : vfe_channels_(vfe_channels), stages_(std::move(stages)) {
    if (vfe_channels_ < 1) throw std::invalid_argument("EncoderConfig: vfe_channels must be >= 1");
    if (stages_.empty()) throw std::invalid_argument("EncoderConfig: need at least one stage");
    for (const auto& s : stages_) {
      if (s.stride.t != 1) {
        throw std::invalid_argument("temporal stride forbidden: encoder stages must keep stride.t == 1");
      }
      if (s.stride.x != s.stride.y) {
        throw std::invalid_argument("EncoderConfig: x and y strides must match");
      }
      if (s.stride.x < 1 || s.stride.z < 1) {
        throw std::invalid_argument("EncoderConfig: strides must be >= 1");
      }
      if (s.channels < 1) throw std::invalid_argument("EncoderConfig: channels must be >= 1");
      if (s.kernel.kt < 1 || s.kernel.kz < 1 || s.kernel.ky < 1 || s.kernel.kx < 1) {
        throw std::invalid_argument("EncoderConfig: kernel sizes must be >= 1");
      }
      if (is_submanifold(s) && (s.kernel.kt % 2 == 0 || s.kernel.kz % 2 == 0 ||
                                s.kernel.ky % 2 == 0 || s.kernel.kx % 2 == 0)) {
        throw std::invalid_argument("EncoderConfig: submanifold kernels must be odd");
      }
    }
  }

  static bool is_submanifold(const EncoderStageConfig& s) {
    return s.stride.x == 1 && s.stride.y == 1 && s.stride.z == 1;
  }

  int64_t vfe_channels() const { return vfe_channels_; }
  const std::vector<EncoderStageConfig>& stages() const { return stages_; }

  /// Cumulative spatial stride in x/y.
  int spatial_stride() const {
    int st = 1;
    for (const auto& s : stages_) st *= s.stride.x;
    return st;
  }
  int z_stride() const {
    int st = 1;
    for (const auto& s : stages_) st *= s.stride.z;
    return st;
  }
  int64_t stage_channels() const { return stages_.back().channels; }

 private:
  int64_t vfe_channels_;
  std::vector<EncoderStageConfig> stages_;
};

/// World <-> BEV pixel mapping. Pixel (iy, ix) covers the band
/// [origin + i*cell, origin + (i+1)*cell) and its center sits at
/// origin + (i + 0.5) * cell.
struct BevGeometry {
  Scalar origin_x = 0.0;
  Scalar origin_y = 0.0;
  Scalar cell_x = 1.0;
  Scalar cell_y = 1.0;
  int64_t width = 0;   // pixels along x
  int64_t height = 0;  // pixels along y

  Scalar center_x(int64_t ix) const { return origin_x + (static_cast<Scalar>(ix) + 0.5) * cell_x; }
  Scalar center_y(int64_t iy) const { return origin_y + (static_cast<Scalar>(iy) + 0.5) * cell_y; }
  /// Continuous pixel coordinate of a world position; px == ix means "exactly
  /// on the center of pixel ix".
  Scalar to_px(Scalar x) const { return (x - origin_x) / cell_x - 0.5; }
  Scalar to_py(Scalar y) const { return (y - origin_y) / cell_y - 0.5; }

  static BevGeometry from_grid(const VoxelGridSpec& spec, int spatial_stride) {
    BevGeometry g;
    g.origin_x = spec.range_min[0];
    g.origin_y = spec.range_min[1];
    g.cell_x = spec.voxel_size[0] * spatial_stride;
    g.cell_y = spec.voxel_size[1] * spatial_stride;
    g.width = spec.nx() / spatial_stride;
    g.height = spec.ny() / spatial_stride;
    return g;
  }
};

/// Dense per-timestep BEV feature maps. maps[k] is the image for t = k+1
/// (t=1 is the current frame); there is one map per input frame of the
/// window, zero-valued wherever nothing was observed.
struct BEVSequence {
  std::vector<DenseTensor> maps;  // each (C_bev, H, W)
  BevGeometry geom;

  int t_len() const { return static_cast<int>(maps.size()); }
  int64_t channels() const { return maps.empty() ? 0 : maps.front().dim(0); }

  const DenseTensor* map_for_t(int t) const {
    if (t < 1 || t > t_len()) return nullptr;
    return &maps[static_cast<size_t>(t - 1)];
  }
};

/// The full spatio-temporal encoder with explicit backward.
class Encoder {
 public:
  struct Cache {
    Vfe::Cache vfe;
    std::deque<KernelMap> maps;
    std::vector<SparseConv4d::Cache> convs;
    std::vector<ReluCache> relus;
    std::vector<Coord4> final_coords;
    int64_t final_channels = 0;
    int t_count = 0;
    BevGeometry geom;
    int64_t z_slices = 0;
  };

  Encoder() = default;
  Encoder(ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg,
          std::mt19937_64& rng)
      : cfg_(cfg), vfe_(ps, prefix + ".vfe", cfg.vfe_channels(), rng) {
    int64_t cin = cfg.vfe_channels();
    int i = 0;
    for (const auto& s : cfg.stages()) {
      convs_.emplace_back(ps, prefix + ".stage" + std::to_string(i), cin, s.channels, s.kernel,
                          rng);
      cin = s.channels;
      ++i;
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Number of Z slices that survive the stage strides and get concatenated
  /// into BEV channels.
  int64_t z_slices(const VoxelGridSpec& spec) const {
    const int64_t n = spec.nz() / cfg_.z_stride();
    return std::max<int64_t>(n, 1);
  }

  int64_t bev_channels(const VoxelGridSpec& spec) const {
    return z_slices(spec) * cfg_.stage_channels();
  }

  BEVSequence forward(const std::vector<std::vector<Point4D>>& frames, const VoxelGridSpec& spec,
                      Cache* cache = nullptr) const {
    spec.validate();
    if (frames.empty() || static_cast<int>(frames.size()) > spec.t_len) {
      throw std::invalid_argument("Encoder: window must hold between 1 and T frames");
    }

    VoxelGroups groups = voxelize(frames, spec);
    SparseVoxelTensor4D x = vfe_.forward(groups, cache ? &cache->vfe : nullptr);

    Cache local;
    Cache& c = cache ? *cache : local;
    c.maps.clear();
    c.convs.assign(convs_.size(), {});
    c.relus.assign(convs_.size(), {});
    for (size_t i = 0; i < convs_.size(); ++i) {
      const auto& s = cfg_.stages()[i];
      const ConvMode mode =
          EncoderConfig::is_submanifold(s) ? ConvMode::kSubmanifold : ConvMode::kGenerative;
      c.maps.push_back(build_kernel_map(x, s.kernel, s.stride, mode));
      SparseVoxelTensor4D y = convs_[i].forward(x, c.maps.back(), &c.convs[i]);
      y.features = relu(y.features, &c.relus[i]);
      x = std::move(y);
    }

    BEVSequence out;
    out.geom = BevGeometry::from_grid(spec, cfg_.spatial_stride());
    const int64_t slices = z_slices(spec);
    const int64_t c_stage = cfg_.stage_channels();
    const int64_t c_bev = slices * c_stage;
    const int t_count = static_cast<int>(frames.size());
    for (int t = 0; t < t_count; ++t) {
      out.maps.emplace_back(std::vector<int64_t>{c_bev, out.geom.height, out.geom.width});
    }
    for (int64_t row = 0; row < x.rows(); ++row) {
      const Coord4& co = x.coords[static_cast<size_t>(row)];
      if (co.t < 1 || co.t > t_count) continue;
      if (co.z < 0 || co.z >= slices) continue;
      if (co.y < 0 || co.y >= out.geom.height) continue;
      if (co.x < 0 || co.x >= out.geom.width) continue;
      DenseTensor& m = out.maps[static_cast<size_t>(co.t - 1)];
      for (int64_t ch = 0; ch < c_stage; ++ch) {
        m(co.z * c_stage + ch, co.y, co.x) = x.features(row, ch);
      }
    }

    c.final_coords = x.coords;
    c.final_channels = c_stage;
    c.t_count = t_count;
    c.geom = out.geom;
    c.z_slices = slices;
    return out;
  }

  /// d_maps must be indexed like BEVSequence.maps. Accumulates parameter
  /// gradients for every stage and the VFE.
  void backward(Cache& cache, const std::vector<DenseTensor>& d_maps) const {
    const int64_t c_stage = cache.final_channels;
    DenseTensor d_x({static_cast<int64_t>(cache.final_coords.size()), c_stage});
    for (int64_t row = 0; row < d_x.dim(0); ++row) {
      const Coord4& co = cache.final_coords[static_cast<size_t>(row)];
      if (co.t < 1 || co.t > cache.t_count) continue;
      if (co.z < 0 || co.z >= cache.z_slices) continue;
      if (co.y < 0 || co.y >= cache.geom.height) continue;
      if (co.x < 0 || co.x >= cache.geom.width) continue;
      const DenseTensor& dm = d_maps[static_cast<size_t>(co.t - 1)];
      for (int64_t ch = 0; ch < c_stage; ++ch) {
        d_x(row, ch) = dm(co.z * c_stage + ch, co.y, co.x);
      }
    }
    DenseTensor g = d_x;
    for (size_t i = convs_.size(); i-- > 0;) {
      g = relu_backward(cache.relus[i], g);
      g = convs_[i].backward(cache.convs[i], g);
    }
    vfe_.backward(cache.vfe, g);
  }

 private:
  EncoderConfig cfg_{1, {EncoderStageConfig{}}};
  Vfe vfe_;
  std::vector<SparseConv4d> convs_;
};

/// Three parallel stride-1 convolution branches on a BEV image: one feeds the
/// classification head, one the box regression head, and one the track ROI
/// sampling. The instance branch is shared across timesteps.
class HeadBranches {
 public:
  struct Cache {
    Conv2d::Cache cls, reg;
    std::vector<Conv2d::Cache> inst;  // one per timestep the branch ran on
  };

  HeadBranches() = default;
  HeadBranches(ParamStore& ps, const std::string& prefix, int64_t channels, int64_t kernel,
               std::mt19937_64& rng)
      : cls_(ps, prefix + ".cls", channels, channels, kernel, rng),
        reg_(ps, prefix + ".reg", channels, channels, kernel, rng),
        inst_(ps, prefix + ".inst", channels, channels, kernel, rng) {}

  const Conv2d& cls_branch() const { return cls_; }
  const Conv2d& reg_branch() const { return reg_; }
  const Conv2d& inst_branch() const { return inst_; }

  void init_identity() {
    cls_.init_identity();
    reg_.init_identity();
    inst_.init_identity();
  }

  DenseTensor forward_cls(const DenseTensor& f1, Cache* cache = nullptr) const {
    return cls_.forward(f1, cache ? &cache->cls : nullptr);
  }
  DenseTensor forward_reg(const DenseTensor& f1, Cache* cache = nullptr) const {
    return reg_.forward(f1, cache ? &cache->reg : nullptr);
  }
  /// Runs the shared instance branch on the map of one timestep. The caller
  /// invokes this once per t in ascending order; caches append in that order.
  DenseTensor forward_inst(const DenseTensor& ft, Cache* cache = nullptr) const {
    if (!cache) return inst_.forward(ft, nullptr);
    cache->inst.emplace_back();
    return inst_.forward(ft, &cache->inst.back());
  }

  DenseTensor backward_cls(Cache& cache, const DenseTensor& dy) const {
    return cls_.backward(cache.cls, dy);
  }
  DenseTensor backward_reg(Cache& cache, const DenseTensor& dy) const {
    return reg_.backward(cache.reg, dy);
  }
  DenseTensor backward_inst(Cache& cache, size_t t_index, const DenseTensor& dy) const {
    return inst_.backward(cache.inst.at(t_index), dy);
  }

 private:
  Conv2d cls_, reg_, inst_;
};

}  // namespace stmot
