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

/// 4D spatio-temporal sparse tensors: voxelization that quantizes space but
/// never time, a single-layer voxel feature encoder, kernel-map construction
/// via coordinate hashing, and 4D sparse convolution with an explicit
/// backward pass. Convolutions may stride spatially but a temporal stride
/// other than 1 is rejected outright.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "stmot/nn.hpp"
#include "stmot/tensor.hpp"

namespace stmot {

/// One lidar return in Minkowski coordinates: 3D position, relative temporal
/// index (1 = current frame, T = oldest) and reflectance.
struct Point4D {
  Scalar x = 0.0;
  Scalar y = 0.0;
  Scalar z = 0.0;
  int t = 1;
  Scalar r = 0.0;
};

/// Integer voxel coordinate (t, iz, iy, ix). Also used for kernel offsets.
struct Coord4 {
  int32_t t = 0;
  int32_t z = 0;
  int32_t y = 0;
  int32_t x = 0;

  friend bool operator==(const Coord4& a, const Coord4& b) {
    return a.t == b.t && a.z == b.z && a.y == b.y && a.x == b.x;
  }
  friend bool operator<(const Coord4& a, const Coord4& b) {
    if (a.t != b.t) return a.t < b.t;
    if (a.z != b.z) return a.z < b.z;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  }
};

/// Packs a coordinate into 64 bits, 16 bits per component with a +32768 bias
/// so moderately negative indices (from strided layers) stay representable.
inline uint64_t pack_coord(const Coord4& c) {
  auto enc = [](int32_t v) -> uint64_t {
    const int32_t biased = v + 32768;
    if (biased < 0 || biased > 0xFFFF) throw std::out_of_range("pack_coord: index out of range");
    return static_cast<uint64_t>(biased);
  };
  return (enc(c.t) << 48) | (enc(c.z) << 32) | (enc(c.y) << 16) | enc(c.x);
}

inline uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Open-addressing hash map from packed coordinates to row indices.
class CoordHashMap {
 public:
  explicit CoordHashMap(size_t expected = 0) { rehash(std::max<size_t>(16, expected * 2)); }

  /// Inserts key -> row if absent; returns the row stored under key.
  int32_t insert(uint64_t key, int32_t row) {
    if ((count_ + 1) * 2 > slots_.size()) rehash(slots_.size() * 2);
    size_t idx = static_cast<size_t>(mix64(key)) & mask_;
    while (slots_[idx].used) {
      if (slots_[idx].key == key) return slots_[idx].row;
      idx = (idx + 1) & mask_;
    }
    slots_[idx] = {key, row, true};
    ++count_;
    return row;
  }

  /// Returns the row for key, or -1.
  int32_t find(uint64_t key) const {
    size_t idx = static_cast<size_t>(mix64(key)) & mask_;
    while (slots_[idx].used) {
      if (slots_[idx].key == key) return slots_[idx].row;
      idx = (idx + 1) & mask_;
    }
    return -1;
  }

  size_t size() const { return count_; }

 private:
  struct Slot {
    uint64_t key = 0;
    int32_t row = -1;
    bool used = false;
  };

  void rehash(size_t n) {
    size_t cap = 16;
    while (cap < n) cap *= 2;
    std::vector<Slot> old = std::move(slots_);
    slots_.assign(cap, Slot{});
    mask_ = cap - 1;
    count_ = 0;
    for (const Slot& s : old) {
      if (s.used) insert(s.key, s.row);
    }
  }

  std::vector<Slot> slots_;
  size_t mask_ = 0;
  size_t count_ = 0;
};

/// World extent, voxel size and the maximum number of temporal frames.
struct VoxelGridSpec {
  std::array<Scalar, 3> range_min{-20.0, -20.0, 0.0};  // x, y, z (meters)
  std::array<Scalar, 3> range_max{20.0, 20.0, 2.0};
  std::array<Scalar, 3> voxel_size{0.25, 0.25, 0.25};
  int t_len = 3;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (!(voxel_size[static_cast<size_t>(a)] > 0.0)) {
        throw std::invalid_argument("VoxelGridSpec: voxel_size must be > 0");
      }
      if (!(range_max[static_cast<size_t>(a)] > range_min[static_cast<size_t>(a)])) {
        throw std::invalid_argument("VoxelGridSpec: range_max must exceed range_min");
      }
    }
    if (t_len < 1) throw std::invalid_argument("VoxelGridSpec: t_len must be >= 1");
  }

  int64_t cells(int axis) const {
    const auto a = static_cast<size_t>(axis);
    return static_cast<int64_t>(std::floor((range_max[a] - range_min[a]) / voxel_size[a]));
  }
  int64_t nx() const { return cells(0); }
  int64_t ny() const { return cells(1); }
  int64_t nz() const { return cells(2); }
};

/// Coordinate-indexed sparse tensor: unique (t, iz, iy, ix) rows with one
/// feature vector of width C per row, plus a hash from coordinate to row.
struct SparseVoxelTensor4D {
  std::vector<Coord4> coords;
  DenseTensor features;  // (N, C)
  CoordHashMap index;

  SparseVoxelTensor4D() : index(0) {}

  int64_t rows() const { return static_cast<int64_t>(coords.size()); }
  int64_t channels() const { return features.rank() == 2 ? features.dim(1) : 0; }

  void rebuild_index() {
    index = CoordHashMap(coords.size());
    for (size_t i = 0; i < coords.size(); ++i) {
      const int32_t row = index.insert(pack_coord(coords[i]), static_cast<int32_t>(i));
      if (row != static_cast<int32_t>(i)) {
        throw std::logic_error("SparseVoxelTensor4D: duplicate coordinate");
      }
    }
  }

  /// Distinct temporal indices present, ascending.
  std::vector<int32_t> present_t() const {
    std::set<int32_t> ts;
    for (const Coord4& c : coords) ts.insert(c.t);
    return {ts.begin(), ts.end()};
  }
};

/// Debug dump: one line per row, "t iz iy ix | f0 f1 ...".
inline void dump_sparse(std::ostream& os, const SparseVoxelTensor4D& t) {
  for (int64_t i = 0; i < t.rows(); ++i) {
    const Coord4& c = t.coords[static_cast<size_t>(i)];
    os << c.t << " " << c.z << " " << c.y << " " << c.x << " |";
    for (int64_t j = 0; j < t.channels(); ++j) os << " " << t.features(i, j);
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// Voxelization

/// Points grouped per occupied voxel. Spatial quantization is
/// floor((coord - range_min) / voxel_size); the temporal index is copied
/// verbatim, so identical positions at different t land in different groups.
struct VoxelGroups {
  std::vector<Coord4> coords;
  std::vector<std::vector<Point4D>> members;
  std::vector<std::array<Scalar, 3>> centers;  // world center of each voxel
  int64_t dropped = 0;  // points outside [range_min, range_max) or with bad t
};

inline VoxelGroups voxelize(const std::vector<Point4D>& points, const VoxelGridSpec& spec) {
  spec.validate();
  VoxelGroups out;
  CoordHashMap map(points.size() / 4 + 1);
  const int64_t nx = spec.nx(), ny = spec.ny(), nz = spec.nz();
  for (const Point4D& p : points) {
    if (p.t < 1 || p.t > spec.t_len || !std::isfinite(p.x) || !std::isfinite(p.y) ||
        !std::isfinite(p.z)) {
      ++out.dropped;
      continue;
    }
    const auto ix = static_cast<int64_t>(std::floor((p.x - spec.range_min[0]) / spec.voxel_size[0]));
    const auto iy = static_cast<int64_t>(std::floor((p.y - spec.range_min[1]) / spec.voxel_size[1]));
    const auto iz = static_cast<int64_t>(std::floor((p.z - spec.range_min[2]) / spec.voxel_size[2]));
    if (ix < 0 || ix >= nx || iy < 0 || iy >= ny || iz < 0 || iz >= nz) {
      ++out.dropped;
      continue;
    }
    const Coord4 c{p.t, static_cast<int32_t>(iz), static_cast<int32_t>(iy),
                   static_cast<int32_t>(ix)};
    const auto next = static_cast<int32_t>(out.coords.size());
    const int32_t row = map.insert(pack_coord(c), next);
    if (row == next) {
      out.coords.push_back(c);
      out.members.emplace_back();
      out.centers.push_back(
          {spec.range_min[0] + (static_cast<Scalar>(ix) + 0.5) * spec.voxel_size[0],
           spec.range_min[1] + (static_cast<Scalar>(iy) + 0.5) * spec.voxel_size[1],
           spec.range_min[2] + (static_cast<Scalar>(iz) + 0.5) * spec.voxel_size[2]});
    }
    out.members[static_cast<size_t>(row)].push_back(p);
  }

  // Canonical ordering of groups and of points within each group, so that
  // everything downstream is bit-exact invariant to input point order.
  std::vector<size_t> perm(out.coords.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::sort(perm.begin(), perm.end(),
            [&out](size_t a, size_t b) { return out.coords[a] < out.coords[b]; });
  VoxelGroups sorted;
  sorted.dropped = out.dropped;
  sorted.coords.reserve(out.coords.size());
  sorted.members.reserve(out.members.size());
  sorted.centers.reserve(out.centers.size());
  auto point_less = [](const Point4D& a, const Point4D& b) {
    return std::tie(a.x, a.y, a.z, a.r, a.t) < std::tie(b.x, b.y, b.z, b.r, b.t);
  };
  for (size_t i : perm) {
    sorted.coords.push_back(out.coords[i]);
    sorted.centers.push_back(out.centers[i]);
    std::sort(out.members[i].begin(), out.members[i].end(), point_less);
    sorted.members.push_back(std::move(out.members[i]));
  }
  return sorted;
}

/// Per-t convenience overload; frames[k] holds the points of t = k+1 and the
/// temporal index is stamped accordingly.
inline VoxelGroups voxelize(const std::vector<std::vector<Point4D>>& frames,
                            const VoxelGridSpec& spec) {
  std::vector<Point4D> flat;
  size_t total = 0;
  for (const auto& f : frames) total += f.size();
  flat.reserve(total);
  for (size_t k = 0; k < frames.size(); ++k) {
    for (Point4D p : frames[k]) {
      p.t = static_cast<int>(k) + 1;
      flat.push_back(p);
    }
  }
  return voxelize(flat, spec);
}

// ---------------------------------------------------------------------------
// Voxel feature encoding

/// Single simplified VFE layer: per point the raw feature is
/// (x, y, z, r, offsets from the group centroid), mapped through a shared
/// linear layer and ReLU, then max-pooled over the group. The positional part
/// is expressed in the voxel's local frame so that shifting the scene by a
/// whole number of voxels shifts the features without changing them.
/// Max-pooling makes the result invariant to point order within a voxel.
class Vfe {
 public:
  static constexpr int64_t kPointFeatures = 7;

  struct Cache {
    Linear::Cache linear;
    ReluCache relu;
    std::vector<std::vector<int64_t>> group_rows;  // point-matrix rows per voxel
    std::vector<int64_t> argmax;                   // (voxel * C + c) -> point row
    int64_t channels = 0;
  };

  Vfe() = default;
  Vfe(ParamStore& ps, const std::string& prefix, int64_t out_channels, std::mt19937_64& rng)
      : lin_(ps, prefix + ".lin", kPointFeatures, out_channels, rng) {}

  int64_t out_channels() const { return lin_.out_features(); }

  SparseVoxelTensor4D forward(const VoxelGroups& groups, Cache* cache = nullptr) const {
    const int64_t c_out = lin_.out_features();
    int64_t total_points = 0;
    for (const auto& g : groups.members) {
      if (g.empty()) throw std::invalid_argument("Vfe: empty voxel group");
      total_points += static_cast<int64_t>(g.size());
    }
    DenseTensor pts({total_points, kPointFeatures});
    std::vector<std::vector<int64_t>> group_rows(groups.members.size());
    int64_t row = 0;
    for (size_t g = 0; g < groups.members.size(); ++g) {
      const auto& mem = groups.members[g];
      Scalar cx = 0, cy = 0, cz = 0;
      for (const Point4D& p : mem) {
        cx += p.x;
        cy += p.y;
        cz += p.z;
      }
      const auto inv = 1.0 / static_cast<Scalar>(mem.size());
      cx *= inv;
      cy *= inv;
      cz *= inv;
      const std::array<Scalar, 3>& vox = groups.centers[g];
      for (const Point4D& p : mem) {
        pts(row, 0) = p.x - vox[0];
        pts(row, 1) = p.y - vox[1];
        pts(row, 2) = p.z - vox[2];
        pts(row, 3) = p.r;
        pts(row, 4) = p.x - cx;
        pts(row, 5) = p.y - cy;
        pts(row, 6) = p.z - cz;
        group_rows[g].push_back(row);
        ++row;
      }
    }

    DenseTensor act = lin_.forward(pts, cache ? &cache->linear : nullptr);
    act = relu(act, cache ? &cache->relu : nullptr);

    SparseVoxelTensor4D out;
    out.coords = groups.coords;
    out.features = DenseTensor({static_cast<int64_t>(groups.coords.size()), c_out});
    std::vector<int64_t> argmax(groups.coords.size() * static_cast<size_t>(c_out), -1);
    for (size_t g = 0; g < group_rows.size(); ++g) {
      for (int64_t c = 0; c < c_out; ++c) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        int64_t best_row = -1;
        for (int64_t r : group_rows[g]) {
          if (act(r, c) > best) {  // strict: first max wins
            best = act(r, c);
            best_row = r;
          }
        }
        out.features(static_cast<int64_t>(g), c) = best;
        argmax[g * static_cast<size_t>(c_out) + static_cast<size_t>(c)] = best_row;
      }
    }
    out.rebuild_index();
    if (cache) {
      cache->group_rows = std::move(group_rows);
      cache->argmax = std::move(argmax);
      cache->channels = c_out;
    }
    return out;
  }

  void backward(const Cache& cache, const DenseTensor& d_features) const {
    const int64_t c_out = cache.channels;
    const int64_t total_points = cache.linear.x.dim(0);
    DenseTensor d_act({total_points, c_out});
    for (int64_t g = 0; g < d_features.dim(0); ++g) {
      for (int64_t c = 0; c < c_out; ++c) {
        const int64_t r = cache.argmax[static_cast<size_t>(g * c_out + c)];
        d_act(r, c) += d_features(g, c);
      }
    }
    const DenseTensor d_pre = relu_backward(cache.relu, d_act);
    lin_.backward(cache.linear, d_pre);  // input has no parameters upstream
  }

 private:
  Linear lin_;
};

// ---------------------------------------------------------------------------
// Kernel maps

enum class ConvMode {
  kSubmanifold,  // output sites == input sites
  kGenerative,   // output sites = strided lattice reachable from any input
};

struct KernelSize {
  int kt = 3, kz = 3, ky = 3, kx = 3;
  int64_t volume() const { return int64_t{1} * kt * kz * ky * kx; }
};

struct ConvStride {
  int t = 1, z = 1, y = 1, x = 1;
};

/// Gather/scatter plan of one sparse convolution: per kernel offset, the
/// (input_row, output_row) pairs, plus the output coordinate list. The offset
/// at flattened index ((dt*kz + dz)*ky + dy)*kx + dx is
/// (dt + lo_t, dz + lo_z, ...) with lo = -((k-1)/2) per axis; weight layouts
/// follow the same enumeration.
struct KernelMap {
  KernelSize kernel;
  std::vector<Coord4> offsets;
  std::vector<std::vector<std::pair<int32_t, int32_t>>> pairs;  // per offset
  std::vector<Coord4> out_coords;

  int64_t num_offsets() const { return static_cast<int64_t>(offsets.size()); }
};

inline KernelMap build_kernel_map(const SparseVoxelTensor4D& input, const KernelSize& kernel,
                                  const ConvStride& stride, ConvMode mode) {
  if (stride.t != 1) {
    throw std::invalid_argument("temporal stride forbidden: stride.t must be 1");
  }
  if (stride.z < 1 || stride.y < 1 || stride.x < 1) {
    throw std::invalid_argument("build_kernel_map: spatial strides must be >= 1");
  }
  if (kernel.kt < 1 || kernel.kz < 1 || kernel.ky < 1 || kernel.kx < 1) {
    throw std::invalid_argument("build_kernel_map: kernel sizes must be >= 1");
  }
  if (mode == ConvMode::kSubmanifold) {
    if (kernel.kt % 2 == 0 || kernel.kz % 2 == 0 || kernel.ky % 2 == 0 || kernel.kx % 2 == 0) {
      throw std::invalid_argument("build_kernel_map: submanifold kernels must be odd");
    }
    if (stride.z != 1 || stride.y != 1 || stride.x != 1) {
      throw std::invalid_argument("build_kernel_map: submanifold stride must be 1");
    }
  }

  KernelMap map;
  map.kernel = kernel;
  const int lo_t = -((kernel.kt - 1) / 2);
  const int lo_z = -((kernel.kz - 1) / 2);
  const int lo_y = -((kernel.ky - 1) / 2);
  const int lo_x = -((kernel.kx - 1) / 2);
  for (int dt = 0; dt < kernel.kt; ++dt) {
    for (int dz = 0; dz < kernel.kz; ++dz) {
      for (int dy = 0; dy < kernel.ky; ++dy) {
        for (int dx = 0; dx < kernel.kx; ++dx) {
          map.offsets.push_back(Coord4{dt + lo_t, dz + lo_z, dy + lo_y, dx + lo_x});
        }
      }
    }
  }
  map.pairs.assign(map.offsets.size(), {});

  CoordHashMap out_index(input.coords.size());
  if (mode == ConvMode::kSubmanifold) {
    map.out_coords = input.coords;
  } else {
    // The temporal extent never grows: output t values are restricted to the
    // set of t present in the input.
    std::set<int32_t> allowed_t;
    for (const Coord4& c : input.coords) allowed_t.insert(c.t);
    auto divisible = [](int32_t v, int s) { return ((v % s) + s) % s == 0; };
    for (const Coord4& c : input.coords) {
      for (const Coord4& off : map.offsets) {
        const int32_t mt = c.t - off.t;
        const int32_t mz = c.z - off.z;
        const int32_t my = c.y - off.y;
        const int32_t mx = c.x - off.x;
        if (!allowed_t.count(mt)) continue;
        if (!divisible(mz, stride.z) || !divisible(my, stride.y) || !divisible(mx, stride.x)) {
          continue;
        }
        const Coord4 o{mt, mz / stride.z, my / stride.y, mx / stride.x};
        const auto next = static_cast<int32_t>(map.out_coords.size());
        if (out_index.insert(pack_coord(o), next) == next) map.out_coords.push_back(o);
      }
    }
  }

  // Gather pass: for output o and offset d, the contributing input sits at
  // (o.t + d.t, o.z*sz + d.z, o.y*sy + d.y, o.x*sx + d.x).
  for (size_t oi = 0; oi < map.out_coords.size(); ++oi) {
    const Coord4& o = map.out_coords[oi];
    for (size_t k = 0; k < map.offsets.size(); ++k) {
      const Coord4& d = map.offsets[k];
      const Coord4 in{o.t + d.t, o.z * stride.z + d.z, o.y * stride.y + d.y,
                      o.x * stride.x + d.x};
      const int32_t row = input.index.find(pack_coord(in));
      if (row >= 0) map.pairs[k].emplace_back(row, static_cast<int32_t>(oi));
    }
  }
  return map;
}

// ---------------------------------------------------------------------------
// Sparse convolution

/// 4D sparse convolution over a prebuilt kernel map. Weight shape is
/// (num_offsets, C_in, C_out); every output row receives the bias.
class SparseConv4d {
 public:
  struct Cache {
    DenseTensor in_features;
    const KernelMap* map = nullptr;
  };

  SparseConv4d() = default;
  SparseConv4d(ParamStore& ps, std::string name, int64_t cin, int64_t cout,
               const KernelSize& kernel, std::mt19937_64& rng)
      : ps_(&ps),
        wname_(name + ".w"),
        bname_(name + ".b"),
        cin_(cin),
        cout_(cout),
        kernel_(kernel) {
    Param& w = ps.create(wname_, {kernel.volume(), cin, cout});
    init_kaiming(w.value, rng, cin * kernel.volume());
    ps.create(bname_, {cout});
  }

  int64_t in_channels() const { return cin_; }
  int64_t out_channels() const { return cout_; }
  const KernelSize& kernel() const { return kernel_; }
  const std::string& weight_name() const { return wname_; }
  const std::string& bias_name() const { return bname_; }

  SparseVoxelTensor4D forward(const SparseVoxelTensor4D& input, const KernelMap& map,
                              Cache* cache = nullptr) const {
    if (input.channels() != cin_) {
      throw std::invalid_argument("SparseConv4d: channel mismatch");
    }
    if (map.num_offsets() != kernel_.volume()) {
      throw std::invalid_argument("SparseConv4d: kernel map offset count mismatch");
    }
    const DenseTensor& w = ps_->at(wname_).value;
    const DenseTensor& b = ps_->at(bname_).value;
    SparseVoxelTensor4D out;
    out.coords = map.out_coords;
    const auto n_out = static_cast<int64_t>(map.out_coords.size());
    out.features = DenseTensor({n_out, cout_});
    for (int64_t o = 0; o < n_out; ++o) {
      for (int64_t c = 0; c < cout_; ++c) out.features(o, c) = b[c];
    }
    // Accumulation ordered by offset index, then pair order: deterministic.
    for (int64_t k = 0; k < map.num_offsets(); ++k) {
      for (const auto& [i, o] : map.pairs[static_cast<size_t>(k)]) {
        if (i < 0 || i >= input.rows() || o < 0 || o >= n_out) {
          throw std::logic_error("SparseConv4d: dangling kernel-map row");
        }
        for (int64_t ci = 0; ci < cin_; ++ci) {
          const Scalar xv = input.features(i, ci);
          if (xv == 0.0) continue;
          for (int64_t co = 0; co < cout_; ++co) {
            out.features(o, co) += w(k, ci, co) * xv;
          }
        }
      }
    }
    out.rebuild_index();
    if (cache) {
      cache->in_features = input.features;
      cache->map = &map;
    }
    return out;
  }

  /// Returns the gradient w.r.t. input features; accumulates weight/bias grads.
  DenseTensor backward(const Cache& cache, const DenseTensor& d_out) const {
    const KernelMap& map = *cache.map;
    Param& w = ps_->at(wname_);
    Param& b = ps_->at(bname_);
    DenseTensor d_in({cache.in_features.dim(0), cin_});
    for (int64_t o = 0; o < d_out.dim(0); ++o) {
      for (int64_t co = 0; co < cout_; ++co) b.grad[co] += d_out(o, co);
    }
    for (int64_t k = 0; k < map.num_offsets(); ++k) {
      for (const auto& [i, o] : map.pairs[static_cast<size_t>(k)]) {
        for (int64_t ci = 0; ci < cin_; ++ci) {
          const Scalar xv = cache.in_features(i, ci);
          Scalar acc = 0.0;
          for (int64_t co = 0; co < cout_; ++co) {
            const Scalar g = d_out(o, co);
            w.grad(k, ci, co) += g * xv;
            acc += g * w.value(k, ci, co);
          }
          d_in(i, ci) += acc;
        }
      }
    }
    return d_in;
  }

 private:
  ParamStore* ps_ = nullptr;
  std::string wname_, bname_;
  int64_t cin_ = 0, cout_ = 0;
  KernelSize kernel_;
};

}  // namespace stmot
