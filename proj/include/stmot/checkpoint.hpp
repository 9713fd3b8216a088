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

/// Parameter checkpoint file: versioned magic string, optimizer step count,
/// an embedded model-config text blob, then named tensors with a shape header
/// and raw little-endian float64 values. Adam moments are stored as extra
/// tensors suffixed "#m" / "#v" so the file stays a flat list of named
/// tensors.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "stmot/nn.hpp"
#include "stmot/tensor.hpp"

namespace stmot {

inline constexpr char kCheckpointMagic[] = "STMOTCKPT";
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u64(std::ostream& os, uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, 8);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& os, double d) { write_u64(os, std::bit_cast<uint64_t>(d)); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, uint64_t max_len = (1ull << 32)) {
  const uint64_t n = read_u64(is);
  if (n > max_len) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

inline void write_tensor(std::ostream& os, const std::string& name, const DenseTensor& t) {
  write_string(os, name);
  write_u64(os, t.shape.size());
  for (int64_t d : t.shape) write_u64(os, static_cast<uint64_t>(d));
  for (Scalar v : t.data) write_f64(os, v);
}

inline std::pair<std::string, DenseTensor> read_tensor(std::istream& is) {
  std::string name = read_string(is, 1 << 16);
  const uint64_t ndim = read_u64(is);
  if (ndim > 8) throw std::runtime_error("checkpoint: implausible tensor rank");
  std::vector<int64_t> shape(ndim);
  for (auto& d : shape) d = static_cast<int64_t>(read_u64(is));
  DenseTensor t(shape);
  for (auto& v : t.data) v = read_f64(is);
  return {std::move(name), std::move(t)};
}

}  // namespace detail

/// Writes parameters, Adam state, the step counter and a config blob.
inline void save_checkpoint(const std::string& path, const ParamStore& ps,
                            const std::string& config_text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  detail::write_u64(os, kCheckpointVersion);
  detail::write_u64(os, static_cast<uint64_t>(ps.step()));
  detail::write_string(os, config_text);
  detail::write_u64(os, ps.size() * 3);
  ps.for_each([&os](const std::string& name, const Param& p) {
    detail::write_tensor(os, name, p.value);
    detail::write_tensor(os, name + "#m", p.m);
    detail::write_tensor(os, name + "#v", p.v);
  });
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

/// Loads a checkpoint into an existing store; every stored tensor must match
/// a created parameter of the same shape. Returns the embedded config text.
inline std::string load_checkpoint(const std::string& path, ParamStore& ps) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[sizeof(kCheckpointMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const uint64_t version = detail::read_u64(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const uint64_t step = detail::read_u64(is);
  std::string config = detail::read_string(is);
  const uint64_t count = detail::read_u64(is);
  for (uint64_t i = 0; i < count; ++i) {
    auto [name, t] = detail::read_tensor(is);
    std::string base = name;
    DenseTensor Param::* slot = &Param::value;
    if (base.size() > 2 && base.substr(base.size() - 2) == "#m") {
      base = base.substr(0, base.size() - 2);
      slot = &Param::m;
    } else if (base.size() > 2 && base.substr(base.size() - 2) == "#v") {
      base = base.substr(0, base.size() - 2);
      slot = &Param::v;
    }
    Param& p = ps.at(base);
    if (!(p.*slot).same_shape(t)) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": stored " +
                               t.shape_str() + " vs expected " + (p.*slot).shape_str());
    }
    (p.*slot) = std::move(t);
  }
  ps.set_step(static_cast<int64_t>(step));
  return config;
}

/// Reads only the embedded config text (to build the model before loading).
inline std::string peek_checkpoint_config(const std::string& path, int64_t* step_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[sizeof(kCheckpointMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const uint64_t version = detail::read_u64(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const uint64_t step = detail::read_u64(is);
  if (step_out) *step_out = static_cast<int64_t>(step);
  return detail::read_string(is);
}

}  // namespace stmot
