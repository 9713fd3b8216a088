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

/// Minimal differentiable-operation kernel: parameter storage, linear /
/// convolution / activation layers with explicit backward passes, binary
/// focal loss, a decoupled-weight-decay Adam step, and a central-difference
/// gradient checker. There is no general autodiff; every layer caches what
/// its own backward needs and callers chain the passes by hand.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stmot/tensor.hpp"

namespace stmot {

/// One learnable tensor plus its gradient accumulator and Adam moments.
struct Param {
  DenseTensor value;
  DenseTensor grad;
  DenseTensor m;  // first moment
  DenseTensor v;  // second moment
};

/// Named parameter set. Iteration is always in lexicographic name order so
/// optimizer updates are reproducible.
class ParamStore {
 public:
  Param& create(const std::string& name, std::vector<int64_t> shape) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate param " + name);
    Param p;
    p.value = DenseTensor(shape);
    p.grad = DenseTensor(shape);
    p.m = DenseTensor(shape);
    p.v = DenseTensor(std::move(shape));
    auto [it, ok] = params_.emplace(name, std::move(p));
    (void)ok;
    return it->second;
  }

  Param& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown param " + name);
    return it->second;
  }
  const Param& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown param " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  size_t size() const { return params_.size(); }

  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }

  void zero_grads() {
    for (auto& [name, p] : params_) p.grad.fill(0.0);
  }

  void scale_grads(Scalar factor) {
    for (auto& [name, p] : params_) {
      for (auto& g : p.grad.data) g *= factor;
    }
  }

  int64_t total_values() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.value.numel();
    return n;
  }

  template <class F>
  void for_each(F&& f) {
    for (auto& [name, p] : params_) f(name, p);
  }
  template <class F>
  void for_each(F&& f) const {
    for (const auto& [name, p] : params_) f(name, p);
  }

 private:
  std::map<std::string, Param> params_;
  int64_t step_ = 0;

  friend struct AdamW;
};

inline void init_normal(DenseTensor& t, std::mt19937_64& rng, Scalar stddev) {
  std::normal_distribution<Scalar> dist(0.0, stddev);
  for (auto& v : t.data) v = dist(rng);
}

/// He initialization for a layer with the given fan-in.
inline void init_kaiming(DenseTensor& t, std::mt19937_64& rng, int64_t fan_in) {
  init_normal(t, rng, std::sqrt(2.0 / static_cast<Scalar>(fan_in)));
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamW {
  Scalar lr = 1e-3;
  Scalar weight_decay = 1e-2;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;

  /// One decoupled-weight-decay Adam step over every parameter in the store.
  /// Gradients are cleared afterwards and the step counter advances.
  void step(ParamStore& ps) const {
    ps.step_ += 1;
    const Scalar t = static_cast<Scalar>(ps.step_);
    const Scalar bc1 = 1.0 - std::pow(beta1, t);
    const Scalar bc2 = 1.0 - std::pow(beta2, t);
    for (auto& [name, p] : ps.params_) {
      for (int64_t i = 0; i < p.value.numel(); ++i) {
        const Scalar g = p.grad[i];
        p.value[i] -= lr * weight_decay * p.value[i];  // decoupled decay
        p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
        p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
        const Scalar mhat = p.m[i] / bc1;
        const Scalar vhat = p.v[i] / bc2;
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
      p.grad.fill(0.0);
    }
  }
};

inline void adamw_step(ParamStore& ps, Scalar lr, Scalar weight_decay) {
  AdamW opt;
  opt.lr = lr;
  opt.weight_decay = weight_decay;
  opt.step(ps);
}

// ---------------------------------------------------------------------------
// Layers

/// y = x W^T + b with x of shape (batch, in) and W of shape (out, in).
class Linear {
 public:
  struct Cache {
    DenseTensor x;
  };

  Linear() = default;
  Linear(ParamStore& ps, std::string name, int64_t in, int64_t out, std::mt19937_64& rng)
      : ps_(&ps), wname_(name + ".w"), bname_(name + ".b"), in_(in), out_(out) {
    Param& w = ps.create(wname_, {out, in});
    init_kaiming(w.value, rng, in);
    ps.create(bname_, {out});
  }

  int64_t in_features() const { return in_; }
  int64_t out_features() const { return out_; }
  const std::string& weight_name() const { return wname_; }
  const std::string& bias_name() const { return bname_; }

  DenseTensor forward(const DenseTensor& x, Cache* cache = nullptr) const {
    if (x.rank() != 2 || x.dim(1) != in_) {
      throw std::invalid_argument("Linear: input shape " + x.shape_str() + " does not match in=" +
                                  std::to_string(in_));
    }
    const DenseTensor& w = ps_->at(wname_).value;
    const DenseTensor& b = ps_->at(bname_).value;
    const int64_t batch = x.dim(0);
    DenseTensor y({batch, out_});
    for (int64_t n = 0; n < batch; ++n) {
      for (int64_t o = 0; o < out_; ++o) {
        Scalar acc = b[o];
        for (int64_t i = 0; i < in_; ++i) acc += w(o, i) * x(n, i);
        y(n, o) = acc;
      }
    }
    if (cache) cache->x = x;
    return y;
  }

  DenseTensor backward(const Cache& cache, const DenseTensor& dy) const {
    const DenseTensor& x = cache.x;
    const int64_t batch = x.dim(0);
    Param& w = ps_->at(wname_);
    Param& b = ps_->at(bname_);
    DenseTensor dx({batch, in_});
    for (int64_t n = 0; n < batch; ++n) {
      for (int64_t o = 0; o < out_; ++o) {
        const Scalar g = dy(n, o);
        b.grad[o] += g;
        for (int64_t i = 0; i < in_; ++i) {
          w.grad(o, i) += g * x(n, i);
          dx(n, i) += g * w.value(o, i);
        }
      }
    }
    return dx;
  }

 private:
  ParamStore* ps_ = nullptr;
  std::string wname_, bname_;
  int64_t in_ = 0, out_ = 0;
};

struct ReluCache {
  std::vector<uint8_t> mask;
};

inline DenseTensor relu(const DenseTensor& x, ReluCache* cache = nullptr) {
  DenseTensor y = x;
  if (cache) cache->mask.assign(static_cast<size_t>(x.numel()), 0);
  for (int64_t i = 0; i < y.numel(); ++i) {
    if (y[i] > 0.0) {
      if (cache) cache->mask[static_cast<size_t>(i)] = 1;
    } else {
      y[i] = 0.0;
    }
  }
  return y;
}

inline DenseTensor relu_backward(const ReluCache& cache, const DenseTensor& dy) {
  DenseTensor dx = dy;
  for (int64_t i = 0; i < dx.numel(); ++i) {
    if (!cache.mask[static_cast<size_t>(i)]) dx[i] = 0.0;
  }
  return dx;
}

/// Plain fully connected stack with ReLU between layers and no activation
/// after the last one; the output is a logit, not a probability.
class Mlp {
 public:
  struct Cache {
    std::vector<Linear::Cache> linear;
    std::vector<ReluCache> relu;
  };

  Mlp() = default;
  /// widths = {in, hidden..., out}
  Mlp(ParamStore& ps, const std::string& prefix, const std::vector<int64_t>& widths,
      std::mt19937_64& rng) {
    if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least in and out widths");
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
      layers_.emplace_back(ps, prefix + ".fc" + std::to_string(i), widths[i], widths[i + 1], rng);
    }
  }

  int64_t in_features() const { return layers_.front().in_features(); }
  int64_t out_features() const { return layers_.back().out_features(); }
  size_t depth() const { return layers_.size(); }

  DenseTensor forward(const DenseTensor& x, Cache* cache = nullptr) const {
    if (cache) {
      cache->linear.assign(layers_.size(), {});
      cache->relu.assign(layers_.size() - 1, {});
    }
    DenseTensor h = x;
    for (size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h, cache ? &cache->linear[i] : nullptr);
      if (i + 1 < layers_.size()) h = relu(h, cache ? &cache->relu[i] : nullptr);
    }
    return h;
  }

  DenseTensor backward(const Cache& cache, const DenseTensor& dy) const {
    DenseTensor g = dy;
    for (size_t i = layers_.size(); i-- > 0;) {
      if (i + 1 < layers_.size()) g = relu_backward(cache.relu[i], g);
      g = layers_[i].backward(cache.linear[i], g);
    }
    return g;
  }

 private:
  std::vector<Linear> layers_;
};

/// mlp_forward: convenience over Mlp::forward for callers that do not train.
inline DenseTensor mlp_forward(const DenseTensor& x, const Mlp& layers) {
  return layers.forward(x);
}

/// Dense 2D convolution, stride 1, odd kernel, zero padding ("same" shape).
/// x: (C_in, H, W) -> (C_out, H, W). Weight shape (C_out, C_in, k, k).
class Conv2d {
 public:
  struct Cache {
    DenseTensor x;
  };

  Conv2d() = default;
  Conv2d(ParamStore& ps, std::string name, int64_t cin, int64_t cout, int64_t k,
         std::mt19937_64& rng)
      : ps_(&ps), wname_(name + ".w"), bname_(name + ".b"), cin_(cin), cout_(cout), k_(k) {
    if (k % 2 == 0) throw std::invalid_argument("Conv2d: kernel size must be odd");
    Param& w = ps.create(wname_, {cout, cin, k, k});
    init_kaiming(w.value, rng, cin * k * k);
    ps.create(bname_, {cout});
  }

  int64_t in_channels() const { return cin_; }
  int64_t out_channels() const { return cout_; }
  int64_t kernel() const { return k_; }
  const std::string& weight_name() const { return wname_; }
  const std::string& bias_name() const { return bname_; }

  /// Makes this layer the identity map (requires cin == cout).
  void init_identity() {
    if (cin_ != cout_) throw std::invalid_argument("Conv2d: identity needs cin == cout");
    Param& w = ps_->at(wname_);
    w.value.fill(0.0);
    const int64_t c = k_ / 2;
    for (int64_t ch = 0; ch < cout_; ++ch) w.value(ch, ch, c, c) = 1.0;
    ps_->at(bname_).value.fill(0.0);
  }

  DenseTensor forward(const DenseTensor& x, Cache* cache = nullptr) const {
    if (x.rank() != 3 || x.dim(0) != cin_) {
      throw std::invalid_argument("Conv2d: input shape " + x.shape_str());
    }
    const int64_t h = x.dim(1), w = x.dim(2), r = k_ / 2;
    const DenseTensor& wt = ps_->at(wname_).value;
    const DenseTensor& b = ps_->at(bname_).value;
    DenseTensor y({cout_, h, w});
    for (int64_t co = 0; co < cout_; ++co) {
      for (int64_t iy = 0; iy < h; ++iy) {
        for (int64_t ix = 0; ix < w; ++ix) {
          Scalar acc = b[co];
          for (int64_t ci = 0; ci < cin_; ++ci) {
            for (int64_t ky = 0; ky < k_; ++ky) {
              const int64_t sy = iy + ky - r;
              if (sy < 0 || sy >= h) continue;
              for (int64_t kx = 0; kx < k_; ++kx) {
                const int64_t sx = ix + kx - r;
                if (sx < 0 || sx >= w) continue;
                acc += wt(co, ci, ky, kx) * x(ci, sy, sx);
              }
            }
          }
          y(co, iy, ix) = acc;
        }
      }
    }
    if (cache) cache->x = x;
    return y;
  }

  DenseTensor backward(const Cache& cache, const DenseTensor& dy) const {
    const DenseTensor& x = cache.x;
    const int64_t h = x.dim(1), w = x.dim(2), r = k_ / 2;
    Param& wt = ps_->at(wname_);
    Param& b = ps_->at(bname_);
    DenseTensor dx({cin_, h, w});
    for (int64_t co = 0; co < cout_; ++co) {
      for (int64_t iy = 0; iy < h; ++iy) {
        for (int64_t ix = 0; ix < w; ++ix) {
          const Scalar g = dy(co, iy, ix);
          if (g == 0.0) continue;
          b.grad[co] += g;
          for (int64_t ci = 0; ci < cin_; ++ci) {
            for (int64_t ky = 0; ky < k_; ++ky) {
              const int64_t sy = iy + ky - r;
              if (sy < 0 || sy >= h) continue;
              for (int64_t kx = 0; kx < k_; ++kx) {
                const int64_t sx = ix + kx - r;
                if (sx < 0 || sx >= w) continue;
                wt.grad(co, ci, ky, kx) += g * x(ci, sy, sx);
                dx(ci, sy, sx) += g * wt.value(co, ci, ky, kx);
              }
            }
          }
        }
      }
    }
    return dx;
  }

 private:
  ParamStore* ps_ = nullptr;
  std::string wname_, bname_;
  int64_t cin_ = 0, cout_ = 0, k_ = 0;
};

// ---------------------------------------------------------------------------
// Losses

inline Scalar sigmoid(Scalar x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Positive-class weight and focusing exponent for the binary focal loss.
/// alpha is a per-class weight (the post-filter positive-to-negative ratio),
/// not the box yaw.
struct FocalLossConfig {
  Scalar alpha = 1.0;
  Scalar gamma = 2.0;

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("FocalLossConfig: alpha must be > 0");
    if (!(gamma >= 0.0)) throw std::invalid_argument("FocalLossConfig: gamma must be >= 0");
  }
};

/// Probability clamp applied before any log() in the losses.
inline constexpr Scalar kProbEps = 1e-7;

struct FocalLossResult {
  Scalar loss;
  Scalar dloss_dlogit;
};

/// Binary focal loss of a single logit with the sigmoid folded in:
///   positive:  alpha * (1-p)^gamma * (-log p)
///   negative:  p^gamma * (-log(1-p))
/// where p = sigmoid(logit) clamped to [kProbEps, 1-kProbEps]. The returned
/// gradient is exact for the clamped composition.
inline FocalLossResult binary_focal_loss(Scalar logit, bool is_positive,
                                         const FocalLossConfig& cfg) {
  if (!std::isfinite(logit)) throw std::invalid_argument("binary_focal_loss: non-finite logit");
  const Scalar raw = sigmoid(logit);
  const Scalar p = std::min(1.0 - kProbEps, std::max(kProbEps, raw));
  const bool clamped = (raw != p);
  Scalar loss, dldp;
  if (is_positive) {
    const Scalar q = 1.0 - p;
    loss = -cfg.alpha * std::pow(q, cfg.gamma) * std::log(p);
    dldp = cfg.alpha * (cfg.gamma * std::pow(q, cfg.gamma - 1.0) * std::log(p) -
                        std::pow(q, cfg.gamma) / p);
  } else {
    loss = -std::pow(p, cfg.gamma) * std::log(1.0 - p);
    dldp = -cfg.gamma * std::pow(p, cfg.gamma - 1.0) * std::log(1.0 - p) +
           std::pow(p, cfg.gamma) / (1.0 - p);
  }
  // d(clamp(sigmoid))/dlogit is zero while the clamp is active.
  const Scalar dpdl = clamped ? 0.0 : raw * (1.0 - raw);
  return {loss, dldp * dpdl};
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Max relative error between an analytic gradient and central differences of
/// a scalar function, |analytic - numeric| / max(1e-8, |numeric|), maximized
/// over all coordinates. `skip` excludes coordinates where the op is not
/// differentiable (e.g. ReLU exactly at zero). Throws if the forward value is
/// non-finite at any perturbed point.
inline Scalar grad_check(const std::function<Scalar(const DenseTensor&)>& f,
                         const DenseTensor& point, const DenseTensor& analytic, Scalar eps,
                         const std::function<bool(int64_t)>& skip = nullptr) {
  if (!point.same_shape(analytic)) throw std::invalid_argument("grad_check: shape mismatch");
  DenseTensor x = point;
  Scalar max_rel = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    if (skip && skip(i)) continue;
    const Scalar orig = x[i];
    x[i] = orig + eps;
    const Scalar fp = f(x);
    x[i] = orig - eps;
    const Scalar fm = f(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("grad_check: non-finite forward at perturbed point");
    }
    const Scalar numeric = (fp - fm) / (2.0 * eps);
    const Scalar rel = std::abs(analytic[i] - numeric) / std::max<Scalar>(1e-8, std::abs(numeric));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace stmot
