#pragma once

// Named parameter storage, tape binding, common layers and the optimiser.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "imd/ad/ops.hpp"
#include "imd/ad/tape.hpp"

namespace imd::ad {

/// Parameter tensors keyed by dotted name; iteration order is lexicographic.
template <class T>
using ParamSet = std::map<std::string, Tensor<T>>;

template <class U, class T>
ParamSet<U> cast_params(const ParamSet<T>& p) {
  ParamSet<U> out;
  for (const auto& [k, v] : p) out.emplace(k, v.template cast<U>());
  return out;
}

/// Seeded initialiser that writes freshly drawn tensors into a ParamSet.
template <class T>
class Initializer {
 public:
  Initializer(ParamSet<T>& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  void normal(const std::string& name, Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data) v = static_cast<T>(dist(rng_));
    params_[name] = std::move(t);
  }
  void constant(const std::string& name, Shape shape, double value) {
    params_[name] = Tensor<T>(std::move(shape), static_cast<T>(value));
  }

  /// Conv kernel [co, ci, k, k] with fan-in scaled normal weights and zero bias.
  void conv(const std::string& name, int co, int ci, int k, double gain = 1.0, bool bias = true) {
    normal(name + ".w", {co, ci, k, k}, gain / std::sqrt(static_cast<double>(ci * k * k)));
    if (bias) constant(name + ".b", {co}, 0.0);
  }
  /// Dense layer W[out, in] applied to column vectors.
  void linear(const std::string& name, int out, int in, double gain = 1.0, bool bias = true) {
    normal(name + ".w", {out, in}, gain / std::sqrt(static_cast<double>(in)));
    if (bias) constant(name + ".b", {out}, 0.0);
  }
  void norm(const std::string& name, int channels) {
    constant(name + ".g", {channels}, 1.0);
    constant(name + ".b", {channels}, 0.0);
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  ParamSet<T>& params_;
  std::mt19937_64 rng_;
};

/// Exposes a ParamSet on a Tape. Parameters become gradient-carrying leaves when
/// trainable and are not frozen; gradients are read back after Tape::backward.
template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParamSet<T>& params, bool trainable = false,
         std::vector<std::string> frozen_prefixes = {})
      : tape_(tape), params_(params), trainable_(trainable), frozen_(std::move(frozen_prefixes)) {}

  Var<T> operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto p = params_.find(name);
    if (p == params_.end()) throw Error("missing parameter '" + name + "'");
    Var<T> v = (trainable_ && !is_frozen(name)) ? tape_.variable(p->second) : tape_.constant(p->second);
    bound_.emplace(name, v);
    return v;
  }
  bool has(const std::string& name) const { return params_.count(name) > 0; }

  /// Gradients of every trainable parameter touched so far (zeros when unreached).
  ParamSet<T> gradients() const {
    ParamSet<T> out;
    for (const auto& [name, v] : bound_) {
      if (!v.requires_grad()) continue;
      const auto& g = v.grad();
      out.emplace(name, g.empty() ? Tensor<T>(v.shape()) : g);
    }
    return out;
  }

  Tape<T>& tape() { return tape_; }

 private:
  bool is_frozen(const std::string& name) const {
    for (const auto& f : frozen_)
      if (name.rfind(f, 0) == 0) return true;
    return false;
  }

  Tape<T>& tape_;
  const ParamSet<T>& params_;
  bool trainable_;
  std::vector<std::string> frozen_;
  std::map<std::string, Var<T>> bound_;
};

// ---------------------------------------------------------------- layers

template <class T>
Var<T> conv(Binder<T>& p, const std::string& name, Var<T> x, int stride, int pad) {
  Var<T> bias = p.has(name + ".b") ? p(name + ".b") : Var<T>{};
  return conv2d(x, p(name + ".w"), bias, stride, pad);
}

/// Dense layer on the columns of x[in, N].
template <class T>
Var<T> linear(Binder<T>& p, const std::string& name, Var<T> x) {
  Var<T> y = matmul(p(name + ".w"), x);
  return p.has(name + ".b") ? add_row_bias(y, p(name + ".b")) : y;
}

template <class T>
Var<T> gnorm(Binder<T>& p, const std::string& name, Var<T> x, int groups) {
  return group_norm(x, p(name + ".g"), p(name + ".b"), groups);
}

template <class T>
Var<T> lnorm(Binder<T>& p, const std::string& name, Var<T> x) {
  return layer_norm_columns(x, p(name + ".g"), p(name + ".b"));
}

/// Single-head scaled dot-product attention. q[d, N], k[d, M], v[dv, M] -> [dv, N].
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v) {
  const T s = T(1) / std::sqrt(static_cast<T>(q.dim(0)));
  Var<T> weights = softmax(scale(matmul(q, k, true, false), s), 1);  // [N, M]
  return matmul(v, weights, false, true);
}

// ---------------------------------------------------------------- optimiser

/// Adam with decoupled weight decay.
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void step(ParamSet<float>& params, const ParamSet<float>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, t_);
    const double c2 = 1.0 - std::pow(beta2, t_);
    for (const auto& [name, g] : grads) {
      auto& w = params.at(name).data;
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.size() != w.size()) {
        m.assign(w.size(), 0.0);
        v.assign(w.size(), 0.0);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g.data[i];
        m[i] = beta1 * m[i] + (1 - beta1) * gi;
        v[i] = beta2 * v[i] + (1 - beta2) * gi * gi;
        const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        w[i] = static_cast<float>(w[i] - lr * (upd + weight_decay * w[i]));
      }
    }
  }
  long steps() const { return t_; }

 private:
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace imd::ad
