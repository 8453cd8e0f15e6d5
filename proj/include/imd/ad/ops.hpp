#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "imd/ad/tape.hpp"

namespace imd::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
CMapMat<T> as_mat(const Tensor<T>& t, int rows, int cols) {
  return CMapMat<T>(t.data.data(), rows, cols);
}
template <class T>
MapMat<T> as_mat(Tensor<T>& t, int rows, int cols) {
  return MapMat<T>(t.data.data(), rows, cols);
}

inline void require(bool ok, const char* what, const Shape& a, const Shape& b = {}) {
  if (!ok) throw ShapeError(std::string(what) + ": " + shape_str(a) + (b.empty() ? "" : " vs " + shape_str(b)));
}

// Accumulates `scale * g` into the gradient of `v` if it needs one.
template <class T>
void accumulate(Tape<T>& tape, const Var<T>& v, std::span<const T> g, T scale = T(1)) {
  if (!tape.requires_grad(v.id())) return;
  auto& dst = tape.grad_buffer(v.id()).data;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * g[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require(a.shape() == b.shape(), "add shape mismatch", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
  return a.tape()->emit(std::move(out), {a, b}, [a, b](Tape<T>& tape, int self) {
    const auto& g = tape.grad(self).data;
    detail::accumulate<T>(tape, a, g);
    detail::accumulate<T>(tape, b, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require(a.shape() == b.shape(), "sub shape mismatch", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
  return a.tape()->emit(std::move(out), {a, b}, [a, b](Tape<T>& tape, int self) {
    const auto& g = tape.grad(self).data;
    detail::accumulate<T>(tape, a, g);
    detail::accumulate<T>(tape, b, g, T(-1));
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require(a.shape() == b.shape(), "mul shape mismatch", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
  return a.tape()->emit(std::move(out), {a, b}, [a, b](Tape<T>& tape, int self) {
    const auto& g = tape.grad(self).data;
    if (tape.requires_grad(a.id())) {
      auto& da = tape.grad_buffer(a.id()).data;
      const auto& bv = b.value().data;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(b.id())) {
      auto& db = tape.grad_buffer(b.id()).data;
      const auto& av = a.value().data;
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return a.tape()->emit(std::move(out), {a}, [a, s](Tape<T>& tape, int self) {
    detail::accumulate<T>(tape, a, tape.grad(self).data, s);
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += s;
  return a.tape()->emit(std::move(out), {a}, [a](Tape<T>& tape, int self) {
    detail::accumulate<T>(tape, a, tape.grad(self).data);
  });
}

namespace detail {

// Elementwise unary op given f and its derivative in terms of (x, y).
template <class T, class F, class DF>
Var<T> unary(Var<T> a, F f, DF df) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = f(v);
  return a.tape()->emit(std::move(out), {a}, [a, df](Tape<T>& tape, int self) {
    if (!tape.requires_grad(a.id())) return;
    const auto& g = tape.grad(self).data;
    const auto& x = a.value().data;
    const auto& y = tape.value(self).data;
    auto& da = tape.grad_buffer(a.id()).data;
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> log(Var<T> a) {
  return detail::unary<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> exp(Var<T> a) {
  return detail::unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> square(Var<T> a) {
  return detail::unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> silu(Var<T> a) {
  return detail::unary<T>(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

/// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  return detail::unary<T>(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2))); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        return cdf + x * pdf;
      });
}

/// (1 - x)^gamma; used by the focal loss.
template <class T>
Var<T> one_minus_pow(Var<T> a, T gamma) {
  return detail::unary<T>(
      a, [gamma](T x) { return std::pow(std::max(T(1) - x, T(0)), gamma); },
      [gamma](T x, T) {
        const T r = std::max(T(1) - x, T(0));
        return gamma == T(0) ? T(0) : -gamma * std::pow(r, gamma - T(1));
      });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data) s += v;
  return a.tape()->emit(Tensor<T>({1}, s), {a}, [a](Tape<T>& tape, int self) {
    if (!tape.requires_grad(a.id())) return;
    const T g = tape.grad(self).data[0];
    for (auto& d : tape.grad_buffer(a.id()).data) d += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------- shape ops

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(), "reshape size mismatch", a.shape(), shape);
  Tensor<T> out(std::move(shape), a.value().data);
  return a.tape()->emit(std::move(out), {a}, [a](Tape<T>& tape, int self) {
    detail::accumulate<T>(tape, a, tape.grad(self).data);
  });
}

/// Copy that does not propagate gradients.
template <class T>
Var<T> detach(Var<T> a) {
  return a.tape()->constant(a.value());
}

/// Concatenation along `axis`; all other dims must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const Shape& s0 = parts[0].shape();
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = s0;
    detail::require(a.size() == b.size(), "concat rank mismatch", a, b);
    a[axis] = b[axis] = 0;
    detail::require(a == b, "concat shape mismatch", p.shape(), s0);
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Tensor<T> out(out_shape);
  const std::size_t out_row = static_cast<std::size_t>(out_shape[axis]) * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t row = static_cast<std::size_t>(p.shape()[axis]) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data.begin() + o * row, row, out.data.begin() + o * out_row + offset);
    offset += row;
  }
  return parts[0].tape()->emit(std::move(out), parts, [parts, outer, inner, axis, out_row](Tape<T>& tape, int self) {
    const auto& g = tape.grad(self).data;
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t row = static_cast<std::size_t>(p.shape()[axis]) * inner;
      if (tape.requires_grad(p.id())) {
        auto& d = tape.grad_buffer(p.id()).data;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < row; ++k) d[o * row + k] += g[o * out_row + offset + k];
      }
      offset += row;
    }
  });
}

/// Gathers flat elements of `a` into a tensor of shape `shape`; backward scatter-adds.
template <class T>
Var<T> gather(Var<T> a, std::vector<int> indices, Shape shape) {
  detail::require(shape_numel(shape) == indices.size(), "gather index count", shape);
  Tensor<T> out(std::move(shape));
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= av.size())
      throw ShapeError("gather index out of range");
    out.data[i] = av[indices[i]];
  }
  return a.tape()->emit(std::move(out), {a}, [a, idx = std::move(indices)](Tape<T>& tape, int self) {
    if (!tape.requires_grad(a.id())) return;
    const auto& g = tape.grad(self).data;
    auto& d = tape.grad_buffer(a.id()).data;
    for (std::size_t i = 0; i < idx.size(); ++i) d[idx[i]] += g[i];
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  detail::require(a.value().rank() == 2, "transpose needs rank 2", a.shape());
  const int r = a.dim(0), c = a.dim(1);
  Tensor<T> out({c, r});
  detail::as_mat(out, c, r) = detail::as_mat(a.value(), r, c).transpose();
  return a.tape()->emit(std::move(out), {a}, [a, r, c](Tape<T>& tape, int self) {
    if (!tape.requires_grad(a.id())) return;
    detail::as_mat(tape.grad_buffer(a.id()), r, c) += detail::as_mat(tape.grad(self), c, r).transpose();
  });
}

// ---------------------------------------------------------------- linear algebra

/// op(a) * op(b) for rank-2 a and b, where op transposes when requested.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
  detail::require(a.value().rank() == 2 && b.value().rank() == 2, "matmul needs rank 2", a.shape(), b.shape());
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const int k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  detail::require(k == k2, "matmul inner dimension mismatch", a.shape(), b.shape());
  Tensor<T> out({m, n});
  auto A = detail::as_mat(a.value(), ar, ac);
  auto B = detail::as_mat(b.value(), br, bc);
  auto C = detail::as_mat(out, m, n);
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
  return a.tape()->emit(std::move(out), {a, b}, [=](Tape<T>& tape, int self) {
    auto G = detail::as_mat(tape.grad(self), m, n);
    auto A = detail::as_mat(a.value(), ar, ac);
    auto B = detail::as_mat(b.value(), br, bc);
    if (tape.requires_grad(a.id())) {
      auto dA = detail::as_mat(tape.grad_buffer(a.id()), ar, ac);
      // d op(A) = G * op(B)^T
      if (!trans_a && !trans_b) dA.noalias() += G * B.transpose();
      else if (!trans_a && trans_b) dA.noalias() += G * B;
      else if (trans_a && !trans_b) dA.noalias() += B * G.transpose();
      else dA.noalias() += B.transpose() * G.transpose();
    }
    if (tape.requires_grad(b.id())) {
      auto dB = detail::as_mat(tape.grad_buffer(b.id()), br, bc);
      // d op(B) = op(A)^T * G
      if (!trans_a && !trans_b) dB.noalias() += A.transpose() * G;
      else if (trans_a && !trans_b) dB.noalias() += A * G;
      else if (!trans_a && trans_b) dB.noalias() += G.transpose() * A;
      else dB.noalias() += G.transpose() * A.transpose();
    }
  });
}

/// Adds a per-row bias b[C] to x[C, ...].
template <class T>
Var<T> add_row_bias(Var<T> x, Var<T> b) {
  const int c = x.dim(0);
  detail::require(b.numel() == static_cast<std::size_t>(c), "bias size mismatch", x.shape(), b.shape());
  const std::size_t inner = x.numel() / c;
  Tensor<T> out = x.value();
  for (int i = 0; i < c; ++i)
    for (std::size_t j = 0; j < inner; ++j) out.data[i * inner + j] += b.value().data[i];
  return x.tape()->emit(std::move(out), {x, b}, [x, b, c, inner](Tape<T>& tape, int self) {
    const auto& g = tape.grad(self).data;
    detail::accumulate<T>(tape, x, g);
    if (tape.requires_grad(b.id())) {
      auto& db = tape.grad_buffer(b.id()).data;
      for (int i = 0; i < c; ++i)
        for (std::size_t j = 0; j < inner; ++j) db[i] += g[i * inner + j];
    }
  });
}

/// Softmax of a rank-2 tensor along `axis` (1: within each row, 0: within each column).
template <class T>
Var<T> softmax(Var<T> a, int axis) {
  detail::require(a.value().rank() == 2, "softmax needs rank 2", a.shape());
  const int r = a.dim(0), c = a.dim(1);
  Tensor<T> out({r, c});
  auto X = detail::as_mat(a.value(), r, c);
  auto Y = detail::as_mat(out, r, c);
  if (axis == 1) {
    for (int i = 0; i < r; ++i) {
      const T mx = X.row(i).maxCoeff();
      Y.row(i) = (X.row(i).array() - mx).exp();
      Y.row(i) /= Y.row(i).sum();
    }
  } else {
    for (int j = 0; j < c; ++j) {
      const T mx = X.col(j).maxCoeff();
      Y.col(j) = (X.col(j).array() - mx).exp();
      Y.col(j) /= Y.col(j).sum();
    }
  }
  return a.tape()->emit(std::move(out), {a}, [a, r, c, axis](Tape<T>& tape, int self) {
    if (!tape.requires_grad(a.id())) return;
    auto G = detail::as_mat(tape.grad(self), r, c);
    auto Y = detail::as_mat(tape.value(self), r, c);
    auto D = detail::as_mat(tape.grad_buffer(a.id()), r, c);
    if (axis == 1) {
      for (int i = 0; i < r; ++i) {
        const T dot = G.row(i).dot(Y.row(i));
        D.row(i).array() += Y.row(i).array() * (G.row(i).array() - dot);
      }
    } else {
      for (int j = 0; j < c; ++j) {
        const T dot = G.col(j).dot(Y.col(j));
        D.col(j).array() += Y.col(j).array() * (G.col(j).array() - dot);
      }
    }
  });
}

/// Scales every column of x[C, N] to unit L2 norm, with the norm floored at `floor`.
template <class T>
Var<T> normalize_columns(Var<T> x, T floor = T(1e-8)) {
  detail::require(x.value().rank() == 2, "normalize_columns needs rank 2", x.shape());
  const int c = x.dim(0), n = x.dim(1);
  Tensor<T> out({c, n});
  std::vector<T> norms(n);
  auto X = detail::as_mat(x.value(), c, n);
  auto Y = detail::as_mat(out, c, n);
  for (int j = 0; j < n; ++j) {
    norms[j] = std::max(X.col(j).norm(), floor);
    Y.col(j) = X.col(j) / norms[j];
  }
  return x.tape()->emit(std::move(out), {x}, [x, c, n, floor, norms](Tape<T>& tape, int self) {
    if (!tape.requires_grad(x.id())) return;
    auto G = detail::as_mat(tape.grad(self), c, n);
    auto Y = detail::as_mat(tape.value(self), c, n);
    auto D = detail::as_mat(tape.grad_buffer(x.id()), c, n);
    for (int j = 0; j < n; ++j) {
      if (norms[j] > floor) D.col(j) += (G.col(j) - Y.col(j) * Y.col(j).dot(G.col(j))) / norms[j];
      else D.col(j) += G.col(j) / floor;
    }
  });
}

// ---------------------------------------------------------------- normalisation

namespace detail {

// Normalises groups of elements given by (offsets, group size, stride-1 runs) and
// applies per-channel affine parameters. `layout` describes how element k of
// group g maps to a flat index and to its channel.
template <class T, class IndexFn, class ChannelFn>
Var<T> grouped_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, int group_size, IndexFn index, ChannelFn channel,
                    T eps) {
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(groups);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  const auto& xv = x.value().data;
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (int g = 0; g < groups; ++g) {
    T mu = 0;
    for (int k = 0; k < group_size; ++k) mu += xv[index(g, k)];
    mu /= group_size;
    T var = 0;
    for (int k = 0; k < group_size; ++k) {
      const T d = xv[index(g, k)] - mu;
      var += d * d;
    }
    var /= group_size;
    inv_std[g] = T(1) / std::sqrt(var + eps);
    for (int k = 0; k < group_size; ++k) {
      const std::size_t i = index(g, k);
      (*xhat)[i] = (xv[i] - mu) * inv_std[g];
      const int ch = channel(g, k);
      out.data[i] = gv[ch] * (*xhat)[i] + bv[ch];
    }
  }
  return x.tape()->emit(std::move(out), {x, gamma, beta},
                        [=](Tape<T>& tape, int self) {
                          const auto& gout = tape.grad(self).data;
                          const auto& gv = gamma.value().data;
                          if (tape.requires_grad(gamma.id()) || tape.requires_grad(beta.id())) {
                            auto* dg = tape.requires_grad(gamma.id()) ? &tape.grad_buffer(gamma.id()).data : nullptr;
                            auto* db = tape.requires_grad(beta.id()) ? &tape.grad_buffer(beta.id()).data : nullptr;
                            for (int g = 0; g < groups; ++g)
                              for (int k = 0; k < group_size; ++k) {
                                const std::size_t i = index(g, k);
                                const int ch = channel(g, k);
                                if (dg) (*dg)[ch] += gout[i] * (*xhat)[i];
                                if (db) (*db)[ch] += gout[i];
                              }
                          }
                          if (!tape.requires_grad(x.id())) return;
                          auto& dx = tape.grad_buffer(x.id()).data;
                          for (int g = 0; g < groups; ++g) {
                            T m1 = 0, m2 = 0;
                            for (int k = 0; k < group_size; ++k) {
                              const std::size_t i = index(g, k);
                              const T dxh = gout[i] * gv[channel(g, k)];
                              m1 += dxh;
                              m2 += dxh * (*xhat)[i];
                            }
                            m1 /= group_size;
                            m2 /= group_size;
                            for (int k = 0; k < group_size; ++k) {
                              const std::size_t i = index(g, k);
                              const T dxh = gout[i] * gv[channel(g, k)];
                              dx[i] += inv_std[g] * (dxh - m1 - (*xhat)[i] * m2);
                            }
                          }
                        });
}

}  // namespace detail

/// Group normalisation of x[C, ...] with per-channel affine gamma, beta.
template <class T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5)) {
  const int c = x.dim(0);
  if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const int per = c / groups;
  const int inner = static_cast<int>(x.numel() / c);
  return detail::grouped_norm<T>(
      x, gamma, beta, groups, per * inner, [=](int g, int k) { return static_cast<std::size_t>(g) * per * inner + k; },
      [=](int g, int k) { return g * per + k / inner; }, eps);
}

/// Layer normalisation of each column of x[C, N] across its C channels.
template <class T>
Var<T> layer_norm_columns(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const int c = x.dim(0), n = x.dim(1);
  return detail::grouped_norm<T>(
      x, gamma, beta, n, c, [=](int g, int k) { return static_cast<std::size_t>(k) * n + g; },
      [](int, int k) { return k; }, eps);
}

// ---------------------------------------------------------------- spatial ops

/// 2-D convolution of x[Ci, H, W] with w[Co, Ci, k, k], zero padding.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int pad) {
  detail::require(x.value().rank() == 3 && w.value().rank() == 4, "conv2d ranks", x.shape(), w.shape());
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), k = w.dim(2);
  detail::require(w.dim(1) == ci && w.dim(3) == k, "conv2d channel mismatch", x.shape(), w.shape());
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d output would be empty");
  const int rows = ci * k * k, cols = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  auto im2col = std::make_shared<Tensor<T>>();
  if (!pointwise) {
    *im2col = Tensor<T>({rows, cols});
    const auto& xv = x.value().data;
    for (int c = 0; c < ci; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* dst = im2col->data.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              dst[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < wd)
                                      ? xv[(static_cast<std::size_t>(c) * h + iy) * wd + ix]
                                      : T(0);
            }
          }
        }
  }
  Tensor<T> out({co, ho, wo});
  {
    auto W = detail::as_mat(w.value(), co, rows);
    auto Y = detail::as_mat(out, co, cols);
    if (pointwise) Y.noalias() = W * detail::as_mat(x.value(), rows, cols);
    else Y.noalias() = W * detail::as_mat(*im2col, rows, cols);
    if (bias.valid()) Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.value().data.data(), co);
  }
  std::vector<Var<T>> parents = {x, w};
  if (bias.valid()) parents.push_back(bias);
  return x.tape()->emit(std::move(out), parents, [=](Tape<T>& tape, int self) {
    auto G = detail::as_mat(tape.grad(self), co, cols);
    const Tensor<T>& colsrc = pointwise ? x.value() : *im2col;
    if (tape.requires_grad(w.id()))
      detail::as_mat(tape.grad_buffer(w.id()), co, rows).noalias() += G * detail::as_mat(colsrc, rows, cols).transpose();
    if (bias.valid() && tape.requires_grad(bias.id())) {
      auto& db = tape.grad_buffer(bias.id()).data;
      for (int o = 0; o < co; ++o) db[o] += G.row(o).sum();
    }
    if (!tape.requires_grad(x.id())) return;
    auto W = detail::as_mat(w.value(), co, rows);
    if (pointwise) {
      detail::as_mat(tape.grad_buffer(x.id()), rows, cols).noalias() += W.transpose() * G;
      return;
    }
    Tensor<T> dcol({rows, cols});
    detail::as_mat(dcol, rows, cols).noalias() = W.transpose() * G;
    auto& dx = tape.grad_buffer(x.id()).data;
    for (int c = 0; c < ci; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const T* src = dcol.data.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < wd) dx[(static_cast<std::size_t>(c) * h + iy) * wd + ix] += src[oy * wo + ox];
            }
          }
        }
  });
}

/// Nearest-neighbour upsampling of x[C, h, w] by an integer factor.
template <class T>
Var<T> upsample_nearest(Var<T> x, int factor) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int H = h * factor, W = w * factor;
  Tensor<T> out({c, H, W});
  const auto& xv = x.value().data;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        out.data[(static_cast<std::size_t>(ch) * H + y) * W + xx] =
            xv[(static_cast<std::size_t>(ch) * h + y / factor) * w + xx / factor];
  return x.tape()->emit(std::move(out), {x}, [=](Tape<T>& tape, int self) {
    if (!tape.requires_grad(x.id())) return;
    const auto& g = tape.grad(self).data;
    auto& dx = tape.grad_buffer(x.id()).data;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          dx[(static_cast<std::size_t>(ch) * h + y / factor) * w + xx / factor] +=
              g[(static_cast<std::size_t>(ch) * H + y) * W + xx];
  });
}

/// Adaptive average pooling of x[C, H, W] to an out_h x out_w grid. Bin i spans
/// [floor(i*H/out_h), ceil((i+1)*H/out_h)).
template <class T>
Var<T> avg_pool_to(Var<T> x, int out_h, int out_w) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h <= 0 || out_w <= 0 || out_h > h || out_w > w) throw ShapeError("avg_pool_to: bad output grid");
  auto bins = [](int n, int out) {
    std::vector<std::pair<int, int>> b(out);
    for (int i = 0; i < out; ++i) b[i] = {i * n / out, ((i + 1) * n + out - 1) / out};
    return b;
  };
  const auto by = bins(h, out_h), bx = bins(w, out_w);
  Tensor<T> out({c, out_h, out_w});
  const auto& xv = x.value().data;
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < out_h; ++i)
      for (int j = 0; j < out_w; ++j) {
        T s = 0;
        for (int y = by[i].first; y < by[i].second; ++y)
          for (int xx = bx[j].first; xx < bx[j].second; ++xx) s += xv[(static_cast<std::size_t>(ch) * h + y) * w + xx];
        out.at(ch, i, j) = s / static_cast<T>((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
      }
  return x.tape()->emit(std::move(out), {x}, [=](Tape<T>& tape, int self) {
    if (!tape.requires_grad(x.id())) return;
    const auto& g = tape.grad(self);
    auto& dx = tape.grad_buffer(x.id()).data;
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < out_h; ++i)
        for (int j = 0; j < out_w; ++j) {
          const T share = g.at(ch, i, j) /
                          static_cast<T>((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
          for (int y = by[i].first; y < by[i].second; ++y)
            for (int xx = bx[j].first; xx < bx[j].second; ++xx)
              dx[(static_cast<std::size_t>(ch) * h + y) * w + xx] += share;
        }
  });
}

}  // namespace imd::ad
