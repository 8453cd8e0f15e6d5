#pragma once

// Coarse matching: attention transform of stride-8 features, cosine score
// matrix, dual-softmax and mutual-nearest-neighbour selection.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "imd/ad/nn.hpp"
#include "imd/core/types.hpp"

namespace imd::matching {

using ad::Binder;
using ad::ParamSet;
using ad::Var;

struct CoarseSpec {
  int channels = 64;
  int ffn_mult = 2;
};

template <class T>
void init_coarse(ParamSet<T>& params, const CoarseSpec& spec, std::uint64_t seed) {
  ad::Initializer<T> init(params, seed);
  const int c = spec.channels;
  for (const std::string n : {"coarse.self", "coarse.cross"}) {
    init.norm(n + ".ln1", c);
    init.linear(n + ".q", c, c, 1.0, false);
    init.linear(n + ".k", c, c, 1.0, false);
    init.linear(n + ".v", c, c, 1.0, false);
    init.linear(n + ".o", c, c, 0.5);
    init.norm(n + ".ln2", c);
    init.linear(n + ".ffn1", spec.ffn_mult * c, c);
    init.linear(n + ".ffn2", c, spec.ffn_mult * c, 0.5);
  }
}

/// Fixed 2-D sinusoidal encoding [C, h, w]; channels cycle through
/// sin(x f), cos(x f), sin(y f), cos(y f) for geometrically spaced f.
template <class T>
Tensor<T> positional_encoding(int channels, int h, int w) {
  Tensor<T> pe({channels, h, w});
  const int quarter = std::max(channels / 4, 1);
  for (int c = 0; c < channels; ++c) {
    const int k = (c / 4) % quarter;
    const double freq = std::exp(-std::log(10000.0) * 2.0 * k / (channels / 2.0));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double px = (x + 1) * freq, py = (y + 1) * freq;
        double v = 0;
        switch (c % 4) {
          case 0: v = std::sin(px); break;
          case 1: v = std::cos(px); break;
          case 2: v = std::sin(py); break;
          default: v = std::cos(py); break;
        }
        pe.at(c, y, x) = static_cast<T>(v);
      }
  }
  return pe;
}

/// Pre-norm transformer layer: x attends to src, then a GELU feed-forward; x, src are [C, N].
template <class T>
Var<T> attention_layer(Binder<T>& p, const std::string& n, Var<T> x, Var<T> src) {
  Var<T> xn = ad::lnorm(p, n + ".ln1", x);
  Var<T> sn = x.id() == src.id() ? xn : ad::lnorm(p, n + ".ln1", src);
  Var<T> att = ad::attention(ad::linear(p, n + ".q", xn), ad::linear(p, n + ".k", sn), ad::linear(p, n + ".v", sn));
  x = ad::add(x, ad::linear(p, n + ".o", att));
  Var<T> ff = ad::linear(p, n + ".ffn2", ad::gelu(ad::linear(p, n + ".ffn1", ad::lnorm(p, n + ".ln2", x))));
  return ad::add(x, ff);
}

/// Adds positional encoding, then n_attn rounds of (self, cross) attention with
/// weights shared across rounds. Inputs and outputs are [C, h, w].
template <class T>
std::pair<Var<T>, Var<T>> transform_features(Binder<T>& p, Var<T> ca, Var<T> cb, int n_attn) {
  if (ca.value().rank() != 3 || cb.value().rank() != 3 || ca.dim(0) != cb.dim(0))
    throw ShapeError("transform_features channel mismatch: " + shape_str(ca.shape()) + " vs " + shape_str(cb.shape()));
  auto& tape = p.tape();
  const Shape sa = ca.shape(), sb = cb.shape();
  Var<T> a = ad::add(ca, tape.constant(positional_encoding<T>(sa[0], sa[1], sa[2])));
  Var<T> b = ad::add(cb, tape.constant(positional_encoding<T>(sb[0], sb[1], sb[2])));
  a = ad::reshape(a, {sa[0], sa[1] * sa[2]});
  b = ad::reshape(b, {sb[0], sb[1] * sb[2]});
  for (int r = 0; r < n_attn; ++r) {
    a = attention_layer(p, "coarse.self", a, a);
    b = attention_layer(p, "coarse.self", b, b);
    Var<T> a2 = attention_layer(p, "coarse.cross", a, b);
    Var<T> b2 = attention_layer(p, "coarse.cross", b, a);
    a = a2;
    b = b2;
  }
  return {ad::reshape(a, sa), ad::reshape(b, sb)};
}

/// Cosine similarity between all cell pairs divided by temperature: [h_a w_a, h_b w_b].
template <class T>
Var<T> score_matrix(Var<T> fa, Var<T> fb, T temperature) {
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  auto flat = [](Var<T> f) { return f.value().rank() == 3 ? ad::reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}) : f; };
  Var<T> na = ad::normalize_columns(flat(fa), T(1e-8));
  Var<T> nb = ad::normalize_columns(flat(fb), T(1e-8));
  return ad::scale(ad::matmul(na, nb, true, false), T(1) / temperature);
}

/// Row softmax times column softmax, elementwise.
template <class T>
Var<T> dual_softmax(Var<T> s) {
  return ad::mul(ad::softmax(s, 1), ad::softmax(s, 0));
}

template <class T>
Tensor<T> dual_softmax(const Tensor<T>& s) {
  ad::Tape<T> tape;
  return dual_softmax(tape.constant(s)).value();
}

/// Mutual nearest neighbours of P [Na, Nb] whose probability exceeds tau.
/// Argmax ties resolve to the lowest index.
template <class T>
CoarseMatchSet select_matches(const Tensor<T>& prob, double tau) {
  if (prob.rank() != 2) throw ShapeError("select_matches needs a matrix");
  const int na = prob.dim(0), nb = prob.dim(1);
  std::vector<int> row_best(na, 0), col_best(nb, 0);
  for (int i = 0; i < na; ++i)
    for (int j = 1; j < nb; ++j)
      if (prob.at(i, j) > prob.at(i, row_best[i])) row_best[i] = j;
  for (int j = 0; j < nb; ++j)
    for (int i = 1; i < na; ++i)
      if (prob.at(i, j) > prob.at(col_best[j], j)) col_best[j] = i;
  std::vector<CoarseMatch> out;
  for (int i = 0; i < na; ++i) {
    const int j = row_best[i];
    if (col_best[j] == i && static_cast<double>(prob.at(i, j)) > tau)
      out.push_back({i, j, static_cast<float>(prob.at(i, j))});
  }
  return CoarseMatchSet(std::move(out), na, nb);
}

}  // namespace imd::matching
