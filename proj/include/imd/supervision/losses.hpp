#pragma once

#include <cmath>
#include <vector>

#include "imd/ad/nn.hpp"
#include "imd/matching/coarse.hpp"
#include "imd/supervision/ground_truth.hpp"

namespace imd::supervision {

using ad::Var;

/// Loss value together with the number of supervised items that contributed.
template <class T>
struct LossTerm {
  Var<T> value;
  int count = 0;
};

namespace detail {

/// log(max(x, floor)); the clamp keeps a zero probability finite.
template <class T>
Var<T> safe_log(Var<T> a, T floor = T(1e-30)) {
  return ad::detail::unary<T>(
      a, [floor](T x) { return std::log(std::max(x, floor)); }, [floor](T x, T) { return x > floor ? T(1) / x : T(0); });
}

/// -(1/N) sum (1 - p)^gamma log p over the entries p.
template <class T>
Var<T> focal_nll(Var<T> p, T gamma) {
  Var<T> nll = safe_log(p);
  if (gamma != T(0)) nll = ad::mul(ad::one_minus_pow(p, gamma), nll);
  return ad::scale(ad::mean(nll), T(-1));
}

}  // namespace detail

/// Coarse loss on the dual-softmax matrix P [Na, Nb] at the ground-truth pairs.
/// gamma = 0 is the plain negative log-likelihood; gamma > 0 adds focal modulation.
template <class T>
Var<T> coarse_loss(Var<T> prob, const std::vector<std::pair<int, int>>& pairs, T focal_gamma) {
  if (pairs.empty()) throw SupervisionError("coarse loss needs at least one ground-truth match");
  const int nb = prob.dim(1);
  std::vector<int> idx;
  idx.reserve(pairs.size());
  for (auto [a, b] : pairs) {
    if (a < 0 || b < 0 || a >= prob.dim(0) || b >= nb) throw SupervisionError("ground-truth pair outside P");
    idx.push_back(a * nb + b);
  }
  const int n = static_cast<int>(idx.size());
  return detail::focal_nll(ad::gather(prob, std::move(idx), {n}), focal_gamma);
}

template <class T>
Var<T> coarse_loss(Var<T> prob, const GtMatches& gt, T focal_gamma) {
  return coarse_loss(prob, gt.coarse_pairs, focal_gamma);
}

/// Target cell of one local score matrix: row (pixel in window A) and column
/// (pixel in window B); col < 0 marks ground truth outside the window.
struct LocalTarget {
  int row = 0;
  int col = -1;
};

/// Mean negative log dual-softmax probability of each local score matrix at its
/// target cell. Matrices whose target lies outside the window are skipped.
template <class T>
LossTerm<T> fine_loss_l1(const std::vector<Var<T>>& local_scores, const std::vector<LocalTarget>& targets,
                         ad::Tape<T>& tape) {
  if (local_scores.size() != targets.size()) throw SupervisionError("one target per local score matrix required");
  std::vector<Var<T>> picked;
  for (std::size_t k = 0; k < local_scores.size(); ++k) {
    if (targets[k].col < 0) continue;
    Var<T> p = matching::dual_softmax(local_scores[k]);
    picked.push_back(ad::gather(p, {targets[k].row * p.dim(1) + targets[k].col}, {1}));
  }
  if (picked.empty()) return {tape.constant(Tensor<T>({1})), 0};
  const int n = static_cast<int>(picked.size());
  return {detail::focal_nll(ad::concat(picked, 0), T(0)), n};
}

/// Mean squared pixel distance between predicted points [K, 2] and targets.
template <class T>
LossTerm<T> fine_loss_l2(Var<T> predicted, const std::vector<Point2>& targets, ad::Tape<T>& tape) {
  if (targets.empty()) return {tape.constant(Tensor<T>({1})), 0};
  if (predicted.dim(0) != static_cast<int>(targets.size())) throw SupervisionError("prediction/target count mismatch");
  Tensor<T> tgt({static_cast<int>(targets.size()), 2});
  for (std::size_t i = 0; i < targets.size(); ++i) {
    tgt.data[2 * i] = static_cast<T>(targets[i].x);
    tgt.data[2 * i + 1] = static_cast<T>(targets[i].y);
  }
  Var<T> d = ad::square(ad::sub(predicted, tape.constant(std::move(tgt))));
  return {ad::scale(ad::sum(d), T(1) / static_cast<T>(targets.size())), static_cast<int>(targets.size())};
}

struct L2Evaluation {
  double value = 0;
  int count = 0;
};

/// Mean squared distance between fine matches and the ground-truth image of their
/// A points. Matches are paired to ground truth through their coarse parent.
inline L2Evaluation fine_loss_l2(const FineMatchSet& mf, const GtMatches& gt) {
  L2Evaluation out;
  double total = 0;
  for (const auto& m : mf.entries) {
    std::optional<Point2> target;
    if (gt.warp) target = gt.warp({m.xa, m.ya});
    else if (m.coarse_parent >= 0 && static_cast<std::size_t>(m.coarse_parent) < gt.fine_targets.size())
      target = gt.fine_targets[m.coarse_parent];
    if (!target) continue;
    total += (m.xb - target->x) * (m.xb - target->x) + (m.yb - target->y) * (m.yb - target->y);
    ++out.count;
  }
  out.value = out.count ? total / out.count : 0.0;
  return out;
}

template <class T>
Var<T> total_loss(Var<T> lc, Var<T> lf1, Var<T> lf2, T alpha, T beta) {
  return ad::add(ad::add(lc, ad::scale(lf1, alpha)), ad::scale(lf2, beta));
}

inline double total_loss(double lc, double lf1, double lf2, double alpha, double beta) {
  return lc + alpha * lf1 + beta * lf2;
}

}  // namespace imd::supervision
