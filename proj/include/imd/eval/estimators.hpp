#pragma once

// Seeded RANSAC estimators for homographies (normalised DLT) and relative pose
// (normalised eight-point essential matrix with cheirality disambiguation).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "imd/core/geometry.hpp"
#include "imd/core/types.hpp"

namespace imd::eval {

struct RansacOptions {
  double threshold_px = 1.0;
  int max_iterations = 2000;
  double confidence = 0.999;
  std::uint64_t seed = 0;
};

struct HomographyEstimate {
  Eigen::Matrix3d H = Eigen::Matrix3d::Identity();
  std::vector<bool> inliers;
};

struct PoseEstimate {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  std::vector<bool> inliers;
};

namespace detail {

using Points = std::vector<Eigen::Vector2d>;

/// Similarity that moves the centroid to the origin and the mean distance to sqrt(2).
inline Eigen::Matrix3d normalizer(const Points& pts, const std::vector<int>& idx) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (int i : idx) c += pts[i];
  c /= static_cast<double>(idx.size());
  double d = 0;
  for (int i : idx) d += (pts[i] - c).norm();
  d /= static_cast<double>(idx.size());
  const double s = d > 1e-12 ? std::sqrt(2.0) / d : 1.0;
  Eigen::Matrix3d T;
  T << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return T;
}

inline Eigen::Vector2d transform(const Eigen::Matrix3d& T, const Eigen::Vector2d& p) {
  return (T * p.homogeneous()).hnormalized();
}

inline std::optional<Eigen::Matrix3d> fit_homography(const Points& a, const Points& b, const std::vector<int>& idx) {
  if (idx.size() < 4) return std::nullopt;
  const Eigen::Matrix3d Ta = normalizer(a, idx), Tb = normalizer(b, idx);
  Eigen::MatrixXd A(2 * idx.size(), 9);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Eigen::Vector2d p = transform(Ta, a[idx[r]]), q = transform(Tb, b[idx[r]]);
    A.row(2 * r) << -p.x(), -p.y(), -1, 0, 0, 0, q.x() * p.x(), q.x() * p.y(), q.x();
    A.row(2 * r + 1) << 0, 0, 0, -p.x(), -p.y(), -1, q.y() * p.x(), q.y() * p.y(), q.y();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d Hn;
  Hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  Eigen::Matrix3d H = Tb.inverse() * Hn * Ta;
  if (!H.allFinite() || std::abs(H(2, 2)) < 1e-15) return std::nullopt;
  H /= H(2, 2);
  if (std::abs(H.determinant()) < 1e-12) return std::nullopt;
  return H;
}

inline double transfer_error(const Eigen::Matrix3d& H, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector3d q = H * a.homogeneous();
  if (std::abs(q.z()) < 1e-12) return std::numeric_limits<double>::infinity();
  return (q.hnormalized() - b).norm();
}

inline std::optional<Eigen::Matrix3d> fit_essential(const Points& a, const Points& b, const std::vector<int>& idx) {
  if (idx.size() < 8) return std::nullopt;
  const Eigen::Matrix3d Ta = normalizer(a, idx), Tb = normalizer(b, idx);
  Eigen::MatrixXd A(idx.size(), 9);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Eigen::Vector2d p = transform(Ta, a[idx[r]]), q = transform(Tb, b[idx[r]]);
    A.row(r) << q.x() * p.x(), q.x() * p.y(), q.x(), q.y() * p.x(), q.y() * p.y(), q.y(), p.x(), p.y(), 1;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd e = svd.matrixV().col(8);
  Eigen::Matrix3d En;
  En << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
  Eigen::Matrix3d E = Tb.transpose() * En * Ta;
  Eigen::JacobiSVD<Eigen::Matrix3d> s2(E, Eigen::ComputeFullU | Eigen::ComputeFullV);
  E = s2.matrixU() * Eigen::Vector3d(1, 1, 0).asDiagonal() * s2.matrixV().transpose();
  if (!E.allFinite()) return std::nullopt;
  return E;
}

inline double sampson_sq(const Eigen::Matrix3d& E, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector3d x1 = a.homogeneous(), x2 = b.homogeneous();
  const Eigen::Vector3d Ex1 = E * x1, Etx2 = E.transpose() * x2;
  const double num = x2.dot(Ex1);
  const double den = Ex1.x() * Ex1.x() + Ex1.y() * Ex1.y() + Etx2.x() * Etx2.x() + Etx2.y() * Etx2.y();
  return den > 0 ? num * num / den : std::numeric_limits<double>::infinity();
}

/// Linear triangulation; returns the point in camera-A coordinates.
inline Eigen::Vector3d triangulate(const Eigen::Matrix3d& R, const Eigen::Vector3d& t, const Eigen::Vector2d& a,
                                   const Eigen::Vector2d& b) {
  Eigen::Matrix<double, 3, 4> P1 = Eigen::Matrix<double, 3, 4>::Zero();
  P1.leftCols<3>().setIdentity();
  Eigen::Matrix<double, 3, 4> P2;
  P2.leftCols<3>() = R;
  P2.col(3) = t;
  Eigen::Matrix4d A;
  A.row(0) = a.x() * P1.row(2) - P1.row(0);
  A.row(1) = a.y() * P1.row(2) - P1.row(1);
  A.row(2) = b.x() * P2.row(2) - P2.row(0);
  A.row(3) = b.y() * P2.row(2) - P2.row(1);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d X = svd.matrixV().col(3);
  return X.head<3>() / X(3);
}

/// Picks the (R, t) factorisation of E that puts the most points in front of both cameras.
inline PoseEstimate decompose_essential(const Eigen::Matrix3d& E, const Points& a, const Points& b,
                                        const std::vector<int>& idx) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(E, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
  if (U.determinant() < 0) U.col(2) *= -1;
  if (V.determinant() < 0) V.col(2) *= -1;
  Eigen::Matrix3d W;
  W << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Eigen::Matrix3d Rs[2] = {U * W * V.transpose(), U * W.transpose() * V.transpose()};
  const Eigen::Vector3d ts[2] = {U.col(2), -U.col(2)};
  PoseEstimate best;
  int best_count = -1;
  for (const auto& R : Rs)
    for (const auto& t : ts) {
      int count = 0;
      for (int i : idx) {
        const Eigen::Vector3d X = triangulate(R, t, a[i], b[i]);
        if (X.allFinite() && X.z() > 0 && (R * X + t).z() > 0) ++count;
      }
      if (count > best_count) {
        best_count = count;
        best.R = R;
        best.t = t;
      }
    }
  return best;
}

/// Generic seeded RANSAC loop. Fit(idx) -> optional model, Err(model, i) -> residual.
template <class Model, class Fit, class Err>
std::optional<std::pair<Model, std::vector<bool>>> ransac(int n, int sample_size, const RansacOptions& opt, Fit fit,
                                                          Err err, double threshold) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::optional<Model> best;
  int best_count = 0;
  long needed = opt.max_iterations;
  std::vector<int> sample(sample_size);
  for (long it = 0; it < std::min<long>(needed, opt.max_iterations); ++it) {
    for (int k = 0; k < sample_size; ++k) {
      int c;
      do c = pick(rng);
      while (std::find(sample.begin(), sample.begin() + k, c) != sample.begin() + k);
      sample[k] = c;
    }
    const auto model = fit(sample);
    if (!model) continue;
    int count = 0;
    for (int i = 0; i < n; ++i) count += err(*model, i) < threshold;
    if (count > best_count) {
      best_count = count;
      best = model;
      const double w = static_cast<double>(count) / n;
      const double p_fail = 1.0 - std::pow(w, sample_size);
      if (p_fail <= 1e-12) needed = it + 1;
      else needed = static_cast<long>(std::ceil(std::log(1.0 - opt.confidence) / std::log(p_fail)));
    }
  }
  if (!best || best_count < sample_size) return std::nullopt;
  // Two rounds of least-squares refitting on the consensus set.
  Model model = *best;
  std::vector<bool> inl(n);
  for (int round = 0; round < 2; ++round) {
    std::vector<int> idx;
    for (int i = 0; i < n; ++i)
      if ((inl[i] = err(model, i) < threshold)) idx.push_back(i);
    if (static_cast<int>(idx.size()) < sample_size) break;
    if (auto refit = fit(idx)) model = *refit;
  }
  for (int i = 0; i < n; ++i) inl[i] = err(model, i) < threshold;
  return std::make_pair(model, inl);
}

}  // namespace detail

/// Robust homography mapping A pixels to B pixels. Needs at least 4 matches.
inline HomographyEstimate estimate_homography(const FineMatchSet& matches, const RansacOptions& opt) {
  const int n = static_cast<int>(matches.size());
  if (n < 4) throw EstimationFailure("homography needs >= 4 matches, got " + std::to_string(n));
  detail::Points a(n), b(n);
  for (int i = 0; i < n; ++i) {
    a[i] = {matches.entries[i].xa, matches.entries[i].ya};
    b[i] = {matches.entries[i].xb, matches.entries[i].yb};
  }
  auto res = detail::ransac<Eigen::Matrix3d>(
      n, 4, opt, [&](const std::vector<int>& idx) { return detail::fit_homography(a, b, idx); },
      [&](const Eigen::Matrix3d& H, int i) { return detail::transfer_error(H, a[i], b[i]); }, opt.threshold_px);
  if (!res) throw EstimationFailure("no homography consensus");
  return {res->first, res->second};
}

/// Relative pose (X_b = R X_a + t, |t| = 1) from pixel matches and intrinsics.
/// The inlier threshold is given in pixels and scaled by the mean focal length.
inline PoseEstimate estimate_pose(const FineMatchSet& matches, const Eigen::Matrix3d& K_a, const Eigen::Matrix3d& K_b,
                                  const RansacOptions& opt) {
  const int n = static_cast<int>(matches.size());
  if (n < 8) throw EstimationFailure("pose needs >= 8 matches, got " + std::to_string(n));
  const Eigen::Matrix3d Ka_inv = K_a.inverse(), Kb_inv = K_b.inverse();
  detail::Points a(n), b(n);
  for (int i = 0; i < n; ++i) {
    a[i] = (Ka_inv * Eigen::Vector3d(matches.entries[i].xa, matches.entries[i].ya, 1)).hnormalized();
    b[i] = (Kb_inv * Eigen::Vector3d(matches.entries[i].xb, matches.entries[i].yb, 1)).hnormalized();
  }
  const double focal = (K_a(0, 0) + K_a(1, 1) + K_b(0, 0) + K_b(1, 1)) / 4.0;
  const double thr = opt.threshold_px / focal;
  auto res = detail::ransac<Eigen::Matrix3d>(
      n, 8, opt, [&](const std::vector<int>& idx) { return detail::fit_essential(a, b, idx); },
      [&](const Eigen::Matrix3d& E, int i) { return std::sqrt(detail::sampson_sq(E, a[i], b[i])); }, thr);
  if (!res) throw EstimationFailure("no essential-matrix consensus");
  std::vector<int> idx;
  for (int i = 0; i < n; ++i)
    if (res->second[i]) idx.push_back(i);
  PoseEstimate pose = detail::decompose_essential(res->first, a, b, idx);
  pose.inliers = res->second;
  return pose;
}

}  // namespace imd::eval
