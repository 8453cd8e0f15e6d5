#pragma once

// Per-pair evaluation records for the three protocols.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "imd/eval/estimators.hpp"
#include "imd/eval/metrics.hpp"
#include "imd/pipeline/model.hpp"

namespace imd::pipeline {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct HomographyPairResult {
  std::string id;
  int n_coarse = 0;
  int n_coarse_correct = 0;  // warp(centre_a) within one cell (Chebyshev, pixels) of centre_b
  int n_fine = 0;
  double corner_error = kInf;
  bool failed = false;
  std::string failure;
};

inline HomographyPairResult evaluate_homography_pair(const MatchResult& m, const Eigen::Matrix3d& H_gt, int width_a,
                                                     int height_a, const eval::RansacOptions& ransac) {
  HomographyPairResult r;
  r.n_coarse = static_cast<int>(m.coarse.size());
  for (const auto& c : m.coarse) {
    const auto pb = apply_homography(H_gt, cell_center(c.idx_a, m.grid_w_a, kCoarseStride));
    const Point2 cb = cell_center(c.idx_b, m.grid_w_b, kCoarseStride);
    if (pb && std::max(std::abs(pb->x - cb.x), std::abs(pb->y - cb.y)) <= kCoarseStride) ++r.n_coarse_correct;
  }
  r.n_fine = static_cast<int>(m.fine.size());
  try {
    const auto est = eval::estimate_homography(m.fine, ransac);
    r.corner_error = eval::corner_error(est.H, H_gt, width_a, height_a);
  } catch (const EstimationFailure& e) {
    r.failed = true;
    r.failure = e.what();
  }
  return r;
}

struct PosePairResult {
  std::string id;
  int n_fine = 0;
  eval::PoseError error;
  double value = kInf;
  bool failed = false;
  std::string failure;
};

/// Relative pose X_b = R X_a + t between two world-to-camera frames.
inline std::pair<Eigen::Matrix3d, Eigen::Vector3d> relative_pose(const CameraFrame& a, const CameraFrame& b) {
  const Eigen::Matrix3d R = b.R * a.R.transpose();
  return {R, b.t - R * a.t};
}

inline PosePairResult evaluate_pose_pair(const FineMatchSet& fine, const CameraFrame& a, const CameraFrame& b,
                                         const eval::RansacOptions& ransac) {
  PosePairResult r;
  r.n_fine = static_cast<int>(fine.size());
  try {
    const auto est = eval::estimate_pose(fine, a.K, b.K, ransac);
    const auto [R, t] = relative_pose(a, b);
    r.error = eval::pose_error(est.R, est.t, R, t);
    r.value = r.error.value();
  } catch (const EstimationFailure& e) {
    r.failed = true;
    r.failure = e.what();
  }
  return r;
}

}  // namespace imd::pipeline
