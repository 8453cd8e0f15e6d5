#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "imd/core/geometry.hpp"
#include "imd/core/types.hpp"

namespace imd::eval {

// ---------------------------------------------------------------- IMIM

struct ImimReport {
  int n_source_hits = 0;  // N
  int n_both_hits = 0;    // M
  double score = 0;       // 100 M / N
  bool valid = false;     // false when N == 0
};

namespace detail {

inline bool mask_contains(const Tensor<std::uint8_t>& mask, double x, double y) {
  const long ix = std::lround(x), iy = std::lround(y);
  if (ix < 0 || iy < 0 || iy >= mask.dim(0) || ix >= mask.dim(1)) return false;
  return mask.at(static_cast<int>(iy), static_cast<int>(ix)) != 0;
}

}  // namespace detail

/// Share of matches starting in the source instance mask that land in the target
/// instance mask. Subpixel coordinates are rounded to the nearest pixel.
inline ImimReport imim_score(const FineMatchSet& matches, const InstanceMaskPair& masks,
                             std::optional<std::pair<int, int>> image_a_hw = std::nullopt,
                             std::optional<std::pair<int, int>> image_b_hw = std::nullopt) {
  auto check = [](const Tensor<std::uint8_t>& m, const std::optional<std::pair<int, int>>& hw, const char* which) {
    if (m.rank() != 2) throw ShapeError(std::string(which) + " mask must be rank 2");
    if (hw && (m.dim(0) != hw->first || m.dim(1) != hw->second))
      throw ShapeError(std::string(which) + " mask " + shape_str(m.shape) + " does not match its image");
  };
  check(masks.source_mask, image_a_hw, "source");
  check(masks.target_mask, image_b_hw, "target");
  ImimReport r;
  for (const auto& m : matches.entries) {
    if (!detail::mask_contains(masks.source_mask, m.xa, m.ya)) continue;
    ++r.n_source_hits;
    if (detail::mask_contains(masks.target_mask, m.xb, m.yb)) ++r.n_both_hits;
  }
  r.valid = r.n_source_hits > 0;
  r.score = r.valid ? 100.0 * r.n_both_hits / r.n_source_hits : 0.0;
  return r;
}

struct ImimAggregate {
  double mean_of_ratios = 0;  // average of per-pair scores over valid pairs
  double ratio_of_sums = 0;   // 100 * sum M / sum N
  int valid_pairs = 0;
  int total_pairs = 0;
};

inline ImimAggregate aggregate_imim(const std::vector<ImimReport>& reports) {
  ImimAggregate a;
  a.total_pairs = static_cast<int>(reports.size());
  long m = 0, n = 0;
  double s = 0;
  for (const auto& r : reports) {
    if (!r.valid) continue;
    ++a.valid_pairs;
    s += r.score;
    m += r.n_both_hits;
    n += r.n_source_hits;
  }
  a.mean_of_ratios = a.valid_pairs ? s / a.valid_pairs : 0.0;
  a.ratio_of_sums = n ? 100.0 * m / n : 0.0;
  return a;
}

// ---------------------------------------------------------------- pose error

struct PoseError {
  double rotation_deg = 0;
  double translation_deg = 0;
  bool degenerate_translation = false;
  double value() const { return std::max(rotation_deg, translation_deg); }
};

inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Angular rotation error and sign-invariant angle between translation directions.
inline PoseError pose_error(const Eigen::Matrix3d& R_est, const Eigen::Vector3d& t_est, const Eigen::Matrix3d& R_gt,
                            const Eigen::Vector3d& t_gt) {
  PoseError e;
  const double c = std::clamp(((R_est.transpose() * R_gt).trace() - 1.0) / 2.0, -1.0, 1.0);
  e.rotation_deg = rad2deg(std::acos(c));
  const double n1 = t_est.norm(), n2 = t_gt.norm();
  if (n1 < 1e-12 || n2 < 1e-12) {
    e.degenerate_translation = true;
    e.translation_deg = 0;
  } else {
    const double ct = std::clamp(std::abs(t_est.dot(t_gt)) / (n1 * n2), 0.0, 1.0);
    e.translation_deg = rad2deg(std::acos(ct));
  }
  return e;
}

// ---------------------------------------------------------------- corner error

/// Mean distance between the four image corners mapped by H_est and by H_gt.
inline double corner_error(const Eigen::Matrix3d& H_est, const Eigen::Matrix3d& H_gt, int width, int height) {
  const Point2 corners[4] = {{0, 0}, {width - 1.0, 0}, {0, height - 1.0}, {width - 1.0, height - 1.0}};
  double total = 0;
  for (const auto& c : corners) {
    const auto a = apply_homography(H_est, c);
    const auto b = apply_homography(H_gt, c);
    if (!a || !b) return std::numeric_limits<double>::infinity();
    total += std::hypot(a->x - b->x, a->y - b->y);
  }
  return total / 4.0;
}

// ---------------------------------------------------------------- AUC

/// Normalised area under the cumulative recall curve r(e) = #{errors <= e} / n on
/// [0, T], integrated exactly. Failures enter as +infinity.
inline std::vector<double> auc(std::vector<double> errors, const std::vector<double>& thresholds) {
  if (errors.empty()) throw Error("auc needs at least one error value");
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1])) throw ConfigError("thresholds must be strictly increasing");
  std::sort(errors.begin(), errors.end());
  const double n = static_cast<double>(errors.size());
  std::vector<double> out;
  for (double T : thresholds) {
    double area = 0;
    for (double e : errors) {
      if (e < 0) throw Error("errors must be non-negative");
      if (e >= T) break;
      area += (T - e);
    }
    out.push_back(area / (n * T));
  }
  return out;
}

}  // namespace imd::eval
