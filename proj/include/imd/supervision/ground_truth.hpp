#pragma once

// Ground-truth correspondences between coarse grids, from posed depth or from
// a known homography.

#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "imd/core/geometry.hpp"
#include "imd/core/types.hpp"

namespace imd::supervision {

struct Dims {
  int width = 0;
  int height = 0;
};

struct GtMatches {
  std::vector<std::pair<int, int>> coarse_pairs;  // (idx_a, idx_b)
  std::vector<Point2> fine_targets;               // warped A cell centre, per pair
  /// Maps an arbitrary A pixel into B, or nullopt when it has no valid correspondence.
  std::function<std::optional<Point2>(Point2)> warp;
  int stride = kCoarseStride;
  Dims dims_a, dims_b;

  std::size_t size() const { return coarse_pairs.size(); }
  bool empty() const { return coarse_pairs.empty(); }
  int grid_w_a() const { return dims_a.width / stride; }
  int grid_h_a() const { return dims_a.height / stride; }
  int grid_w_b() const { return dims_b.width / stride; }
  int grid_h_b() const { return dims_b.height / stride; }
};

namespace detail {

inline GtMatches sample_grid(const std::function<std::optional<Point2>(Point2)>& warp, int stride, Dims a, Dims b) {
  GtMatches gt;
  gt.warp = warp;
  gt.stride = stride;
  gt.dims_a = a;
  gt.dims_b = b;
  const int gw = a.width / stride, gh = a.height / stride;
  for (int idx = 0; idx < gw * gh; ++idx) {
    const auto pb = warp(cell_center(idx, gw, stride));
    if (!pb) continue;
    const long idx_b = containing_cell(*pb, b.width / stride, b.height / stride, stride);
    if (idx_b < 0) continue;
    gt.coarse_pairs.emplace_back(idx, static_cast<int>(idx_b));
    gt.fine_targets.push_back(*pb);
  }
  return gt;
}

inline float depth_at(const Tensor<float>& depth, Point2 p) {
  const int x = static_cast<int>(std::floor(p.x + 0.5)), y = static_cast<int>(std::floor(p.y + 0.5));
  if (x < 0 || y < 0 || y >= depth.dim(0) || x >= depth.dim(1)) return 0.0f;
  return depth.at(y, x);
}

}  // namespace detail

/// Warps coarse cell centres of A into B through depth and relative pose, with
/// an optional depth-consistency occlusion check against B's depth.
inline GtMatches warp_grid(const CameraFrame& frame_a, const CameraFrame& frame_b, int stride,
                           std::optional<Dims> dims_b = std::nullopt, double occlusion_tolerance = 0.2) {
  if (!frame_a.depth) throw ConfigError("warp_grid needs depth for frame A");
  const Dims a{frame_a.depth->dim(1), frame_a.depth->dim(0)};
  Dims b;
  if (dims_b) b = *dims_b;
  else if (frame_b.depth) b = {frame_b.depth->dim(1), frame_b.depth->dim(0)};
  else throw ConfigError("warp_grid needs B's image size when B has no depth");

  const Eigen::Matrix3d Ka_inv = frame_a.K.inverse();
  const bool same_camera = frame_a.K == frame_b.K && frame_a.R == frame_b.R && frame_a.t == frame_b.t;
  auto warp = [=](Point2 p) -> std::optional<Point2> {
    const double d = detail::depth_at(*frame_a.depth, p);
    if (!(d > 0)) return std::nullopt;
    // identical cameras map every pixel to itself
    if (same_camera) {
      if (frame_b.depth && in_image(p, b.width, b.height)) {
        const double db = detail::depth_at(*frame_b.depth, p);
        if (!(db > 0) || std::abs(db - d) > occlusion_tolerance * d) return std::nullopt;
      }
      return p;
    }
    const Eigen::Vector3d cam_a = d * (Ka_inv * Eigen::Vector3d(p.x, p.y, 1.0));
    const Eigen::Vector3d world = frame_a.R.transpose() * (cam_a - frame_a.t);
    const Eigen::Vector3d cam_b = frame_b.R * world + frame_b.t;
    if (!(cam_b.z() > 1e-9)) return std::nullopt;
    const Eigen::Vector3d pix = frame_b.K * cam_b;
    const Point2 pb{pix.x() / pix.z(), pix.y() / pix.z()};
    if (frame_b.depth && in_image(pb, b.width, b.height)) {
      const double db = detail::depth_at(*frame_b.depth, pb);
      if (!(db > 0) || std::abs(db - cam_b.z()) > occlusion_tolerance * cam_b.z()) return std::nullopt;
    }
    return pb;
  };
  return detail::sample_grid(warp, stride, a, b);
}

/// Warps coarse cell centres of A into B through a homography.
inline GtMatches warp_homography(const Eigen::Matrix3d& H, int stride, Dims dims_a, Dims dims_b) {
  if (!(std::abs(H.determinant()) > 1e-12 * std::pow(H.cwiseAbs().maxCoeff(), 3)))
    throw ConfigError("homography is singular");
  auto warp = [H](Point2 p) { return apply_homography(H, p); };
  return detail::sample_grid(warp, stride, dims_a, dims_b);
}

inline GtMatches warp_homography(const Eigen::Matrix3d& H, int stride, Dims dims) {
  return warp_homography(H, stride, dims, dims);
}

}  // namespace imd::supervision
