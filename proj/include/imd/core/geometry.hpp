#pragma once

#include <cmath>
#include <optional>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include "imd/core/types.hpp"

namespace imd {

/// Projective image of p under H; nullopt when the point maps to (or behind) infinity.
inline std::optional<Point2> apply_homography(const Eigen::Matrix3d& H, Point2 p) {
  const Eigen::Vector3d q = H * Eigen::Vector3d(p.x, p.y, 1.0);
  if (!(q.z() > 1e-12)) return std::nullopt;
  return Point2{q.x() / q.z(), q.y() / q.z()};
}

inline bool in_image(Point2 p, int width, int height) {
  return p.x >= -0.5 && p.y >= -0.5 && p.x < width - 0.5 && p.y < height - 0.5;
}

inline Eigen::Matrix3d tensor_to_mat3(const Tensor<double>& t) {
  if (t.numel() != 9) throw ShapeError("expected a 3x3 tensor, got " + shape_str(t.shape));
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = t.data[i * 3 + j];
  return m;
}

inline Tensor<double> mat3_to_tensor(const Eigen::Matrix3d& m) {
  Tensor<double> t({3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t.data[i * 3 + j] = m(i, j);
  return t;
}

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

}  // namespace imd
