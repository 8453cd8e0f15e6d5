#pragma once

// Procedural training and evaluation pairs: homography warps of a continuous
// texture, multi-instance scenes with per-instance masks, and ray-cast posed
// RGB-D pairs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "imd/core/geometry.hpp"
#include "imd/core/types.hpp"

namespace imd::data {

enum class TextureMode { Noise, Shapes, Mixed };

inline TextureMode texture_mode_from_string(const std::string& s) {
  if (s == "noise") return TextureMode::Noise;
  if (s == "shapes") return TextureMode::Shapes;
  if (s == "mixed") return TextureMode::Mixed;
  throw ConfigError("unknown texture mode '" + s + "' (expected noise|shapes|mixed)");
}

using Rgb = std::array<double, 3>;

namespace detail {

inline std::uint64_t hash64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline double lattice(std::uint64_t seed, long ix, long iy, long iz = 0) {
  std::uint64_t h = hash64(seed ^ hash64(static_cast<std::uint64_t>(ix) * 0x8DA6B343ull ^
                                         hash64(static_cast<std::uint64_t>(iy) * 0xD8163841ull ^
                                                static_cast<std::uint64_t>(iz) * 0xCB1AB31Full)));
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

inline double smooth(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

/// Smoothly interpolated lattice noise in [0, 1] with unit lattice spacing.
inline double value_noise(std::uint64_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const long ix = static_cast<long>(fx), iy = static_cast<long>(fy);
  const double u = smooth(x - fx), v = smooth(y - fy);
  const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
  return (a * (1 - u) + b * u) * (1 - v) + (c * (1 - u) + d * u) * v;
}

inline double value_noise3(std::uint64_t seed, double x, double y, double z) {
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const long ix = static_cast<long>(fx), iy = static_cast<long>(fy), iz = static_cast<long>(fz);
  const double u = smooth(x - fx), v = smooth(y - fy), w = smooth(z - fz);
  double acc = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double wt = (dx ? u : 1 - u) * (dy ? v : 1 - v) * (dz ? w : 1 - w);
        acc += wt * lattice(seed, ix + dx, iy + dy, iz + dz);
      }
  return acc;
}

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

/// Continuous colour texture on the plane: multi-octave value noise under a
/// layer of anti-aliased geometric shapes.
class PlaneTexture {
 public:
  struct Shape {
    int kind = 0;  // 0 disc, 1 rotated rectangle, 2 triangle
    double cx = 0, cy = 0, size = 1, aspect = 1, angle = 0;
    Rgb color{};
  };

  PlaneTexture(std::uint64_t seed, TextureMode mode, double extent_lo, double extent_hi) : seed_(seed), mode_(mode) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& c : base_) c = 60 + 140 * u(rng);
    if (mode != TextureMode::Noise) {
      const double area = (extent_hi - extent_lo) * (extent_hi - extent_lo);
      const int n = static_cast<int>(area / (mode == TextureMode::Shapes ? 90.0 : 160.0));
      for (int i = 0; i < n; ++i) {
        Shape s;
        s.kind = static_cast<int>(u(rng) * 3) % 3;
        s.cx = extent_lo + (extent_hi - extent_lo) * u(rng);
        s.cy = extent_lo + (extent_hi - extent_lo) * u(rng);
        s.size = 2.5 + 6.0 * u(rng);
        s.aspect = 0.5 + u(rng);
        s.angle = std::numbers::pi * u(rng);
        for (auto& c : s.color) c = 255 * u(rng);
        shapes_.push_back(s);
      }
    }
  }

  Rgb sample(double x, double y) const {
    Rgb out = base_;
    if (mode_ != TextureMode::Shapes) {
      const double spacing[3] = {14.0, 6.0, 2.5};
      const double amp[3] = {70.0, 45.0, 25.0};
      for (int o = 0; o < 3; ++o)
        for (int c = 0; c < 3; ++c) {
          const double n = detail::value_noise(seed_ + 101 * (o + 1) + 7 * c, x / spacing[o], y / spacing[o]);
          out[c] += amp[o] * (2 * n - 1);
        }
    } else {
      const double n = detail::value_noise(seed_ + 5, x / 10.0, y / 10.0);
      for (auto& c : out) c += 40 * (2 * n - 1);
    }
    for (const auto& s : shapes_) {
      const double a = coverage(s, x, y);
      if (a <= 0) continue;
      for (int c = 0; c < 3; ++c) out[c] = out[c] * (1 - a) + s.color[c] * a;
    }
    return out;
  }

 private:
  static double coverage(const Shape& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    if (std::abs(dx) > 2 * s.size + 1 || std::abs(dy) > 2 * s.size + 1) return 0;
    const double ca = std::cos(s.angle), sa = std::sin(s.angle);
    const double lx = ca * dx + sa * dy, ly = -sa * dx + ca * dy;
    double sd = 0;  // signed distance, negative inside
    switch (s.kind) {
      case 0: sd = std::hypot(lx, ly / s.aspect) - s.size; break;
      case 1: sd = std::max(std::abs(lx) - s.size, std::abs(ly) - s.size * s.aspect); break;
      default: {
        // equilateral-ish triangle via three half-planes
        const double r = s.size;
        double m = -1e9;
        for (int k = 0; k < 3; ++k) {
          const double th = 2 * std::numbers::pi * k / 3 + std::numbers::pi / 2;
          m = std::max(m, lx * std::cos(th) + ly * std::sin(th) - r * 0.5);
        }
        sd = m;
      }
    }
    return std::clamp(0.5 - sd, 0.0, 1.0);
  }

  std::uint64_t seed_;
  TextureMode mode_;
  Rgb base_{};
  std::vector<Shape> shapes_;
};

struct Photometric {
  double contrast = 1;
  double brightness = 0;
  Rgb apply(Rgb v) const {
    for (auto& c : v) c = contrast * (c - 128) + 128 + brightness;
    return v;
  }
};

inline Photometric random_photometric(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.8, 1.2), b(-20, 20);
  Photometric p;
  p.contrast = c(rng);
  p.brightness = b(rng);
  return p;
}

/// Renders an image whose pixel (x, y) shows colour(x, y), 2x2 supersampled.
template <class F>
Image render(int width, int height, const std::string& id, F colour) {
  Image img(height, width, id);
  const double offs[2] = {-0.25, 0.25};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      Rgb acc{};
      for (double oy : offs)
        for (double ox : offs) {
          const Rgb v = colour(x + ox, y + oy);
          for (int c = 0; c < 3; ++c) acc[c] += v[c] / 4;
        }
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = detail::to_u8(acc[c]);
    }
  return img;
}

// ---------------------------------------------------------------- homography pairs

/// Fraction of a 16 x 16 grid of A points that H maps inside B.
inline double overlap_fraction(const Eigen::Matrix3d& H, int width, int height) {
  int inside = 0;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      const Point2 p{(j + 0.5) * width / 16.0 - 0.5, (i + 0.5) * height / 16.0 - 0.5};
      const auto q = apply_homography(H, p);
      inside += q && in_image(*q, width, height);
    }
  return inside / 256.0;
}

/// Exact homography through four point correspondences.
inline Eigen::Matrix3d homography_from_corners(const std::array<Point2, 4>& src, const std::array<Point2, 4>& dst) {
  Eigen::Matrix<double, 8, 8> A;
  Eigen::Matrix<double, 8, 1> rhs;
  for (int i = 0; i < 4; ++i) {
    const double x = src[i].x, y = src[i].y, u = dst[i].x, v = dst[i].y;
    A.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    A.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    rhs(2 * i) = u;
    rhs(2 * i + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = A.fullPivLu().solve(rhs);
  Eigen::Matrix3d H;
  H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1;
  return H;
}

/// Random homography about the image centre: rotation up to 30 deg, scale in
/// [0.8, 1.25], translation and corner jitter, all scaled by `magnitude` in [0, 1].
inline Eigen::Matrix3d random_homography(std::mt19937_64& rng, double magnitude, int width, int height) {
  std::uniform_real_distribution<double> u(-1, 1), u01(0, 1);
  const double cx = width / 2.0 - 0.5, cy = height / 2.0 - 0.5;
  const double theta = magnitude * u(rng) * std::numbers::pi / 6;
  const double log_s = std::log(0.8) + (std::log(1.25) - std::log(0.8)) * u01(rng);
  const double s = std::exp(magnitude * log_s);
  const double tx = magnitude * 0.15 * width * u(rng), ty = magnitude * 0.15 * height * u(rng);
  Eigen::Matrix3d C, Ci, S;
  C << 1, 0, cx, 0, 1, cy, 0, 0, 1;
  Ci << 1, 0, -cx, 0, 1, -cy, 0, 0, 1;
  S << s * std::cos(theta), -s * std::sin(theta), tx, s * std::sin(theta), s * std::cos(theta), ty, 0, 0, 1;
  const Eigen::Matrix3d sim = C * S * Ci;
  const std::array<Point2, 4> corners = {
      Point2{-0.5, -0.5}, Point2{width - 0.5, -0.5}, Point2{-0.5, height - 0.5}, Point2{width - 0.5, height - 0.5}};
  std::array<Point2, 4> jittered;
  const double jit = magnitude * 0.08 * std::min(width, height);
  for (int i = 0; i < 4; ++i) jittered[i] = {corners[i].x + jit * u(rng), corners[i].y + jit * u(rng)};
  return sim * homography_from_corners(corners, jittered);
}

struct WarpPair {
  Image a, b;
  Eigen::Matrix3d H = Eigen::Matrix3d::Identity();  // A pixels -> B pixels
  double overlap = 1;
};

/// Warped texture pair with exact ground-truth homography. Retries up to 64
/// times for >= 50% overlap, then halves the magnitude.
inline WarpPair gen_synthetic_pair(std::uint64_t seed, TextureMode mode, double warp_magnitude, int width = 64,
                                   int height = 64) {
  if (!(warp_magnitude >= 0 && warp_magnitude <= 1)) throw ConfigError("warp_magnitude must lie in [0, 1]");
  std::mt19937_64 rng(detail::hash64(seed));
  const double ext = std::max(width, height);
  PlaneTexture tex(detail::hash64(seed + 1), mode, -0.5 * ext, 1.5 * ext);
  WarpPair out;
  double m = warp_magnitude;
  for (int attempt = 0;; ++attempt) {
    out.H = m > 0 ? random_homography(rng, m, width, height) : Eigen::Matrix3d::Identity();
    out.overlap = overlap_fraction(out.H, width, height);
    if (out.overlap >= 0.5 && std::abs(out.H.determinant()) > 1e-9) break;
    if (attempt % 64 == 63) m *= 0.5;
  }
  const Photometric pa = random_photometric(rng), pb = random_photometric(rng);
  const Eigen::Matrix3d Hinv = out.H.inverse();
  out.a = render(width, height, "a", [&](double x, double y) { return pa.apply(tex.sample(x, y)); });
  out.b = render(width, height, "b", [&](double x, double y) {
    const Eigen::Vector3d q = Hinv * Eigen::Vector3d(x, y, 1);
    return pb.apply(tex.sample(q.x() / q.z(), q.y() / q.z()));
  });
  return out;
}

// ---------------------------------------------------------------- multi-instance pairs

struct MultiInstancePair {
  Image a, b;
  InstanceMaskPair masks;  // designated instance
  std::vector<Tensor<std::uint8_t>> instance_masks_a, instance_masks_b;
  std::vector<Point2> positions_a, positions_b;
  int designated = 0;
  Eigen::Matrix3d instance_h = Eigen::Matrix3d::Identity();  // designated instance motion A -> B
};

/// A textured sprite repeated n times on a textured background; every instance
/// moves by its own translation between A and B while the background shifts
/// by a small global translation.
inline MultiInstancePair gen_multi_instance_pair(std::uint64_t seed, int n_instances, int width = 64, int height = 64) {
  if (n_instances < 2) throw ConfigError("multi-instance pairs need n_instances >= 2");
  std::mt19937_64 rng(detail::hash64(seed ^ 0x5157ull));
  std::uniform_real_distribution<double> u(0, 1);
  const double ext = std::max(width, height);
  PlaneTexture background(detail::hash64(seed + 11), TextureMode::Mixed, -0.5 * ext, 1.5 * ext);
  PlaneTexture sprite_tex(detail::hash64(seed + 12), TextureMode::Noise, -16, 16);
  const double radius = 0.14 * std::min(width, height) + 0.04 * std::min(width, height) * u(rng);
  const int lobes = 3 + static_cast<int>(u(rng) * 3);
  const double lobe_amp = 0.15 * u(rng);
  auto inside = [&](double lx, double ly) {
    const double r = std::hypot(lx, ly), th = std::atan2(ly, lx);
    return r <= radius * (1 + lobe_amp * std::cos(lobes * th));
  };
  auto overlap_ok = [&](const std::vector<Point2>& pos) {
    // area-based overlap between disc bounds, at most 20% of one instance
    const double area = std::numbers::pi * radius * radius;
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t j = i + 1; j < pos.size(); ++j) {
        const double d = std::hypot(pos[i].x - pos[j].x, pos[i].y - pos[j].y);
        if (d >= 2 * radius) continue;
        const double r = radius;
        const double lens = 2 * r * r * std::acos(d / (2 * r)) - 0.5 * d * std::sqrt(std::max(0.0, 4 * r * r - d * d));
        if (lens > 0.2 * area) return false;
      }
    return true;
  };
  MultiInstancePair out;
  const double margin = radius + 1;
  const Point2 bg_shift{(u(rng) * 2 - 1) * 3, (u(rng) * 2 - 1) * 3};
  for (int attempt = 0;; ++attempt) {
    if (attempt > 10000) throw ConfigError("could not place instances without excessive overlap");
    out.positions_a.clear();
    out.positions_b.clear();
    for (int i = 0; i < n_instances; ++i) {
      const Point2 pa{margin + (width - 1 - 2 * margin) * u(rng), margin + (height - 1 - 2 * margin) * u(rng)};
      const Point2 d{(u(rng) * 2 - 1) * 5, (u(rng) * 2 - 1) * 5};
      Point2 pb{std::clamp(pa.x + d.x, margin, width - 1 - margin), std::clamp(pa.y + d.y, margin, height - 1 - margin)};
      out.positions_a.push_back(pa);
      out.positions_b.push_back(pb);
    }
    if (overlap_ok(out.positions_a) && overlap_ok(out.positions_b)) break;
  }
  out.designated = static_cast<int>(u(rng) * n_instances) % n_instances;
  const Photometric pa = random_photometric(rng), pb = random_photometric(rng);

  // topmost instance (highest index) owns a pixel
  auto owner = [&](const std::vector<Point2>& pos, double x, double y) {
    for (int i = n_instances - 1; i >= 0; --i)
      if (inside(x - pos[i].x, y - pos[i].y)) return i;
    return -1;
  };
  auto colour = [&](const std::vector<Point2>& pos, const Point2& shift, const Photometric& ph) {
    return [&, shift](double x, double y) {
      const int i = owner(pos, x, y);
      if (i >= 0) return ph.apply(sprite_tex.sample(x - pos[i].x, y - pos[i].y));
      return ph.apply(background.sample(x - shift.x, y - shift.y));
    };
  };
  out.a = render(width, height, "a", colour(out.positions_a, Point2{0, 0}, pa));
  out.b = render(width, height, "b", colour(out.positions_b, bg_shift, pb));

  auto masks_for = [&](const std::vector<Point2>& pos) {
    std::vector<Tensor<std::uint8_t>> m(n_instances, Tensor<std::uint8_t>({height, width}));
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (const int i = owner(pos, x, y); i >= 0) m[i].at(y, x) = 1;
    return m;
  };
  out.instance_masks_a = masks_for(out.positions_a);
  out.instance_masks_b = masks_for(out.positions_b);
  const int d = out.designated;
  out.masks.source_mask = out.instance_masks_a[d];
  out.masks.target_mask = out.instance_masks_b[d];
  out.masks.category = "sprite";
  out.masks.validate();
  out.instance_h << 1, 0, out.positions_b[d].x - out.positions_a[d].x, 0, 1, out.positions_b[d].y - out.positions_a[d].y,
      0, 0, 1;

  // the designated instance's A centroid must land inside its B mask
  double sx = 0, sy = 0, n = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (out.masks.source_mask.at(y, x)) sx += x, sy += y, ++n;
  const auto c = apply_homography(out.instance_h, {sx / n, sy / n});
  const long cx = std::lround(c->x), cy = std::lround(c->y);
  if (cx < 0 || cy < 0 || cx >= width || cy >= height || !out.masks.target_mask.at(cy, cx))
    return gen_multi_instance_pair(detail::hash64(seed + 0x9999), n_instances, width, height);
  return out;
}

// ---------------------------------------------------------------- posed RGB-D pairs

struct PosedPair {
  Image a, b;
  CameraFrame frame_a, frame_b;
};

/// Ray-cast scene (tilted back plane plus spheres) under a solid 3-D texture,
/// seen from two cameras. Frame A carries its depth map; B carries one too.
inline PosedPair gen_posed_pair(std::uint64_t seed, int width = 64, int height = 64) {
  std::mt19937_64 rng(detail::hash64(seed ^ 0xA11CEull));
  std::uniform_real_distribution<double> u(-1, 1);
  const double f = 1.1 * width;
  Eigen::Matrix3d K;
  K << f, 0, width / 2.0 - 0.5, 0, f, height / 2.0 - 0.5, 0, 0, 1;

  struct Sphere {
    Eigen::Vector3d c;
    double r;
  };
  const Eigen::Vector3d plane_n = Eigen::Vector3d(0.25 * u(rng), 0.25 * u(rng), -1).normalized();
  const Eigen::Vector3d plane_p(0, 0, 4.0 + 0.5 * u(rng));
  std::vector<Sphere> spheres;
  for (int i = 0; i < 4; ++i)
    spheres.push_back({Eigen::Vector3d(0.9 * u(rng), 0.9 * u(rng), 2.6 + 0.5 * u(rng)), 0.3 + 0.12 * u(rng)});
  const std::uint64_t tex_seed = detail::hash64(seed + 77);

  auto hit = [&](const Eigen::Vector3d& o, const Eigen::Vector3d& d, Eigen::Vector3d& X, int& obj) {
    double best = std::numeric_limits<double>::infinity();
    obj = -1;
    const double denom = plane_n.dot(d);
    if (std::abs(denom) > 1e-9) {
      const double s = plane_n.dot(plane_p - o) / denom;
      if (s > 1e-6) best = s;
    }
    for (std::size_t i = 0; i < spheres.size(); ++i) {
      const Eigen::Vector3d oc = o - spheres[i].c;
      const double b = oc.dot(d), c = oc.squaredNorm() - spheres[i].r * spheres[i].r;
      const double disc = b * b - c;
      if (disc < 0) continue;
      const double s = -b - std::sqrt(disc);
      if (s > 1e-6 && s < best) {
        best = s;
        obj = static_cast<int>(i);
      }
    }
    if (!std::isfinite(best)) return false;
    X = o + best * d;
    return true;
  };
  auto solid = [&](const Eigen::Vector3d& X, int obj) {
    Rgb out{};
    const double spacing[3] = {0.35, 0.15, 0.06};
    const double amp[3] = {70, 45, 25};
    for (int c = 0; c < 3; ++c) {
      out[c] = 128 + (obj >= 0 ? 30.0 * ((obj + c) % 3 - 1) : 0.0);
      for (int o = 0; o < 3; ++o)
        out[c] += amp[o] * (2 * detail::value_noise3(tex_seed + 31 * o + c, X.x() / spacing[o], X.y() / spacing[o],
                                                     X.z() / spacing[o]) -
                            1);
    }
    return out;
  };

  // camera B: offset centre looking back at the scene middle
  const Eigen::Vector3d centre_b(0.45 * u(rng), 0.3 * u(rng), 0.3 * u(rng));
  const Eigen::Vector3d target(0.1 * u(rng), 0.1 * u(rng), 3.2);
  const Eigen::Vector3d fwd = (target - centre_b).normalized();
  Eigen::Vector3d right = Eigen::Vector3d(0, 1, 0).cross(fwd).normalized();
  const double roll = 0.1 * u(rng);
  Eigen::Vector3d down = fwd.cross(right);
  const Eigen::Vector3d r2 = std::cos(roll) * right + std::sin(roll) * down;
  down = fwd.cross(r2);
  Eigen::Matrix3d Rb;
  Rb.row(0) = r2.transpose();
  Rb.row(1) = down.transpose();
  Rb.row(2) = fwd.transpose();
  if (Rb.determinant() < 0) Rb.row(0) *= -1;

  PosedPair out;
  out.frame_a.K = K;
  out.frame_b.K = K;
  out.frame_b.R = Rb;
  out.frame_b.t = -Rb * centre_b;

  auto view = [&](const CameraFrame& cam, const std::string& id, Tensor<float>& depth) {
    const Eigen::Matrix3d Kinv = cam.K.inverse();
    const Eigen::Vector3d centre = -cam.R.transpose() * cam.t;
    auto colour = [&](double x, double y) {
      const Eigen::Vector3d d = (cam.R.transpose() * (Kinv * Eigen::Vector3d(x, y, 1))).normalized();
      Eigen::Vector3d X;
      int obj;
      if (!hit(centre, d, X, obj)) return Rgb{0, 0, 0};
      return solid(X, obj);
    };
    depth = Tensor<float>({height, width});
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const Eigen::Vector3d d = (cam.R.transpose() * (Kinv * Eigen::Vector3d(x, y, 1))).normalized();
        Eigen::Vector3d X;
        int obj;
        if (hit(centre, d, X, obj)) depth.at(y, x) = static_cast<float>((cam.R * X + cam.t).z());
      }
    return render(width, height, id, colour);
  };
  Tensor<float> da, db;
  out.a = view(out.frame_a, "a", da);
  out.b = view(out.frame_b, "b", db);
  out.frame_a.depth = std::move(da);
  out.frame_b.depth = std::move(db);
  out.frame_a.validate();
  out.frame_b.validate();
  return out;
}

}  // namespace imd::data
