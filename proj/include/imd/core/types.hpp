#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include "json.hpp"

#include "imd/core/error.hpp"
#include "imd/core/tensor.hpp"
#include "imd/core/tensor_io.hpp"

namespace imd {

inline constexpr int kCoarseStride = 8;
inline constexpr int kFineStride = 2;

/// 8-bit RGB image, pixels stored as [H, W, 3].
struct Image {
  Tensor<std::uint8_t> pixels;
  std::string id;

  Image() = default;
  Image(Tensor<std::uint8_t> px, std::string image_id) : pixels(std::move(px)), id(std::move(image_id)) {
    if (pixels.rank() != 3 || pixels.dim(2) != 3 || pixels.dim(0) <= 0 || pixels.dim(1) <= 0)
      throw ShapeError("image must be [H,W,3], got " + shape_str(pixels.shape));
  }
  Image(int height, int width, std::string image_id = {})
      : Image(Tensor<std::uint8_t>({height, width, 3}), std::move(image_id)) {}

  int height() const { return pixels.dim(0); }
  int width() const { return pixels.dim(1); }
  std::uint8_t& at(int y, int x, int c) { return pixels.at(y, x, c); }
  std::uint8_t at(int y, int x, int c) const { return pixels.at(y, x, c); }
};

/// Channel-major feature grid; one cell covers `stride` x `stride` image pixels.
struct FeatureMap {
  Tensor<float> data;  // [C, h, w]
  int stride = 1;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

/// Pixel-center coordinates of a flat cell index on a stride-`stride` grid.
struct Point2 {
  double x = 0;
  double y = 0;
};

inline Point2 cell_center(long idx, int grid_w, int stride) {
  const long row = idx / grid_w;
  const long col = idx % grid_w;
  return {(static_cast<double>(col) + 0.5) * stride - 0.5, (static_cast<double>(row) + 0.5) * stride - 0.5};
}

/// Flat index of the cell that contains pixel-space point p, or -1 outside the grid.
inline long containing_cell(Point2 p, int grid_w, int grid_h, int stride) {
  const double cx = std::floor((p.x + 0.5) / stride);
  const double cy = std::floor((p.y + 0.5) / stride);
  if (cx < 0 || cy < 0 || cx >= grid_w || cy >= grid_h) return -1;
  return static_cast<long>(cy) * grid_w + static_cast<long>(cx);
}

struct CoarseMatch {
  int idx_a = 0;
  int idx_b = 0;
  float confidence = 0;
};

/// Coarse matches with mutual exclusivity enforced at construction.
class CoarseMatchSet {
 public:
  CoarseMatchSet() = default;
  explicit CoarseMatchSet(std::vector<CoarseMatch> entries, int cells_a = -1, int cells_b = -1)
      : entries_(std::move(entries)) {
    std::unordered_set<int> seen_a, seen_b;
    for (const auto& m : entries_) {
      if (m.idx_a < 0 || m.idx_b < 0 || (cells_a >= 0 && m.idx_a >= cells_a) || (cells_b >= 0 && m.idx_b >= cells_b))
        throw Error("coarse match index out of range");
      if (!seen_a.insert(m.idx_a).second) throw Error("duplicate idx_a " + std::to_string(m.idx_a));
      if (!seen_b.insert(m.idx_b).second) throw Error("duplicate idx_b " + std::to_string(m.idx_b));
    }
  }

  const std::vector<CoarseMatch>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const CoarseMatch& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<CoarseMatch> entries_;
};

struct FineMatch {
  double xa = 0, ya = 0, xb = 0, yb = 0;
  double confidence = 0;
  int coarse_parent = -1;  // position in the CoarseMatchSet that produced it
  bool low_confidence = false;
};

struct FineMatchSet {
  std::vector<FineMatch> entries;
  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

/// Pinhole camera with world-to-camera pose and optional metric depth.
struct CameraFrame {
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  std::optional<Tensor<float>> depth;  // [H, W], 0 marks invalid

  void validate() const {
    if (K(1, 0) != 0 || K(2, 0) != 0 || K(2, 1) != 0 || !(K(0, 0) > 0) || !(K(1, 1) > 0))
      throw ConfigError("K must be upper-triangular with positive focal lengths");
    if ((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
        std::abs(R.determinant() - 1.0) > 1e-6)
      throw ConfigError("R must be a rotation");
    if (depth) {
      if (depth->rank() != 2) throw ShapeError("depth must be [H,W]");
      for (float d : depth->data)
        if (!(d >= 0) || !std::isfinite(d)) throw ConfigError("depth values must be finite and >= 0");
    }
  }
};

struct InstanceMaskPair {
  Tensor<std::uint8_t> source_mask;  // [H_A, W_A], nonzero = inside
  Tensor<std::uint8_t> target_mask;  // [H_B, W_B]
  std::string category;

  void validate() const {
    auto any = [](const Tensor<std::uint8_t>& m) {
      return std::any_of(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v != 0; });
    };
    if (source_mask.rank() != 2 || target_mask.rank() != 2) throw ShapeError("masks must be [H,W]");
    if (!any(source_mask) || !any(target_mask)) throw ConfigError("instance masks must be non-empty");
  }
};

/// Matching and training hyperparameters.
struct MatchingConfig {
  double tau = 0.2;
  double temperature = 0.1;
  double fine_temperature = 0.1;
  int n_attn = 2;
  int timestep = 0;
  int block_index = 2;
  int fine_window = 5;
  double alpha = 1.0;
  double beta = 0.25;
  double focal_gamma = 2.0;
  double occlusion_tolerance = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(tau > 0 && tau < 1)) throw ConfigError("tau must lie in (0,1)");
    if (!(temperature > 0) || !(fine_temperature > 0)) throw ConfigError("temperatures must be positive");
    if (fine_window < 3 || fine_window % 2 == 0) throw ConfigError("fine_window must be odd and >= 3");
    if (n_attn < 0) throw ConfigError("n_attn must be >= 0");
    if (timestep < 0) throw ConfigError("timestep must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const MatchingConfig& c) {
  j = {{"tau", c.tau},           {"temperature", c.temperature}, {"fine_temperature", c.fine_temperature},
       {"n_attn", c.n_attn},     {"timestep", c.timestep},       {"block_index", c.block_index},
       {"fine_window", c.fine_window}, {"alpha", c.alpha},      {"beta", c.beta},
       {"focal_gamma", c.focal_gamma}, {"occlusion_tolerance", c.occlusion_tolerance}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, MatchingConfig& c) {
  MatchingConfig d;
  c.tau = j.value("tau", d.tau);
  c.temperature = j.value("temperature", d.temperature);
  c.fine_temperature = j.value("fine_temperature", d.fine_temperature);
  c.n_attn = j.value("n_attn", d.n_attn);
  c.timestep = j.value("timestep", d.timestep);
  c.block_index = j.value("block_index", d.block_index);
  c.fine_window = j.value("fine_window", d.fine_window);
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.focal_gamma = j.value("focal_gamma", d.focal_gamma);
  c.occlusion_tolerance = j.value("occlusion_tolerance", d.occlusion_tolerance);
  c.seed = j.value("seed", d.seed);
}

/// Writes `<stem>.imdt` plus a `<stem>.json` sidecar describing the map.
inline void write_feature_map(const std::filesystem::path& stem, const FeatureMap& fm, const std::string& name,
                              const std::string& image_id) {
  auto tensor_path = stem;
  tensor_path += ".imdt";
  auto json_path = stem;
  json_path += ".json";
  write_tensor(tensor_path, fm.data);
  std::ofstream(json_path) << nlohmann::json{{"name", name}, {"stride", fm.stride}, {"image_id", image_id}}.dump(2)
                           << "\n";
}

struct FeatureMapFile {
  FeatureMap map;
  std::string name;
  std::string image_id;
};

inline FeatureMapFile read_feature_map(const std::filesystem::path& stem) {
  auto tensor_path = stem;
  tensor_path += ".imdt";
  auto json_path = stem;
  json_path += ".json";
  std::ifstream js(json_path);
  if (!js) throw Error("missing sidecar " + json_path.string());
  const auto meta = nlohmann::json::parse(js);
  FeatureMapFile out;
  out.map.data = read_tensor_as<float>(tensor_path);
  out.map.stride = meta.at("stride").get<int>();
  out.name = meta.at("name").get<std::string>();
  out.image_id = meta.at("image_id").get<std::string>();
  return out;
}

}  // namespace imd
