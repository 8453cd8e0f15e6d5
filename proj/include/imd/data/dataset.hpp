#pragma once

// On-disk pair datasets.
//
// root/index.json = {"pairs": [ {"id", "a", "b", "split",
//                                 "h" | "pose_a" + "pose_b" + "depth_a" | "mask_a" + "mask_b" [+ "category"]} ]}
// Paths are relative to root. H and masks are IMDT tensors; poses are inline
// {"K": [9], "R": [9], "t": [3]} arrays.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "imd/core/geometry.hpp"
#include "imd/core/tensor_io.hpp"
#include "imd/core/types.hpp"
#include "imd/data/png.hpp"
#include "imd/data/synthetic.hpp"

namespace imd::data {

struct PairRecord {
  std::string id;
  std::string split;
  Image a, b;
  std::optional<Eigen::Matrix3d> H;
  std::optional<CameraFrame> frame_a, frame_b;
  std::optional<InstanceMaskPair> masks;
};

namespace detail {

inline nlohmann::json pose_to_json(const CameraFrame& f) {
  std::vector<double> K(9), R(9), t(3);
  for (int i = 0; i < 3; ++i) {
    t[i] = f.t(i);
    for (int j = 0; j < 3; ++j) {
      K[i * 3 + j] = f.K(i, j);
      R[i * 3 + j] = f.R(i, j);
    }
  }
  return {{"K", K}, {"R", R}, {"t", t}};
}

inline CameraFrame pose_from_json(const nlohmann::json& j) {
  const auto K = j.at("K").get<std::vector<double>>(), R = j.at("R").get<std::vector<double>>(),
             t = j.at("t").get<std::vector<double>>();
  if (K.size() != 9 || R.size() != 9 || t.size() != 3) throw ConfigError("pose needs K[9], R[9], t[3]");
  CameraFrame f;
  for (int i = 0; i < 3; ++i) {
    f.t(i) = t[i];
    for (int j2 = 0; j2 < 3; ++j2) {
      f.K(i, j2) = K[i * 3 + j2];
      f.R(i, j2) = R[i * 3 + j2];
    }
  }
  return f;
}

}  // namespace detail

/// Index of a dataset directory; records are loaded and validated on demand.
class Dataset {
 public:
  explicit Dataset(std::filesystem::path root) : root_(std::move(root)) {
    const auto index = root_ / "index.json";
    std::ifstream f(index);
    if (!f) throw RecordError(index.string() + ": missing dataset index");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw RecordError(index.string() + ": " + e.what());
    }
    if (!j.contains("pairs") || !j["pairs"].is_array()) throw RecordError(index.string() + ": no \"pairs\" array");
    entries_ = j["pairs"].get<std::vector<nlohmann::json>>();
  }

  std::size_t size() const { return entries_.size(); }
  const std::filesystem::path& root() const { return root_; }
  const nlohmann::json& entry(std::size_t i) const { return entries_.at(i); }
  std::string split(std::size_t i) const { return entries_.at(i).value("split", std::string("train")); }

  /// Positions of records in `split` (all records when split is empty), in index order.
  std::vector<std::size_t> indices(const std::string& split_name = {}) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (split_name.empty() || split(i) == split_name) out.push_back(i);
    return out;
  }

  PairRecord load(std::size_t i) const {
    const auto& e = entries_.at(i);
    const std::string where = (root_ / "index.json").string() + " pair " + std::to_string(i);
    auto path_of = [&](const char* key) {
      if (!e.contains(key) || !e[key].is_string()) throw RecordError(where + ": missing \"" + key + "\"");
      const auto p = root_ / e[key].get<std::string>();
      if (!std::filesystem::exists(p)) throw RecordError(where + ": file not found: " + p.string());
      return p;
    };
    PairRecord r;
    r.id = e.value("id", std::to_string(i));
    r.split = e.value("split", std::string("train"));
    const bool has_h = e.contains("h");
    const bool has_pose = e.contains("pose_a") || e.contains("pose_b") || e.contains("depth_a");
    const bool has_mask = e.contains("mask_a") || e.contains("mask_b");
    if (has_h + has_pose + has_mask != 1)
      throw RecordError(where + ": exactly one of h, pose_a/pose_b/depth_a, mask_a/mask_b must be present");
    try {
      const auto pa = path_of("a"), pb = path_of("b");
      r.a = read_png(pa, r.id + "_a");
      r.b = read_png(pb, r.id + "_b");
      if (has_h) {
        const auto p = path_of("h");
        r.H = tensor_to_mat3(read_tensor_as<double>(p));
        if (!(std::abs(r.H->determinant()) > 1e-12)) throw RecordError(where + ": singular homography in " + p.string());
      } else if (has_pose) {
        if (!e.contains("pose_a") || !e.contains("pose_b")) throw RecordError(where + ": pose_a and pose_b required");
        r.frame_a = detail::pose_from_json(e["pose_a"]);
        r.frame_b = detail::pose_from_json(e["pose_b"]);
        const auto dp = path_of("depth_a");
        r.frame_a->depth = read_tensor_as<float>(dp);
        if (r.frame_a->depth->shape != Shape{r.a.height(), r.a.width()})
          throw RecordError(where + ": depth " + dp.string() + " does not match image a");
        r.frame_a->validate();
        r.frame_b->validate();
      } else {
        InstanceMaskPair m;
        const auto ma = path_of("mask_a"), mb = path_of("mask_b");
        m.source_mask = read_tensor_as<std::uint8_t>(ma);
        m.target_mask = read_tensor_as<std::uint8_t>(mb);
        m.category = e.value("category", std::string());
        if (m.source_mask.shape != Shape{r.a.height(), r.a.width()})
          throw RecordError(where + ": mask " + ma.string() + " does not match image a");
        if (m.target_mask.shape != Shape{r.b.height(), r.b.width()})
          throw RecordError(where + ": mask " + mb.string() + " does not match image b");
        m.validate();
        r.masks = std::move(m);
      }
    } catch (const RecordError&) {
      throw;
    } catch (const std::exception& ex) {
      throw RecordError(where + ": " + ex.what());
    }
    return r;
  }

 private:
  std::filesystem::path root_;
  std::vector<nlohmann::json> entries_;
};

inline Dataset load_dataset(const std::filesystem::path& root) { return Dataset(root); }

/// Accumulates records and writes index.json on finish().
class DatasetWriter {
 public:
  explicit DatasetWriter(std::filesystem::path root) : root_(std::move(root)) {
    for (const char* d : {"images", "tensors"}) std::filesystem::create_directories(root_ / d);
  }

  void add_warp(const std::string& id, const WarpPair& p, const std::string& split) {
    auto e = images(id, p.a, p.b, split);
    e["h"] = tensor(id + "_h", mat3_to_tensor(p.H));
    pairs_.push_back(std::move(e));
  }

  void add_multi_instance(const std::string& id, const MultiInstancePair& p, const std::string& split) {
    auto e = images(id, p.a, p.b, split);
    e["mask_a"] = tensor(id + "_mask_a", p.masks.source_mask);
    e["mask_b"] = tensor(id + "_mask_b", p.masks.target_mask);
    e["category"] = p.masks.category;
    pairs_.push_back(std::move(e));
  }

  void add_posed(const std::string& id, const PosedPair& p, const std::string& split) {
    auto e = images(id, p.a, p.b, split);
    e["pose_a"] = detail::pose_to_json(p.frame_a);
    e["pose_b"] = detail::pose_to_json(p.frame_b);
    e["depth_a"] = tensor(id + "_depth_a", *p.frame_a.depth);
    pairs_.push_back(std::move(e));
  }

  void finish() const {
    std::ofstream(root_ / "index.json") << nlohmann::json{{"pairs", pairs_}}.dump(1) << "\n";
  }

 private:
  nlohmann::json images(const std::string& id, const Image& a, const Image& b, const std::string& split) {
    const std::string fa = "images/" + id + "_a.png", fb = "images/" + id + "_b.png";
    write_png(root_ / fa, a);
    write_png(root_ / fb, b);
    return {{"id", id}, {"a", fa}, {"b", fb}, {"split", split}};
  }
  template <class T>
  std::string tensor(const std::string& stem, const Tensor<T>& t) {
    const std::string f = "tensors/" + stem + ".imdt";
    write_tensor(root_ / f, t);
    return f;
  }

  std::filesystem::path root_;
  std::vector<nlohmann::json> pairs_;
};

}  // namespace imd::data
