#include <fstream>

#include <gtest/gtest.h>

#include "imd/data/dataset.hpp"
#include "imd/eval/metrics.hpp"
#include "imd/supervision/ground_truth.hpp"
#include "support.hpp"

namespace imd {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("imd_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------- warp pairs

TEST(WarpPairs, SeededDeterminism) {
  const auto a = data::gen_synthetic_pair(17, data::TextureMode::Mixed, 0.8);
  const auto b = data::gen_synthetic_pair(17, data::TextureMode::Mixed, 0.8);
  const auto c = data::gen_synthetic_pair(18, data::TextureMode::Mixed, 0.8);
  EXPECT_EQ(a.a.pixels.data, b.a.pixels.data);
  EXPECT_EQ(a.b.pixels.data, b.b.pixels.data);
  EXPECT_TRUE(a.H == b.H);
  EXPECT_NE(a.a.pixels.data, c.a.pixels.data);
}

TEST(WarpPairs, ZeroMagnitudeIsIdentity) {
  for (auto mode : {data::TextureMode::Noise, data::TextureMode::Shapes, data::TextureMode::Mixed}) {
    const auto p = data::gen_synthetic_pair(3, mode, 0.0);
    EXPECT_TRUE(p.H == Eigen::Matrix3d::Identity());
    EXPECT_EQ(p.overlap, 1.0);
  }
  EXPECT_THROW(data::gen_synthetic_pair(3, data::TextureMode::Noise, 1.5), ConfigError);
  EXPECT_THROW(data::texture_mode_from_string("plaid"), ConfigError);
}

TEST(WarpPairs, OverlapAtLeastHalf) {
  double mean = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = data::gen_synthetic_pair(i, data::TextureMode::Noise, 1.0, 16, 16);
    EXPECT_GE(p.overlap, 0.5);
    mean += p.overlap;
  }
  EXPECT_GE(mean / 1000, 0.5);
}

TEST(WarpPairs, IdentityViewsDifferOnlyPhotometrically) {
  const auto p = data::gen_synthetic_pair(5, data::TextureMode::Shapes, 0.0);
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  const double n = 64 * 64;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const double a = p.a.at(y, x, 0), b = p.b.at(y, x, 0);
      sa += a, sb += b, saa += a * a, sbb += b * b, sab += a * b;
    }
  const double cov = sab / n - sa * sb / n / n;
  const double corr = cov / std::sqrt((saa / n - sa * sa / n / n) * (sbb / n - sb * sb / n / n));
  EXPECT_GT(corr, 0.9);
  EXPECT_NE(p.a.pixels.data, p.b.pixels.data);
}

TEST(Homography, FromCornersIsExact) {
  const std::array<Point2, 4> src{Point2{0, 0}, Point2{10, 0}, Point2{0, 10}, Point2{10, 10}};
  const std::array<Point2, 4> dst{Point2{1, 2}, Point2{12, 1}, Point2{0, 11}, Point2{13, 14}};
  const auto H = data::homography_from_corners(src, dst);
  for (int i = 0; i < 4; ++i) {
    const auto q = apply_homography(H, src[i]);
    EXPECT_NEAR(q->x, dst[i].x, 1e-9);
    EXPECT_NEAR(q->y, dst[i].y, 1e-9);
  }
}

// ---------------------------------------------------------------- multi-instance pairs

TEST(MultiInstance, MasksDisjointAndCentroidInside) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto p = data::gen_multi_instance_pair(seed, 2 + seed % 3);
    ASSERT_EQ(p.instance_masks_a.size(), 2 + seed % 3);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        int owners = 0;
        for (const auto& m : p.instance_masks_a) owners += m.at(y, x) != 0;
        EXPECT_LE(owners, 1);
      }
    double sx = 0, sy = 0, n = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (p.masks.source_mask.at(y, x)) sx += x, sy += y, ++n;
    ASSERT_GT(n, 0);
    const auto c = apply_homography(p.instance_h, {sx / n, sy / n});
    EXPECT_TRUE(eval::detail::mask_contains(p.masks.target_mask, c->x, c->y)) << "seed " << seed;
  }
  EXPECT_THROW(data::gen_multi_instance_pair(0, 1), ConfigError);
}

TEST(MultiInstance, Golden) {
  const auto p = data::gen_multi_instance_pair(7, 3);
  test::expect_golden("multi_instance_source_mask", p.masks.source_mask, 0);
  Tensor<std::uint8_t> px = p.b.pixels;
  test::expect_golden("multi_instance_image_b", px, 0);
}

// ---------------------------------------------------------------- posed pairs

TEST(PosedPairs, ValidFramesAndConsistentDepth) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = data::gen_posed_pair(seed);
    EXPECT_NO_THROW(p.frame_a.validate());
    EXPECT_NO_THROW(p.frame_b.validate());
    ASSERT_TRUE(p.frame_a.depth && p.frame_b.depth);
    int valid = 0;
    for (float d : p.frame_a.depth->data) valid += d > 0;
    EXPECT_GT(valid, 64 * 64 / 2);
    // with B's own depth as occlusion check, a good share of the grid survives
    const auto gt = supervision::warp_grid(p.frame_a, p.frame_b, 8);
    EXPECT_GE(gt.size(), 16u) << "seed " << seed;
  }
  const auto a = data::gen_posed_pair(9), b = data::gen_posed_pair(9);
  EXPECT_EQ(a.a.pixels.data, b.a.pixels.data);
  EXPECT_TRUE(a.frame_b.R == b.frame_b.R);
}

// ---------------------------------------------------------------- PNG and dataset

TEST(Png, RoundTrip) {
  const auto dir = scratch_dir("png");
  const auto p = data::gen_synthetic_pair(2, data::TextureMode::Mixed, 0.5, 48, 32);
  data::write_png(dir / "x.png", p.a);
  const auto back = data::read_png(dir / "x.png");
  EXPECT_EQ(back.pixels.shape, p.a.pixels.shape);
  EXPECT_EQ(back.pixels.data, p.a.pixels.data);
  EXPECT_THROW(data::read_png(dir / "missing.png"), Error);
}

TEST(Dataset, WriteLoadInIndexOrder) {
  const auto dir = scratch_dir("ds");
  data::DatasetWriter w(dir);
  w.add_warp("p0", data::gen_synthetic_pair(1, data::TextureMode::Noise, 0.5), "train");
  w.add_multi_instance("p1", data::gen_multi_instance_pair(1, 2), "test");
  w.add_posed("p2", data::gen_posed_pair(1), "test");
  w.finish();
  const auto ds = data::load_dataset(dir);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.indices("test"), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(ds.indices(), (std::vector<std::size_t>{0, 1, 2}));
  const auto r0 = ds.load(0), r1 = ds.load(1), r2 = ds.load(2);
  EXPECT_EQ(r0.id, "p0");
  EXPECT_TRUE(r0.H && !r0.masks && !r0.frame_a);
  EXPECT_TRUE(r1.masks && !r1.H);
  EXPECT_TRUE(r2.frame_a && r2.frame_b && r2.frame_a->depth);
  EXPECT_TRUE(*r0.H == data::gen_synthetic_pair(1, data::TextureMode::Noise, 0.5).H);
}

nlohmann::json read_index(const fs::path& dir) {
  std::ifstream f(dir / "index.json");
  return nlohmann::json::parse(f);
}

void write_index(const fs::path& dir, const nlohmann::json& j) { std::ofstream(dir / "index.json") << j.dump(); }

TEST(Dataset, MissingImageNamesTheFile) {
  const auto dir = scratch_dir("ds_missing");
  data::DatasetWriter w(dir);
  w.add_warp("p0", data::gen_synthetic_pair(1, data::TextureMode::Noise, 0.5), "train");
  w.finish();
  fs::remove(dir / "images" / "p0_b.png");
  try {
    data::load_dataset(dir).load(0);
    FAIL() << "expected RecordError";
  } catch (const RecordError& e) {
    EXPECT_NE(std::string(e.what()).find("p0_b.png"), std::string::npos) << e.what();
  }
}

TEST(Dataset, AmbiguousSupervisionRejected) {
  const auto dir = scratch_dir("ds_both");
  data::DatasetWriter w(dir);
  w.add_warp("p0", data::gen_synthetic_pair(1, data::TextureMode::Noise, 0.5), "train");
  w.finish();
  auto j = read_index(dir);
  j["pairs"][0]["pose_a"] = nlohmann::json::object();
  write_index(dir, j);
  EXPECT_THROW(data::load_dataset(dir).load(0), RecordError);
  j["pairs"][0].erase("pose_a");
  j["pairs"][0].erase("h");
  write_index(dir, j);
  EXPECT_THROW(data::load_dataset(dir).load(0), RecordError);
}

TEST(Dataset, MissingOrMalformedIndex) {
  const auto dir = scratch_dir("ds_bad");
  EXPECT_THROW(data::load_dataset(dir), RecordError);
  std::ofstream(dir / "index.json") << "{not json";
  EXPECT_THROW(data::load_dataset(dir), RecordError);
  std::ofstream(dir / "index.json") << R"({"records": []})";
  EXPECT_THROW(data::load_dataset(dir), RecordError);
}

}  // namespace
}  // namespace imd
