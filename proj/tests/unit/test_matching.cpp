#include <random>

#include <gtest/gtest.h>

#include "imd/matching/coarse.hpp"
#include "imd/matching/fine.hpp"
#include "support.hpp"

namespace imd {
namespace {

using matching::FinePoint;

// ---------------------------------------------------------------- oracles

/// O(n^2) mutual nearest neighbours straight from the definition.
std::vector<std::tuple<int, int, float>> brute_force_mnn(const Tensor<float>& p, double tau) {
  const int n = p.dim(0), m = p.dim(1);
  std::vector<std::tuple<int, int, float>> out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      bool row_max = true, col_max = true;
      for (int k = 0; k < m; ++k)
        if (p.at(i, k) > p.at(i, j) || (p.at(i, k) == p.at(i, j) && k < j)) row_max = false;
      for (int k = 0; k < n; ++k)
        if (p.at(k, j) > p.at(i, j) || (p.at(k, j) == p.at(i, j) && k < i)) col_max = false;
      if (row_max && col_max && p.at(i, j) > tau) out.emplace_back(i, j, p.at(i, j));
    }
  return out;
}

/// Exhaustive local MNN: every (i, j) pair checked against its row and column.
matching::LocalMatch brute_force_local(const Tensor<double>& s) {
  const int n = s.dim(0);
  matching::LocalMatch best;
  bool found = false;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      bool mutual = true;
      for (int k = 0; k < n; ++k) {
        if (s.at(i, k) > s.at(i, j) || (s.at(i, k) == s.at(i, j) && k < j)) mutual = false;
        if (s.at(k, j) > s.at(i, j) || (s.at(k, j) == s.at(i, j) && k < i)) mutual = false;
      }
      if (mutual && (!found || s.at(i, j) > best.score)) {
        best = {i, j, s.at(i, j), false};
        found = true;
      }
    }
  return best;
}

// ---------------------------------------------------------------- select_matches

TEST(SelectMatches, EqualsBruteForceOn100RandomMatrices) {
  for (int trial = 0; trial < 100; ++trial) {
    auto p = test::random_tensor<float>({16, 16}, 1000 + trial, 0.0, 1.0);
    // integer-valued draws on some trials to exercise ties
    if (trial % 3 == 0)
      for (auto& v : p.data) v = std::floor(v * 4) / 4;
    const double tau = trial % 2 ? 0.2 : 0.5;
    const auto got = matching::select_matches(p, tau);
    const auto want = brute_force_mnn(p, tau);
    ASSERT_EQ(got.size(), want.size()) << "trial " << trial;
    for (std::size_t k = 0; k < want.size(); ++k) {
      EXPECT_EQ(got[k].idx_a, std::get<0>(want[k]));
      EXPECT_EQ(got[k].idx_b, std::get<1>(want[k]));
      EXPECT_EQ(got[k].confidence, std::get<2>(want[k]));
    }
  }
}

TEST(SelectMatches, DiagonalAndBelowThreshold) {
  Tensor<float> p({4, 4});
  for (auto& v : p.data) v = 0.01f;
  for (int i = 0; i < 4; ++i) p.at(i, i) = 0.9f;
  const auto m = matching::select_matches(p, 0.2);
  ASSERT_EQ(m.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(m[i].idx_a, m[i].idx_b);
  EXPECT_TRUE(matching::select_matches(p, 0.95).empty());
}

TEST(SelectMatches, InvariantToMonotoneTransformAtTauZeroSurrogate) {
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = test::random_tensor<float>({10, 12}, 50 + trial, 0.0, 1.0);
    auto q = p;
    for (auto& v : q.data) v = std::exp(3.0f * v) / 30.0f;
    const auto a = matching::select_matches(p, 1e-9), b = matching::select_matches(q, 1e-9);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_EQ(a[k].idx_a, b[k].idx_a);
      EXPECT_EQ(a[k].idx_b, b[k].idx_b);
    }
  }
}

// ---------------------------------------------------------------- dual softmax

TEST(DualSoftmax, HandEvaluated2x2) {
  const Tensor<double> s({2, 2}, {10, 0, 0, 10});
  const auto p = matching::dual_softmax(s);
  const double sigma = std::exp(10.0) / (std::exp(10.0) + 1);
  EXPECT_NEAR(p.at(0, 0), sigma * sigma, 1e-12);
  EXPECT_NEAR(p.at(1, 1), sigma * sigma, 1e-12);
  EXPECT_NEAR(p.at(0, 1), (1 - sigma) * (1 - sigma), 1e-12);
  EXPECT_NEAR(p.at(1, 0), (1 - sigma) * (1 - sigma), 1e-12);
}

TEST(DualSoftmax, OneByOneIsOne) {
  EXPECT_EQ(matching::dual_softmax(Tensor<double>({1, 1}, {3.7})).at(0, 0), 1.0);
}

TEST(DualSoftmax, FactorsNormaliseAndBoundTheProduct) {
  const auto s = test::random_tensor<double>({7, 9}, 3, -5, 5);
  ad::Tape<double> tape;
  const auto v = tape.constant(s);
  const auto row = ad::softmax(v, 1).value(), col = ad::softmax(v, 0).value();
  const auto p = matching::dual_softmax(s);
  for (int i = 0; i < 7; ++i) {
    double sum = 0;
    for (int j = 0; j < 9; ++j) sum += row.at(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  for (int j = 0; j < 9; ++j) {
    double sum = 0;
    for (int i = 0; i < 7; ++i) sum += col.at(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 9; ++j) {
      EXPECT_NEAR(p.at(i, j), row.at(i, j) * col.at(i, j), 1e-15);
      EXPECT_LE(p.at(i, j), std::min(row.at(i, j), col.at(i, j)));
    }
}

// ---------------------------------------------------------------- score matrix

TEST(ScoreMatrix, EqualsCosineLoopOracle) {
  const auto fa = test::random_tensor<double>({6, 3, 3}, 1), fb = test::random_tensor<double>({6, 3, 3}, 2);
  ad::Tape<double> tape;
  const auto s = matching::score_matrix(tape.constant(fa), tape.constant(fb), 0.1).value();
  ASSERT_EQ(s.shape, (Shape{9, 9}));
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j) {
      double dot = 0, na = 0, nb = 0;
      for (int c = 0; c < 6; ++c) {
        const double a = fa.data[c * 9 + i], b = fb.data[c * 9 + j];
        dot += a * b;
        na += a * a;
        nb += b * b;
      }
      EXPECT_NEAR(s.at(i, j), dot / std::sqrt(na) / std::sqrt(nb) / 0.1, 1e-6);
    }
}

TEST(ScoreMatrix, OrthonormalCellsGiveIdentity) {
  Tensor<double> f({4, 2, 2});
  for (int k = 0; k < 4; ++k) f.data[k * 4 + k] = 1;
  ad::Tape<double> tape;
  const auto s = matching::score_matrix(tape.constant(f), tape.constant(f), 1.0).value();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(s.at(i, j), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(ScoreMatrix, CellScaleInvariance) {
  const auto fa = test::random_tensor<double>({5, 2, 3}, 4), fb = test::random_tensor<double>({5, 2, 3}, 5);
  auto fa5 = fa;
  for (int c = 0; c < 5; ++c) fa5.data[c * 6 + 2] *= 5;
  ad::Tape<double> tape;
  const auto s1 = matching::score_matrix(tape.constant(fa), tape.constant(fb), 0.1).value();
  const auto s2 = matching::score_matrix(tape.constant(fa5), tape.constant(fb), 0.1).value();
  for (std::size_t i = 0; i < s1.numel(); ++i) EXPECT_NEAR(s1.data[i], s2.data[i], 1e-12);
}

// ---------------------------------------------------------------- transformer

template <class T>
ad::ParamSet<T> coarse_params(int channels) {
  ad::ParamSet<T> p;
  matching::init_coarse(p, {channels, 2}, 17);
  return p;
}

TEST(TransformFeatures, ShapesAndRoundCountZero) {
  const auto params = coarse_params<float>(64);
  const auto ca = test::random_tensor<float>({64, 8, 8}, 1), cb = test::random_tensor<float>({64, 8, 8}, 2);
  ad::Tape<float> tape;
  ad::Binder<float> p(tape, params);
  auto [a, b] = matching::transform_features(p, tape.constant(ca), tape.constant(cb), 2);
  EXPECT_EQ(a.shape(), (Shape{64, 8, 8}));
  EXPECT_EQ(b.shape(), (Shape{64, 8, 8}));
  auto [a0, b0] = matching::transform_features(p, tape.constant(ca), tape.constant(cb), 0);
  const auto pe = matching::positional_encoding<float>(64, 8, 8);
  for (std::size_t i = 0; i < ca.numel(); ++i) {
    EXPECT_EQ(a0.value().data[i], ca.data[i] + pe.data[i]);
    EXPECT_EQ(b0.value().data[i], cb.data[i] + pe.data[i]);
  }
}

TEST(TransformFeatures, IdenticalInputsStayIdentical) {
  const auto params = coarse_params<double>(8);
  const auto c = test::random_tensor<double>({8, 3, 3}, 1);
  ad::Tape<double> tape;
  ad::Binder<double> p(tape, params);
  auto [a, b] = matching::transform_features(p, tape.constant(c), tape.constant(c), 2);
  EXPECT_EQ(a.value().data, b.value().data);
}

TEST(TransformFeatures, ChannelMismatchIsShapeError) {
  const auto params = coarse_params<double>(8);
  ad::Tape<double> tape;
  ad::Binder<double> p(tape, params);
  EXPECT_THROW(matching::transform_features(p, tape.constant(Tensor<double>({8, 2, 2})),
                                            tape.constant(Tensor<double>({6, 2, 2})), 1),
               ShapeError);
}

TEST(TransformFeatures, GradientCheck4x4) {
  const auto params = coarse_params<double>(4);
  const auto probe_a = test::random_tensor<double>({4, 4, 4}, 8), probe_b = test::random_tensor<double>({4, 4, 4}, 9);
  auto f = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& in) {
    ad::Binder<double> p(tape, params);
    auto [a, b] = matching::transform_features(p, in[0], in[1], 2);
    return ad::add(ad::sum(ad::mul(a, tape.constant(probe_a))), ad::sum(ad::mul(b, tape.constant(probe_b))));
  };
  const auto r = test::grad_check(f, {test::random_tensor<double>({4, 4, 4}, 1), test::random_tensor<double>({4, 4, 4}, 2)});
  EXPECT_LT(r.worst, 1e-3) << r.details;
  for (const std::string name : {"coarse.self.q.w", "coarse.cross.ffn1.w", "coarse.cross.ln1.g"}) {
    const auto ca = test::random_tensor<double>({4, 4, 4}, 1), cb = test::random_tensor<double>({4, 4, 4}, 2);
    const double err = test::param_grad_error(params, name, [&](ad::Binder<double>& p) {
      auto& tape = p.tape();
      auto [a, b] = matching::transform_features(p, tape.constant(ca), tape.constant(cb), 2);
      return ad::add(ad::sum(ad::mul(a, tape.constant(probe_a))), ad::sum(ad::mul(b, tape.constant(probe_b))));
    });
    EXPECT_LT(err, 1e-3) << name;
  }
}

TEST(CoarseChain, ScoreAndDualSoftmaxGradient) {
  auto f = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& in) {
    auto p = matching::dual_softmax(matching::score_matrix(in[0], in[1], 0.1));
    return ad::sum(ad::mul(p, tape.constant(test::random_tensor<double>({6, 4}, 3))));
  };
  const auto r = test::grad_check(f, {test::random_tensor<double>({5, 2, 3}, 1), test::random_tensor<double>({5, 2, 2}, 2)});
  EXPECT_LT(r.worst, 1e-3) << r.details;
}

// ---------------------------------------------------------------- fine encoder / fusion

template <class T>
ad::ParamSet<T> fine_params(int channels = 8, int coarse_channels = 6) {
  ad::ParamSet<T> p;
  matching::init_fine(p, {channels, coarse_channels, 0.125}, 23);
  return p;
}

TEST(FineEncoder, ShapeDeterminismGolden) {
  const auto params = fine_params<float>(64, 64);
  Tensor<float> img({3, 64, 64});
  for (std::size_t i = 0; i < img.numel(); ++i) img.data[i] = static_cast<float>(((i * 104729) % 256) / 255.0);
  auto run = [&] {
    ad::Tape<float> tape;
    ad::Binder<float> p(tape, params);
    return matching::encode_fine(p, tape.constant(img)).value();
  };
  const auto f = run();
  EXPECT_EQ(f.shape, (Shape{64, 32, 32}));
  EXPECT_EQ(f.data, run().data);
  test::expect_golden("fine_encoder", f, 1e-5);
}

TEST(FuseFeatures, ZeroCoarseLeavesFinePathway) {
  const auto params = fine_params<double>();
  const auto fine = test::random_tensor<double>({8, 8, 8}, 1);
  ad::Tape<double> tape;
  ad::Binder<double> p(tape, params);
  const auto fused = matching::fuse_features(p, tape.constant(fine), tape.constant(Tensor<double>({6, 2, 2}))).value();
  // zero coarse input contributes only the projection bias
  Tensor<double> shifted = fine;
  const auto& b = params.at("fuse.proj.b");
  for (int c = 0; c < 8; ++c)
    for (int k = 0; k < 64; ++k) shifted.data[c * 64 + k] += b.data[c];
  const auto direct = ad::conv(p, "fuse.conv", tape.constant(shifted), 1, 1).value();
  EXPECT_EQ(fused.shape, fine.shape);
  for (std::size_t i = 0; i < fused.numel(); ++i) EXPECT_NEAR(fused.data[i], direct.data[i], 1e-12);
}

TEST(FuseFeatures, GoldenAndProvenanceCheck) {
  const auto params = fine_params<float>(8, 6);
  ad::Tape<float> tape;
  ad::Binder<float> p(tape, params);
  const auto fine = tape.constant(test::random_tensor<float>({8, 8, 8}, 1));
  const auto fused = matching::fuse_features(p, fine, tape.constant(test::random_tensor<float>({6, 2, 2}, 2))).value();
  test::expect_golden("fuse_features", fused, 1e-5);
  EXPECT_THROW(matching::fuse_features(p, fine, tape.constant(Tensor<float>({6, 3, 2}))), ShapeError);
}

// ---------------------------------------------------------------- cropping

TEST(CropPatches, CentralAndCornerWindows) {
  const auto fa = test::random_tensor<double>({3, 16, 16}, 1), fb = test::random_tensor<double>({3, 16, 16}, 2);
  ad::Tape<double> tape;
  // coarse grid 4x4; cell 5 = (1,1) has fine centre (6,6); cell 0 = (0,0) has fine centre (2,2)
  const auto pp = matching::crop_patches(tape.constant(fa), tape.constant(fb), std::vector<std::pair<int, int>>{{5, 0}, {15, 15}}, 5, 4, 4);
  ASSERT_EQ(pp.size(), 2u);
  EXPECT_EQ(pp[0].origin_a.x, 4);
  EXPECT_EQ(pp[0].origin_a.y, 4);
  EXPECT_EQ(pp[0].origin_b.x, 0);
  EXPECT_EQ(pp[0].origin_b.y, 0);
  // cell 15 = (3,3): centre (14,14), window 12..16 clamps the last column/row to 15
  EXPECT_EQ(pp[1].origin_a.x, 12);
  EXPECT_EQ(pp[1].patch_a.shape(), (Shape{3, 25}));
  for (const auto& p : pp) {
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 25; ++k) {
        const int ya = std::clamp(p.origin_a.y + k / 5, 0, 15), xa = std::clamp(p.origin_a.x + k % 5, 0, 15);
        const int yb = std::clamp(p.origin_b.y + k / 5, 0, 15), xb = std::clamp(p.origin_b.x + k % 5, 0, 15);
        EXPECT_EQ(p.patch_a.value().at(c, k), fa.at(c, ya, xa));
        EXPECT_EQ(p.patch_b.value().at(c, k), fb.at(c, yb, xb));
      }
  }
  EXPECT_TRUE(matching::crop_patches(tape.constant(fa), tape.constant(fb), CoarseMatchSet{}, 5, 4, 4).empty());
  EXPECT_THROW(matching::crop_patches(tape.constant(fa), tape.constant(fb), CoarseMatchSet{}, 4, 4, 4), ConfigError);
}

TEST(CropPatches, CornerWindowNearOriginClamps) {
  const auto fa = test::random_tensor<double>({2, 8, 8}, 1);
  ad::Tape<double> tape;
  // a window of 7 around fine centre (2,2) starts at (-1,-1)
  const auto pp = matching::crop_patches(tape.constant(fa), tape.constant(fa), std::vector<std::pair<int, int>>{{0, 0}}, 7, 2, 2);
  EXPECT_EQ(pp[0].origin_a.x, -1);
  EXPECT_EQ(pp[0].patch_a.value().at(0, 0), fa.at(0, 0, 0));
  EXPECT_EQ(pp[0].patch_a.value().at(0, 1), fa.at(0, 0, 0));
  EXPECT_EQ(pp[0].patch_a.value().at(0, 8), fa.at(0, 0, 0));
  EXPECT_EQ(pp[0].patch_a.value().at(0, 9), fa.at(0, 0, 1));
}

// ---------------------------------------------------------------- local matching

TEST(LocalMatch, EqualsExhaustiveOracle) {
  for (int w : {3, 5}) {
    for (int trial = 0; trial < 200; ++trial) {
      const int n = w * w;
      auto s = test::random_tensor<double>({n, n}, 7000 + 31 * w + trial);
      if (trial % 4 == 0)
        for (auto& v : s.data) v = std::round(v * 2);  // many ties
      const auto got = matching::local_match(s);
      const auto want = brute_force_local(s);
      if (got.fallback) continue;  // impossible for a finite matrix: the global max is always mutual
      EXPECT_EQ(got.ia, want.ia) << "w=" << w << " trial " << trial;
      EXPECT_EQ(got.ib, want.ib) << "w=" << w << " trial " << trial;
      EXPECT_EQ(got.score, want.score);
    }
  }
}

TEST(LocalMatch, SelfSimilarPatchesMatchOnDiagonal) {
  // distinct unit-norm-ish pixels, one with a larger norm
  Tensor<double> pa({4, 9});
  for (int k = 0; k < 9; ++k) {
    pa.at(k % 4, k) = 1.0 + 0.1 * k;
    pa.at((k + 1) % 4, k) = 0.3 * (k % 3);
  }
  ad::Tape<double> tape;
  const auto s = matching::local_scores(tape.constant(pa), tape.constant(pa), 0.1).value();
  const auto m = matching::local_match(s);
  EXPECT_EQ(m.ia, m.ib);
  double best = 0;
  int arg = 0;
  for (int k = 0; k < 9; ++k) {
    double nrm = 0;
    for (int c = 0; c < 4; ++c) nrm += pa.at(c, k) * pa.at(c, k);
    if (nrm > best) best = nrm, arg = k;
  }
  EXPECT_EQ(m.ia, arg);
}

TEST(LocalMatch, AllEqualScoresTieToLowestIndex) {
  Tensor<double> s({9, 9});
  const auto m = matching::local_match(s);
  EXPECT_EQ(m.ia, 0);
  EXPECT_EQ(m.ib, 0);
  EXPECT_FALSE(m.fallback);
}

// ---------------------------------------------------------------- subpixel

TEST(Subpixel, UniformLogitsGiveCentre) {
  const Tensor<double> qa({4});
  const auto p = matching::subpixel_expectation(qa, Tensor<double>({4, 3, 3}), FinePoint{5, 7}, 0.1);
  EXPECT_EQ(p.x, 5 * 2 + 0.5);
  EXPECT_EQ(p.y, 7 * 2 + 0.5);
}

TEST(Subpixel, OneHotTopLeft) {
  Tensor<double> qa({1}, {1.0});
  Tensor<double> pb({1, 3, 3});
  pb.data[0] = 1e4 * 0.1;
  const auto p = matching::subpixel_expectation(qa, pb, FinePoint{5, 7}, 0.1);
  EXPECT_NEAR(p.x, 4 * 2 + 0.5, 1e-12);
  EXPECT_NEAR(p.y, 6 * 2 + 0.5, 1e-12);
}

TEST(Subpixel, EqualsNineTermHandSum) {
  for (int trial = 0; trial < 50; ++trial) {
    const auto qa = test::random_tensor<double>({6}, 100 + trial);
    const auto pb = test::random_tensor<double>({6, 3, 3}, 200 + trial);
    const double temp = 0.3;
    double logits[9], mx = -1e300;
    for (int k = 0; k < 9; ++k) {
      logits[k] = 0;
      for (int c = 0; c < 6; ++c) logits[k] += qa.data[c] * pb.data[c * 9 + k];
      logits[k] /= temp;
      mx = std::max(mx, logits[k]);
    }
    double z = 0, dx = 0, dy = 0;
    for (int k = 0; k < 9; ++k) {
      const double e = std::exp(logits[k] - mx);
      z += e;
      dx += e * (k % 3 - 1);
      dy += e * (k / 3 - 1);
    }
    dx /= z;
    dy /= z;
    const auto p = matching::subpixel_expectation(qa, pb, FinePoint{3, 4}, temp);
    EXPECT_NEAR(p.x, (3 + dx + 0.5) * 2 - 0.5, 1e-9);
    EXPECT_NEAR(p.y, (4 + dy + 0.5) * 2 - 0.5, 1e-9);
    EXPECT_LE(std::abs(dx), 1.0);
    EXPECT_LE(std::abs(dy), 1.0);
  }
}

TEST(Subpixel, ExpectedOffsetGradient) {
  auto f = [](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& in) {
    auto off = matching::expected_offset(in[0], in[1], 0.5);
    return ad::sum(ad::mul(off, tape.constant(Tensor<double>({1, 2}, {0.7, -1.3}))));
  };
  const auto r = test::grad_check(f, {test::random_tensor<double>({5, 1}, 1), test::random_tensor<double>({5, 9}, 2)});
  EXPECT_LT(r.worst, 1e-3) << r.details;
}

TEST(Subpixel, BorderDuplicatesCarryZeroDisplacement) {
  const auto d = matching::neighbourhood_deltas<double>(4, 4, {0, 0});
  for (int k = 0; k < 9; ++k) {
    EXPECT_EQ(d.at(k, 0), std::max(matching::kNeighbourDx[k], 0));
    EXPECT_EQ(d.at(k, 1), std::max(matching::kNeighbourDy[k], 0));
  }
  // a constant map at the corner: the expectation over real pixels {0, 1} x {0, 1}
  Tensor<double> q({2}, {1, 0}), nb({2, 9});
  for (int k = 0; k < 9; ++k) nb.at(0, k) = 1;
  const Point2 p = matching::subpixel_expectation(q, nb, {0, 0}, 0.1, d);
  // weights: 4/9 at (0,0), 2/9 at (1,0), 2/9 at (0,1), 1/9 at (1,1)
  EXPECT_NEAR(p.x, matching::fine_to_pixel(1.0 / 3, 0).x, 1e-12);
  EXPECT_NEAR(p.y, matching::fine_to_pixel(0, 1.0 / 3).y, 1e-12);
}

// ---------------------------------------------------------------- refine end to end

TEST(RefineMatches, IdenticalMapsMapPointsToThemselves) {
  auto f = test::random_tensor<double>({8, 16, 16}, 5);
  // unit-norm pixels so every pixel is its own best match
  for (int p = 0; p < 256; ++p) {
    double n = 0;
    for (int c = 0; c < 8; ++c) n += f.data[c * 256 + p] * f.data[c * 256 + p];
    for (int c = 0; c < 8; ++c) f.data[c * 256 + p] /= std::sqrt(n);
  }
  std::vector<CoarseMatch> cm;
  for (int i = 0; i < 16; ++i) cm.push_back({i, i, 0.9f});
  const CoarseMatchSet coarse(cm, 16, 16);
  ad::Tape<double> tape;
  const auto fine =
      matching::refine_matches(tape.constant(f), tape.constant(f), coarse, 4, 4, 5, 0.01, 32.0, 32.0);
  ASSERT_EQ(fine.size(), coarse.size());
  for (std::size_t k = 0; k < fine.size(); ++k) {
    EXPECT_EQ(fine.entries[k].coarse_parent, static_cast<int>(k));
    EXPECT_LT(std::hypot(fine.entries[k].xa - fine.entries[k].xb, fine.entries[k].ya - fine.entries[k].yb), 0.5);
  }
}

}  // namespace
}  // namespace imd
