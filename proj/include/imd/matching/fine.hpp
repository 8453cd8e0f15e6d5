#pragma once

// Fine refinement: stride-2 feature encoder, fusion with transformed coarse
// features, window cropping around coarse matches, local MNN matching and the
// 3x3 softmax-expectation subpixel step.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "imd/ad/nn.hpp"
#include "imd/core/types.hpp"

namespace imd::matching {

struct FineSpec {
  int channels = 64;         // C_f
  int coarse_channels = 64;  // C_out of the backbone
  double output_gain = 0.125;
};

inline constexpr int kFinePerCoarse = kCoarseStride / kFineStride;

template <class T>
void init_fine(ParamSet<T>& params, const FineSpec& spec, std::uint64_t seed) {
  ad::Initializer<T> init(params, seed);
  const int c = spec.channels;
  init.conv("fine.c0", c, 3, 3);
  init.conv("fine.r1.c1", c, c, 3);
  init.conv("fine.r1.c2", c, c, 3, 0.5);
  init.conv("fuse.proj", c, spec.coarse_channels, 1);
  init.conv("fuse.conv", c, c, 3, spec.output_gain);
}

/// Stride-2 features [C_f, H/2, W/2] from an image tensor [3, H, W].
template <class T>
Var<T> encode_fine(Binder<T>& p, Var<T> image) {
  Var<T> x = ad::silu(ad::conv(p, "fine.c0", image, 2, 1));
  Var<T> r = ad::conv(p, "fine.r1.c2", ad::silu(ad::conv(p, "fine.r1.c1", x, 1, 1)), 1, 1);
  return ad::silu(ad::add(x, r));
}

/// Projects the transformed coarse map to C_f, upsamples x4, adds and convolves.
template <class T>
Var<T> fuse_features(Binder<T>& p, Var<T> fine, Var<T> coarse) {
  if (fine.dim(1) != coarse.dim(1) * kFinePerCoarse || fine.dim(2) != coarse.dim(2) * kFinePerCoarse)
    throw ShapeError("fine map " + shape_str(fine.shape()) + " is not 4x coarse map " + shape_str(coarse.shape()));
  Var<T> up = ad::upsample_nearest(ad::conv(p, "fuse.proj", coarse, 1, 0), kFinePerCoarse);
  return ad::conv(p, "fuse.conv", ad::add(fine, up), 1, 1);
}

// ---------------------------------------------------------------- cropping

struct FinePoint {
  int x = 0;
  int y = 0;
};

/// Fine-grid cell treated as the centre of a coarse cell (row-major flat index).
inline FinePoint fine_center_of(int coarse_idx, int coarse_w) {
  return {(coarse_idx % coarse_w) * kFinePerCoarse + kFinePerCoarse / 2,
          (coarse_idx / coarse_w) * kFinePerCoarse + kFinePerCoarse / 2};
}

/// Pixel-space centre of a fine-grid cell.
inline Point2 fine_to_pixel(double fx, double fy) {
  return {(fx + 0.5) * kFineStride - 0.5, (fy + 0.5) * kFineStride - 0.5};
}

/// Flat indices into a [C, H, W] map for the w x w window with top-left `origin`,
/// clamping coordinates to the border. Result is ordered [C, w*w].
inline std::vector<int> window_indices(int channels, int h, int w, FinePoint origin, int win) {
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(channels) * win * win);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < win; ++i)
      for (int j = 0; j < win; ++j) {
        const int y = std::clamp(origin.y + i, 0, h - 1);
        const int x = std::clamp(origin.x + j, 0, w - 1);
        idx.push_back((c * h + y) * w + x);
      }
  return idx;
}

/// Clamped fine-grid coordinate of window pixel k.
inline FinePoint window_pixel(FinePoint origin, int k, int win, int h, int w) {
  return {std::clamp(origin.x + k % win, 0, w - 1), std::clamp(origin.y + k / win, 0, h - 1)};
}

template <class T>
struct PatchPair {
  Var<T> patch_a;  // [C_f, w*w]
  Var<T> patch_b;
  FinePoint origin_a;  // pre-clamp top-left in fine-grid coordinates
  FinePoint origin_b;
  int window = 0;
};

/// One w x w window pair per (idx_a, idx_b) cell pair, centred at the fine cell of each coarse cell.
template <class T>
std::vector<PatchPair<T>> crop_patches(Var<T> fa, Var<T> fb, const std::vector<std::pair<int, int>>& pairs, int win,
                                       int coarse_w_a, int coarse_w_b) {
  if (win < 3 || win % 2 == 0) throw ConfigError("window must be odd and >= 3");
  std::vector<PatchPair<T>> out;
  const int c = fa.dim(0);
  for (auto [ia, ib] : pairs) {
    FinePoint ca = fine_center_of(ia, coarse_w_a), cb = fine_center_of(ib, coarse_w_b);
    FinePoint oa{ca.x - win / 2, ca.y - win / 2}, ob{cb.x - win / 2, cb.y - win / 2};
    PatchPair<T> pp;
    pp.patch_a = ad::gather(fa, window_indices(c, fa.dim(1), fa.dim(2), oa, win), {c, win * win});
    pp.patch_b = ad::gather(fb, window_indices(c, fb.dim(1), fb.dim(2), ob, win), {c, win * win});
    pp.origin_a = oa;
    pp.origin_b = ob;
    pp.window = win;
    out.push_back(pp);
  }
  return out;
}

template <class T>
std::vector<PatchPair<T>> crop_patches(Var<T> fa, Var<T> fb, const CoarseMatchSet& matches, int win, int coarse_w_a,
                                       int coarse_w_b) {
  std::vector<std::pair<int, int>> pairs;
  for (const auto& m : matches) pairs.emplace_back(m.idx_a, m.idx_b);
  return crop_patches(fa, fb, pairs, win, coarse_w_a, coarse_w_b);
}

/// Correlation of every window pixel pair: [w*w, w*w] = patch_a^T patch_b / temperature.
template <class T>
Var<T> local_scores(Var<T> patch_a, Var<T> patch_b, T temperature) {
  return ad::scale(ad::matmul(patch_a, patch_b, true, false), T(1) / temperature);
}

struct LocalMatch {
  int ia = 0;  // flat index within window A
  int ib = 0;  // flat index within window B
  double score = 0;
  bool fallback = false;  // no MNN pair existed; global argmax used
};

/// Top-1 mutual-nearest pair of a local score matrix, ranked by raw score.
/// Ties everywhere break toward the lowest flat index.
template <class T>
LocalMatch local_match(const Tensor<T>& s) {
  const int n = s.dim(0), m = s.dim(1);
  std::vector<int> row_best(n, 0), col_best(m, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 1; j < m; ++j)
      if (s.at(i, j) > s.at(i, row_best[i])) row_best[i] = j;
  for (int j = 0; j < m; ++j)
    for (int i = 1; i < n; ++i)
      if (s.at(i, j) > s.at(col_best[j], j)) col_best[j] = i;
  LocalMatch best;
  bool found = false;
  for (int i = 0; i < n; ++i) {
    const int j = row_best[i];
    if (col_best[j] != i) continue;
    if (!found || s.at(i, j) > best.score) {
      best = {i, j, static_cast<double>(s.at(i, j)), false};
      found = true;
    }
  }
  if (found) return best;
  best = {0, 0, static_cast<double>(s.at(0, 0)), true};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      if (s.at(i, j) > best.score) best = {i, j, static_cast<double>(s.at(i, j)), true};
  return best;
}

// ---------------------------------------------------------------- subpixel step

/// Offsets (dx, dy) of the 3x3 neighbourhood in row-major order.
inline constexpr int kNeighbourDx[9] = {-1, 0, 1, -1, 0, 1, -1, 0, 1};
inline constexpr int kNeighbourDy[9] = {-1, -1, -1, 0, 0, 0, 1, 1, 1};

/// Flat [C, 9] indices of the clamped 3x3 neighbourhood around `center` in a [C, H, W] map.
inline std::vector<int> neighbourhood_indices(int channels, int h, int w, FinePoint center) {
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(channels) * 9);
  for (int c = 0; c < channels; ++c)
    for (int k = 0; k < 9; ++k) {
      const int y = std::clamp(center.y + kNeighbourDy[k], 0, h - 1);
      const int x = std::clamp(center.x + kNeighbourDx[k], 0, w - 1);
      idx.push_back((c * h + y) * w + x);
    }
  return idx;
}

/// Displacements [9, 2] of the clamped 3x3 neighbourhood around `center`.
/// Away from the border these are the nominal offsets.
template <class T>
Tensor<T> neighbourhood_deltas(int h, int w, FinePoint center) {
  Tensor<T> d({9, 2});
  for (int k = 0; k < 9; ++k) {
    d.at(k, 0) = static_cast<T>(std::clamp(center.x + kNeighbourDx[k], 0, w - 1) - center.x);
    d.at(k, 1) = static_cast<T>(std::clamp(center.y + kNeighbourDy[k], 0, h - 1) - center.y);
  }
  return d;
}

/// Softmax-weighted offset in fine cells. query [C, 1], neighbours [C, 9],
/// deltas [9, 2] -> [1, 2] = (dx, dy).
template <class T>
Var<T> expected_offset(Var<T> query, Var<T> neighbours, T temperature, Tensor<T> deltas) {
  auto& tape = *query.tape();
  Var<T> logits = ad::scale(ad::matmul(query, neighbours, true, false), T(1) / temperature);  // [1, 9]
  Var<T> prob = ad::softmax(logits, 1);
  return ad::matmul(prob, tape.constant(std::move(deltas)));
}

template <class T>
Var<T> expected_offset(Var<T> query, Var<T> neighbours, T temperature) {
  return expected_offset(query, neighbours, temperature, neighbourhood_deltas<T>(3, 3, {1, 1}));
}

/// Refined pixel position in B for query feature qa [C] against the 3x3 block
/// pb3 [C, 3, 3] centred on fine cell `center_b`.
template <class T>
Point2 subpixel_expectation(const Tensor<T>& qa, const Tensor<T>& pb3, FinePoint center_b, T temperature,
                            Tensor<T> deltas) {
  const int c = static_cast<int>(qa.numel());
  if (pb3.numel() != static_cast<std::size_t>(c) * 9) throw ShapeError("3x3 block size mismatch");
  ad::Tape<T> tape;
  Var<T> off = expected_offset(tape.constant(Tensor<T>({c, 1}, qa.data)), tape.constant(Tensor<T>({c, 9}, pb3.data)),
                               temperature, std::move(deltas));
  return fine_to_pixel(center_b.x + static_cast<double>(off.value().data[0]),
                       center_b.y + static_cast<double>(off.value().data[1]));
}

template <class T>
Point2 subpixel_expectation(const Tensor<T>& qa, const Tensor<T>& pb3, FinePoint center_b, T temperature) {
  return subpixel_expectation(qa, pb3, center_b, temperature, neighbourhood_deltas<T>(3, 3, {1, 1}));
}

// ---------------------------------------------------------------- inference

/// Runs local matching and the subpixel step for every coarse match on fused
/// fine maps fa, fb [C_f, H/2, W/2].
template <class T>
FineMatchSet refine_matches(Var<T> fa, Var<T> fb, const CoarseMatchSet& coarse, int coarse_w_a, int coarse_w_b,
                            int win, T temperature, double width_b, double height_b) {
  FineMatchSet out;
  const int c = fa.dim(0);
  const int ha = fa.dim(1), wa = fa.dim(2), hb = fb.dim(1), wb = fb.dim(2);
  const auto patches = crop_patches(fa, fb, coarse, win, coarse_w_a, coarse_w_b);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const auto& pp = patches[k];
    Var<T> s = local_scores(pp.patch_a, pp.patch_b, temperature);
    const LocalMatch lm = local_match(s.value());
    const FinePoint pa = window_pixel(pp.origin_a, lm.ia, win, ha, wa);
    const FinePoint pb = window_pixel(pp.origin_b, lm.ib, win, hb, wb);
    Var<T> q = ad::gather(fa, neighbourhood_indices(c, ha, wa, pa), {c, 9});
    Tensor<T> qa({c, 1});
    for (int ch = 0; ch < c; ++ch) qa.data[ch] = q.value().data[ch * 9 + 4];
    Var<T> nb = ad::gather(fb, neighbourhood_indices(c, hb, wb, pb), {c, 9});
    const Point2 b = subpixel_expectation(qa, nb.value(), pb, temperature, neighbourhood_deltas<T>(hb, wb, pb));
    const Point2 a = fine_to_pixel(pa.x, pa.y);
    FineMatch fm;
    fm.xa = a.x;
    fm.ya = a.y;
    fm.xb = std::clamp(b.x, -0.5, width_b - 0.5);
    fm.yb = std::clamp(b.y, -0.5, height_b - 0.5);
    fm.confidence = coarse[k].confidence;
    fm.coarse_parent = static_cast<int>(k);
    fm.low_confidence = lm.fallback;
    out.entries.push_back(fm);
  }
  return out;
}

}  // namespace imd::matching
