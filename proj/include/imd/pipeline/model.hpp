#pragma once

// The full matcher: frozen latent and prompt encoders, prompt-conditioned UNet,
// coarse transformer, fine encoder and the refinement head, plus the training
// objective for one supervised pair.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "imd/cipm/cipm.hpp"
#include "imd/core/geometry.hpp"
#include "imd/core/image.hpp"
#include "imd/diffusion/backbone.hpp"
#include "imd/diffusion/schedule.hpp"
#include "imd/matching/coarse.hpp"
#include "imd/matching/fine.hpp"
#include "imd/supervision/losses.hpp"

namespace imd::pipeline {

using ad::Binder;
using ad::ParamSet;
using ad::Var;

struct ModelSpec {
  diffusion::BackboneSpec backbone;
  cipm::CipmSpec cipm;
  matching::CoarseSpec coarse;
  matching::FineSpec fine;
  cipm::PromptMode prompt_mode = cipm::PromptMode::Cross;
  int schedule_steps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;

  void validate() const {
    backbone.validate();
    if (backbone.out_channels != coarse.channels || coarse.channels != fine.coarse_channels)
      throw ConfigError("backbone out_channels, coarse channels and fine.coarse_channels must agree");
    if (backbone.prompt_dim != cipm.prompt_dim) throw ConfigError("backbone and CIPM prompt widths differ");
    diffusion::make_schedule(schedule_steps, beta_min, beta_max);
  }
};

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"backbone", diffusion::to_json(s.backbone)},
          {"cipm", cipm::to_json(s.cipm)},
          {"coarse", {{"channels", s.coarse.channels}, {"ffn_mult", s.coarse.ffn_mult}}},
          {"fine",
           {{"channels", s.fine.channels},
            {"coarse_channels", s.fine.coarse_channels},
            {"output_gain", s.fine.output_gain}}},
          {"prompt_mode", cipm::to_string(s.prompt_mode)},
          {"schedule", {{"steps", s.schedule_steps}, {"beta_min", s.beta_min}, {"beta_max", s.beta_max}}}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  if (j.contains("backbone")) s.backbone = diffusion::backbone_spec_from_json(j["backbone"]);
  if (j.contains("cipm")) s.cipm = cipm::cipm_spec_from_json(j["cipm"]);
  if (j.contains("coarse")) {
    s.coarse.channels = j["coarse"].value("channels", s.coarse.channels);
    s.coarse.ffn_mult = j["coarse"].value("ffn_mult", s.coarse.ffn_mult);
  }
  if (j.contains("fine")) {
    s.fine.channels = j["fine"].value("channels", s.fine.channels);
    s.fine.coarse_channels = j["fine"].value("coarse_channels", s.fine.coarse_channels);
    s.fine.output_gain = j["fine"].value("output_gain", s.fine.output_gain);
  }
  s.prompt_mode = cipm::prompt_mode_from_string(j.value("prompt_mode", std::string("cross")));
  if (j.contains("schedule")) {
    s.schedule_steps = j["schedule"].value("steps", s.schedule_steps);
    s.beta_min = j["schedule"].value("beta_min", s.beta_min);
    s.beta_max = j["schedule"].value("beta_max", s.beta_max);
  }
  return s;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Prefixes of parameters that are never trained.
inline const std::vector<std::string>& frozen_prefixes() {
  static const std::vector<std::string> p = {"enc.", "vis."};
  return p;
}

template <class T = float>
ParamSet<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamSet<T> p;
  diffusion::init_latent_encoder(p, spec.backbone, mix_seed(seed, 1));
  diffusion::init_unet(p, spec.backbone, mix_seed(seed, 2));
  cipm::init_image_encoder(p, spec.cipm, mix_seed(seed, 3));
  cipm::init_cipm(p, spec.cipm, mix_seed(seed, 4));
  matching::init_coarse(p, spec.coarse, mix_seed(seed, 5));
  matching::init_fine(p, spec.fine, mix_seed(seed, 6));
  return p;
}

template <class T>
struct PairForward {
  Var<T> prompt_a, prompt_b;
  Var<T> coarse_a, coarse_b;  // transformed, [C, h, w]
  Var<T> scores;              // [h_a w_a, h_b w_b]
  Var<T> prob;
  Var<T> fine_a, fine_b;  // fused, [C_f, H/2, W/2]
  int grid_w_a = 0, grid_w_b = 0;
};

/// Full forward pass on two image tensors [3, H, W] with H, W divisible by 8.
template <class T>
PairForward<T> forward_pair(Binder<T>& p, const Tensor<T>& image_a, const Tensor<T>& image_b, const ModelSpec& spec,
                            const MatchingConfig& cfg, std::uint64_t noise_seed) {
  for (const auto* img : {&image_a, &image_b})
    if (img->rank() != 3 || img->dim(1) % kCoarseStride || img->dim(2) % kCoarseStride)
      throw ShapeError("image tensor " + shape_str(img->shape) + " must be [3,H,W] with H, W divisible by 8");
  auto& tape = p.tape();
  Var<T> ia = tape.constant(image_a), ib = tape.constant(image_b);

  const auto schedule = diffusion::make_schedule(spec.schedule_steps, spec.beta_min, spec.beta_max);
  auto latent = [&](Var<T> img, std::uint64_t stream) {
    Var<T> z0 = diffusion::encode_latent(p, img);
    if (cfg.timestep == 0) return z0;
    return tape.constant(diffusion::add_noise(z0.value(), cfg.timestep, schedule, mix_seed(noise_seed, stream)));
  };
  Var<T> za = latent(ia, 0), zb = latent(ib, 1);

  PairForward<T> out;
  Var<T> ga = cipm::encode_image(p, ia, spec.cipm), gb = cipm::encode_image(p, ib, spec.cipm);
  std::tie(out.prompt_a, out.prompt_b) = cipm::make_prompts(p, ga, gb, spec.cipm, spec.prompt_mode);

  Var<T> ca = diffusion::extract_features(p, za, cfg.timestep, out.prompt_a, spec.backbone);
  Var<T> cb = diffusion::extract_features(p, zb, cfg.timestep, out.prompt_b, spec.backbone);
  std::tie(out.coarse_a, out.coarse_b) = matching::transform_features(p, ca, cb, cfg.n_attn);
  out.scores = matching::score_matrix(out.coarse_a, out.coarse_b, static_cast<T>(cfg.temperature));
  out.prob = matching::dual_softmax(out.scores);
  out.grid_w_a = ca.dim(2);
  out.grid_w_b = cb.dim(2);

  out.fine_a = matching::fuse_features(p, matching::encode_fine(p, ia), out.coarse_a);
  out.fine_b = matching::fuse_features(p, matching::encode_fine(p, ib), out.coarse_b);
  return out;
}

// ---------------------------------------------------------------- training objective

struct LossReport {
  double coarse = 0;
  double fine_l1 = 0;
  double fine_l2 = 0;
  double total = 0;
  int n_coarse = 0;
  int n_fine_l1 = 0;
  int n_fine_l2 = 0;
};

/// Fine-grid coordinates (continuous) of a pixel-space point.
inline Point2 pixel_to_fine(Point2 p) { return {(p.x + 0.5) / kFineStride - 0.5, (p.y + 0.5) / kFineStride - 0.5}; }

/// Builds the three-term loss for one pair on the tape. Windows are cropped at the
/// ground-truth coarse pairs. L_f1 supervises the A window centre against the B
/// window pixel nearest to its true image; L_f2 supervises the expectation step
/// around the (detached) best B pixel when the truth lies in that 3x3 block.
template <class T>
std::pair<Var<T>, LossReport> pair_loss(const PairForward<T>& f, const supervision::GtMatches& gt,
                                        const MatchingConfig& cfg) {
  auto& tape = *f.prob.tape();
  LossReport rep;
  Var<T> lc = supervision::coarse_loss(f.prob, gt.coarse_pairs, static_cast<T>(cfg.focal_gamma));
  rep.n_coarse = static_cast<int>(gt.coarse_pairs.size());

  const int win = cfg.fine_window;
  const int c = f.fine_a.dim(0);
  const int ha = f.fine_a.dim(1), wa = f.fine_a.dim(2), hb = f.fine_b.dim(1), wb = f.fine_b.dim(2);
  const T theta = static_cast<T>(cfg.fine_temperature);
  const auto patches = matching::crop_patches(f.fine_a, f.fine_b, gt.coarse_pairs, win, f.grid_w_a, f.grid_w_b);
  const int center_row = (win / 2) * win + win / 2;

  std::vector<Var<T>> scores;
  std::vector<supervision::LocalTarget> targets;
  std::vector<Var<T>> offsets;
  std::vector<Point2> l2_targets;
  std::vector<Point2> l2_bases;
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const auto& pp = patches[k];
    const matching::FinePoint pa{pp.origin_a.x + win / 2, pp.origin_a.y + win / 2};
    const auto truth = gt.warp ? gt.warp(matching::fine_to_pixel(pa.x, pa.y)) : std::optional<Point2>(gt.fine_targets[k]);
    if (!truth) continue;
    const Point2 tf = pixel_to_fine(*truth);
    Var<T> s = matching::local_scores(pp.patch_a, pp.patch_b, theta);

    supervision::LocalTarget tgt{center_row, -1};
    const int rx = static_cast<int>(std::lround(tf.x)), ry = static_cast<int>(std::lround(tf.y));
    const int lx = rx - pp.origin_b.x, ly = ry - pp.origin_b.y;
    if (lx >= 0 && ly >= 0 && lx < win && ly < win && rx >= 0 && ry >= 0 && rx < wb && ry < hb) tgt.col = ly * win + lx;
    scores.push_back(s);
    targets.push_back(tgt);

    // expectation step around the current best B pixel for the centre row
    const auto& sv = s.value();
    int best = 0;
    for (int j = 1; j < sv.dim(1); ++j)
      if (sv.at(center_row, j) > sv.at(center_row, best)) best = j;
    const matching::FinePoint pb = matching::window_pixel(pp.origin_b, best, win, hb, wb);
    if (std::abs(tf.x - pb.x) > 1.0 || std::abs(tf.y - pb.y) > 1.0) continue;
    std::vector<int> qi(c);
    for (int ch = 0; ch < c; ++ch) qi[ch] = (ch * ha + pa.y) * wa + pa.x;
    Var<T> q = ad::gather(f.fine_a, std::move(qi), {c, 1});
    Var<T> nb = ad::gather(f.fine_b, matching::neighbourhood_indices(c, hb, wb, pb), {c, 9});
    offsets.push_back(matching::expected_offset(q, nb, theta, matching::neighbourhood_deltas<T>(hb, wb, pb)));
    l2_targets.push_back(*truth);
    l2_bases.push_back(matching::fine_to_pixel(pb.x, pb.y));
  }

  auto l1 = supervision::fine_loss_l1(scores, targets, tape);
  rep.n_fine_l1 = l1.count;
  Var<T> lf2 = tape.constant(Tensor<T>({1}));
  if (!offsets.empty()) {
    // predicted pixel = base + stride * offset
    Tensor<T> base({static_cast<int>(l2_bases.size()), 2});
    for (std::size_t i = 0; i < l2_bases.size(); ++i) {
      base.data[2 * i] = static_cast<T>(l2_bases[i].x);
      base.data[2 * i + 1] = static_cast<T>(l2_bases[i].y);
    }
    Var<T> pred = ad::add(ad::scale(ad::concat(offsets, 0), static_cast<T>(kFineStride)), tape.constant(base));
    auto l2 = supervision::fine_loss_l2(pred, l2_targets, tape);
    lf2 = l2.value;
    rep.n_fine_l2 = l2.count;
  }
  Var<T> total =
      supervision::total_loss(lc, ad::reshape(l1.value, {1}), ad::reshape(lf2, {1}), static_cast<T>(cfg.alpha),
                              static_cast<T>(cfg.beta));
  rep.coarse = static_cast<double>(lc.item());
  rep.fine_l1 = static_cast<double>(l1.value.item());
  rep.fine_l2 = static_cast<double>(lf2.item());
  rep.total = static_cast<double>(total.item());
  return {total, rep};
}

// ---------------------------------------------------------------- inference

struct MatchResult {
  CoarseMatchSet coarse;
  FineMatchSet fine;
  int grid_w_a = 0, grid_w_b = 0;
};

/// Matches two images of any size: both are reflect-padded to multiples of 8 and
/// fine matches are kept only where the A point lies in the original image.
inline MatchResult match_images(const ParamSet<float>& params, const ModelSpec& spec, const MatchingConfig& cfg,
                                const Image& a, const Image& b) {
  cfg.validate();
  const Image pa = pad_to_multiple(a), pb = pad_to_multiple(b);
  ad::Tape<float> tape;
  Binder<float> p(tape, params);
  const auto f = forward_pair(p, image_to_tensor<float>(pa), image_to_tensor<float>(pb), spec, cfg, cfg.seed);
  MatchResult r;
  r.grid_w_a = f.grid_w_a;
  r.grid_w_b = f.grid_w_b;
  r.coarse = matching::select_matches(f.prob.value(), cfg.tau);
  FineMatchSet fine =
      matching::refine_matches(f.fine_a, f.fine_b, r.coarse, f.grid_w_a, f.grid_w_b, cfg.fine_window,
                               static_cast<float>(cfg.fine_temperature), b.width(), b.height());
  for (const auto& m : fine.entries)
    if (in_image({m.xa, m.ya}, a.width(), a.height())) r.fine.entries.push_back(m);
  return r;
}

}  // namespace imd::pipeline
