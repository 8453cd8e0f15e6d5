#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include "imd/data/dataset.hpp"
#include "imd/pipeline/checkpoint.hpp"
#include "imd/pipeline/model.hpp"
#include "imd/supervision/ground_truth.hpp"

namespace imd::pipeline {

struct TrainSample {
  std::string id;
  Tensor<float> a, b;  // [3, H, W], padded to multiples of 8
  supervision::GtMatches gt;
};

/// Supervision for one record, or nullopt when the record carries none (mask-only
/// pairs) or no cell centre of A has a valid image in B.
inline std::optional<TrainSample> make_sample(const data::PairRecord& r, const MatchingConfig& cfg) {
  const Image pa = pad_to_multiple(r.a), pb = pad_to_multiple(r.b);
  const supervision::Dims da{pa.width(), pa.height()}, db{pb.width(), pb.height()};
  supervision::GtMatches gt;
  if (r.H) gt = supervision::warp_homography(*r.H, kCoarseStride, da, db);
  else if (r.frame_a && r.frame_b)
    gt = supervision::warp_grid(*r.frame_a, *r.frame_b, kCoarseStride, db, cfg.occlusion_tolerance);
  else return std::nullopt;
  if (pa.width() != r.a.width() || pa.height() != r.a.height() || pb.width() != r.b.width() ||
      pb.height() != r.b.height()) {
    // drop supervision that touches the padded border
    supervision::GtMatches kept = gt;
    kept.coarse_pairs.clear();
    kept.fine_targets.clear();
    for (std::size_t k = 0; k < gt.size(); ++k) {
      const Point2 ca = cell_center(gt.coarse_pairs[k].first, gt.grid_w_a(), kCoarseStride);
      if (in_image(ca, r.a.width(), r.a.height()) && in_image(gt.fine_targets[k], r.b.width(), r.b.height())) {
        kept.coarse_pairs.push_back(gt.coarse_pairs[k]);
        kept.fine_targets.push_back(gt.fine_targets[k]);
      }
    }
    gt = std::move(kept);
  }
  if (gt.empty()) return std::nullopt;
  return TrainSample{r.id, image_to_tensor<float>(pa), image_to_tensor<float>(pb), std::move(gt)};
}

struct StepLog {
  long step = 0;
  double lr = 0;
  LossReport loss;  // batch mean
  double seconds = 0;
};

struct TrainOptions {
  int steps = 2000;
  double lr = 2e-3;
  int batch = 4;
  int jobs = 1;
  int warmup = 100;
  double final_lr_fraction = 0.05;
  double clip_norm = 1.0;
  double weight_decay = 0.0;
  int checkpoint_every = 0;  // 0 = only at the end (when a directory is given)
  std::filesystem::path checkpoint_dir;
  std::function<void(const StepLog&)> on_step;
};

/// Warm-up then cosine decay to final_lr_fraction * lr.
inline double learning_rate(const TrainOptions& o, long step) {
  if (step < o.warmup) return o.lr * (step + 1) / o.warmup;
  const double span = std::max(1, o.steps - o.warmup);
  const double progress = std::min(1.0, (step - o.warmup) / span);
  const double cosine = 0.5 * (1 + std::cos(std::numbers::pi * progress));
  return o.lr * (o.final_lr_fraction + (1 - o.final_lr_fraction) * cosine);
}

/// Loss and parameter gradients for one sample.
inline std::pair<LossReport, ParamSet<float>> sample_gradients(const ParamSet<float>& params, const ModelSpec& spec,
                                                               const MatchingConfig& cfg, const TrainSample& s,
                                                               std::uint64_t noise_seed) {
  ad::Tape<float> tape;
  Binder<float> p(tape, params, true, frozen_prefixes());
  const auto f = forward_pair(p, s.a, s.b, spec, cfg, noise_seed);
  auto [loss, rep] = pair_loss(f, s.gt, cfg);
  tape.backward(loss);
  return {rep, p.gradients()};
}

/// Minibatch AdamW training. Per-sample gradients may be computed on `jobs`
/// threads; they are always summed in batch order, so results do not depend on
/// the thread count.
inline void train(ParamSet<float>& params, const ModelSpec& spec, const MatchingConfig& cfg,
                  const std::vector<TrainSample>& samples, const TrainOptions& opt) {
  if (samples.empty()) throw ConfigError("no supervised training pairs");
  if (opt.batch < 1 || opt.jobs < 1 || opt.steps < 0) throw ConfigError("batch, jobs must be >= 1 and steps >= 0");
  ad::AdamW adam;
  adam.weight_decay = opt.weight_decay;
  std::mt19937_64 rng(mix_seed(cfg.seed, 100));
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  for (long step = 0; step < opt.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> batch(opt.batch);
    for (auto& b : batch) b = pick(rng);
    std::vector<std::pair<LossReport, ParamSet<float>>> results(opt.batch);
    auto work = [&](int w) {
      for (int i = w; i < opt.batch; i += opt.jobs)
        results[i] = sample_gradients(params, spec, cfg, samples[batch[i]],
                                      mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(step) * opt.batch + i));
    };
    if (opt.jobs == 1) work(0);
    else {
      std::vector<std::thread> pool;
      for (int w = 0; w < std::min(opt.jobs, opt.batch); ++w) pool.emplace_back(work, w);
      for (auto& t : pool) t.join();
    }

    ParamSet<float> grads = std::move(results[0].second);
    StepLog log;
    log.step = step;
    auto add_report = [&](const LossReport& r) {
      log.loss.coarse += r.coarse / opt.batch;
      log.loss.fine_l1 += r.fine_l1 / opt.batch;
      log.loss.fine_l2 += r.fine_l2 / opt.batch;
      log.loss.total += r.total / opt.batch;
      log.loss.n_coarse += r.n_coarse;
      log.loss.n_fine_l1 += r.n_fine_l1;
      log.loss.n_fine_l2 += r.n_fine_l2;
    };
    add_report(results[0].first);
    for (int i = 1; i < opt.batch; ++i) {
      add_report(results[i].first);
      for (auto& [name, g] : results[i].second) {
        auto& acc = grads.at(name).data;
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g.data[k];
      }
    }
    double sq = 0;
    for (auto& [name, g] : grads)
      for (auto& v : g.data) {
        v /= static_cast<float>(opt.batch);
        sq += static_cast<double>(v) * v;
      }
    const double norm = std::sqrt(sq);
    if (opt.clip_norm > 0 && norm > opt.clip_norm)
      for (auto& [name, g] : grads)
        for (auto& v : g.data) v = static_cast<float>(v * (opt.clip_norm / norm));

    adam.lr = learning_rate(opt, step);
    adam.step(params, grads);
    log.lr = adam.lr;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opt.on_step) opt.on_step(log);
    if (!opt.checkpoint_dir.empty() && opt.checkpoint_every > 0 && (step + 1) % opt.checkpoint_every == 0)
      save_checkpoint(opt.checkpoint_dir, params, spec, step + 1);
  }
  if (!opt.checkpoint_dir.empty()) save_checkpoint(opt.checkpoint_dir, params, spec, opt.steps);
}

}  // namespace imd::pipeline
