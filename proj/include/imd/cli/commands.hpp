#pragma once

// Command implementations behind the `imd` executable. Every command writes
// only under its output directory and returns a process exit code
// (0 ok, 1 error, 2 empty result).

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "imd/data/dataset.hpp"
#include "imd/data/png.hpp"
#include "imd/data/synthetic.hpp"
#include "imd/pipeline/checkpoint.hpp"
#include "imd/pipeline/evaluate.hpp"
#include "imd/pipeline/train.hpp"

namespace imd::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kError = 1, kEmpty = 2 };

// ---------------------------------------------------------------- run config

struct RunConfig {
  MatchingConfig matching;
  cipm::PromptMode prompt_mode = cipm::PromptMode::Cross;
  std::string train_data;
  std::string eval_data;
  std::string checkpoint;
  std::string out = "out";
  int steps = 2000;
  double lr = 2e-3;
  int batch = 4;
  int jobs = 1;
  int checkpoint_every = 500;
  double homography_ransac_px = 2.0;
  double pose_ransac_px = 0.5;
  int ransac_iterations = 2000;

  void validate() const {
    matching.validate();
    if (steps < 0 || batch < 1 || jobs < 1 || checkpoint_every < 0)
      throw ConfigError("steps >= 0, batch >= 1, jobs >= 1 and checkpoint_every >= 0 required");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(homography_ransac_px > 0) || !(pose_ransac_px > 0) || ransac_iterations < 1)
      throw ConfigError("RANSAC thresholds and iteration count must be positive");
  }

  pipeline::ModelSpec model_spec() const {
    pipeline::ModelSpec s;
    s.prompt_mode = prompt_mode;
    return s;
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  const auto& m = c.matching;
  nlohmann::ordered_json j;
  j["tau"] = m.tau;
  j["temperature"] = m.temperature;
  j["fine_temperature"] = m.fine_temperature;
  j["n_attn"] = m.n_attn;
  j["timestep"] = m.timestep;
  j["block_index"] = m.block_index;
  j["fine_window"] = m.fine_window;
  j["alpha"] = m.alpha;
  j["beta"] = m.beta;
  j["focal_gamma"] = m.focal_gamma;
  j["occlusion_tolerance"] = m.occlusion_tolerance;
  j["seed"] = m.seed;
  j["prompt_mode"] = cipm::to_string(c.prompt_mode);
  j["train_data"] = c.train_data;
  j["eval_data"] = c.eval_data;
  j["checkpoint"] = c.checkpoint;
  j["out"] = c.out;
  j["steps"] = c.steps;
  j["lr"] = c.lr;
  j["batch"] = c.batch;
  j["jobs"] = c.jobs;
  j["checkpoint_every"] = c.checkpoint_every;
  j["homography_ransac_px"] = c.homography_ransac_px;
  j["pose_ransac_px"] = c.pose_ransac_px;
  j["ransac_iterations"] = c.ransac_iterations;
  return j;
}

/// Every key of the dumped form must be present and no other key is accepted.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto reference = to_json(RunConfig{});
  std::vector<std::string> missing, unknown;
  for (const auto& [k, v] : reference.items())
    if (!j.contains(k)) missing.push_back(k);
  for (const auto& [k, v] : j.items())
    if (!reference.contains(k)) unknown.push_back(k);
  auto joined = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
  };
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + joined(unknown));
  if (!missing.empty()) throw ConfigError("missing config keys: " + joined(missing));
  RunConfig c;
  try {
    imd::from_json(j, c.matching);
    c.prompt_mode = cipm::prompt_mode_from_string(j.at("prompt_mode").get<std::string>());
    c.train_data = j.at("train_data").get<std::string>();
    c.eval_data = j.at("eval_data").get<std::string>();
    c.checkpoint = j.at("checkpoint").get<std::string>();
    c.out = j.at("out").get<std::string>();
    c.steps = j.at("steps").get<int>();
    c.lr = j.at("lr").get<double>();
    c.batch = j.at("batch").get<int>();
    c.jobs = j.at("jobs").get<int>();
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
    c.homography_ransac_px = j.at("homography_ransac_px").get<double>();
    c.pose_ransac_px = j.at("pose_ransac_px").get<double>();
    c.ransac_iterations = j.at("ransac_iterations").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  try {
    return run_config_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

/// Relative paths that do not exist are looked up under $IMD_CACHE.
inline fs::path resolve_input(const std::string& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("no ") + what + " given");
  fs::path path(p);
  if (fs::exists(path)) return path;
  if (const char* cache = std::getenv("IMD_CACHE"); cache && path.is_relative() && fs::exists(fs::path(cache) / path))
    return fs::path(cache) / path;
  throw ConfigError(std::string(what) + " not found: " + p);
}

// ---------------------------------------------------------------- overlays

struct Rgb {
  std::uint8_t r, g, b;
};
inline constexpr Rgb kGreen{40, 220, 60}, kRed{230, 40, 40};

/// A and B side by side with one line per match.
inline Image draw_matches(const Image& a, const Image& b, const FineMatchSet& m, const std::vector<Rgb>& colors) {
  Image out(std::max(a.height(), b.height()), a.width() + b.width(), "overlay");
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = a.at(y, x, c);
  for (int y = 0; y < b.height(); ++y)
    for (int x = 0; x < b.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, a.width() + x, c) = b.at(y, x, c);
  for (std::size_t k = 0; k < m.size(); ++k) {
    const auto& e = m.entries[k];
    const Rgb col = k < colors.size() ? colors[k] : kGreen;
    const double x0 = e.xa, y0 = e.ya, x1 = e.xb + a.width(), y1 = e.yb;
    const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int i = 0; i <= n; ++i) {
      const int x = static_cast<int>(std::lround(x0 + (x1 - x0) * i / n));
      const int y = static_cast<int>(std::lround(y0 + (y1 - y0) * i / n));
      if (x < 0 || y < 0 || x >= out.width() || y >= out.height()) continue;
      out.at(y, x, 0) = col.r;
      out.at(y, x, 1) = col.g;
      out.at(y, x, 2) = col.b;
    }
  }
  return out;
}

// ---------------------------------------------------------------- parallel map

/// Runs fn(i) for i in [0, n) on `jobs` threads; results land in slot i.
template <class R, class Fn>
std::vector<R> parallel_map(std::size_t n, int jobs, Fn fn) {
  std::vector<R> out(n);
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t w, std::size_t stride) {
    for (std::size_t i = w; i < n; i += stride) try {
        out[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(jobs, n));
  if (workers == 1) work(0, 1);
  else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------- gen-data

struct GenDataOptions {
  std::string kind = "warp";  // warp | multi-instance | posed
  int n = 100;
  std::uint64_t seed = 0;
  std::string out;
  std::string split = "train";
  int size = 64;
  std::string texture = "mixed";
  double magnitude = 1.0;
  int instances = 2;
  int jobs = 1;
};

/// Record i is generated from mix_seed(seed, i), so any prefix of a larger set
/// equals the smaller set.
inline int cmd_gen_data(const GenDataOptions& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  if (o.n < 1 || o.size < 8) throw ConfigError("--n must be >= 1 and --size >= 8");
  data::DatasetWriter w(o.out);
  auto id = [&](int i) {
    std::ostringstream s;
    s << o.split << "_" << std::setw(5) << std::setfill('0') << i;
    return s.str();
  };
  auto seed = [&](std::size_t i) { return pipeline::mix_seed(o.seed, i); };
  if (o.kind == "warp") {
    const auto mode = data::texture_mode_from_string(o.texture);
    const auto pairs = parallel_map<data::WarpPair>(
        o.n, o.jobs, [&](std::size_t i) { return data::gen_synthetic_pair(seed(i), mode, o.magnitude, o.size, o.size); });
    for (int i = 0; i < o.n; ++i) w.add_warp(id(i), pairs[i], o.split);
  } else if (o.kind == "multi-instance") {
    const auto pairs = parallel_map<data::MultiInstancePair>(
        o.n, o.jobs, [&](std::size_t i) { return data::gen_multi_instance_pair(seed(i), o.instances, o.size, o.size); });
    for (int i = 0; i < o.n; ++i) w.add_multi_instance(id(i), pairs[i], o.split);
  } else if (o.kind == "posed") {
    const auto pairs = parallel_map<data::PosedPair>(
        o.n, o.jobs, [&](std::size_t i) { return data::gen_posed_pair(seed(i), o.size, o.size); });
    for (int i = 0; i < o.n; ++i) w.add_posed(id(i), pairs[i], o.split);
  } else {
    throw ConfigError("unknown --kind '" + o.kind + "' (expected warp|multi-instance|posed)");
  }
  w.finish();
  return kOk;
}

// ---------------------------------------------------------------- train

inline std::vector<pipeline::TrainSample> load_training_samples(const data::Dataset& ds, const MatchingConfig& cfg,
                                                                int jobs) {
  auto loaded = parallel_map<std::optional<pipeline::TrainSample>>(
      ds.size(), jobs, [&](std::size_t i) { return pipeline::make_sample(ds.load(i), cfg); });
  std::vector<pipeline::TrainSample> out;
  for (auto& s : loaded)
    if (s) out.push_back(std::move(*s));
  return out;
}

/// Trains from scratch on cfg.train_data; the checkpoint goes to `ckpt_dir` and
/// a JSON-lines step log (with wall-clock times) to `log_path`.
inline ad::ParamSet<float> train_model(const RunConfig& cfg, const fs::path& ckpt_dir, const fs::path& log_path,
                                   bool verbose) {
  const data::Dataset ds(resolve_input(cfg.train_data, "training data"));
  const auto samples = load_training_samples(ds, cfg.matching, cfg.jobs);
  if (samples.empty()) throw ConfigError("training data has no homography or pose supervised pairs");
  const auto spec = cfg.model_spec();
  auto params = pipeline::init_params(spec, cfg.matching.seed);
  fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path);
  pipeline::TrainOptions o;
  o.steps = cfg.steps;
  o.lr = cfg.lr;
  o.batch = cfg.batch;
  o.jobs = cfg.jobs;
  o.warmup = std::min(100, std::max(1, cfg.steps / 10));
  o.checkpoint_every = cfg.checkpoint_every;
  o.checkpoint_dir = ckpt_dir;
  o.on_step = [&](const pipeline::StepLog& s) {
    const nlohmann::ordered_json j = {{"step", s.step},           {"lr", s.lr},
                                      {"loss", s.loss.total},     {"coarse", s.loss.coarse},
                                      {"fine_l1", s.loss.fine_l1}, {"fine_l2", s.loss.fine_l2},
                                      {"seconds", s.seconds}};
    log << j.dump() << "\n";
    if (verbose && (s.step % 50 == 0 || s.step + 1 == cfg.steps))
      std::cerr << "step " << s.step << "/" << cfg.steps << " loss " << s.loss.total << "\n";
  };
  pipeline::train(params, spec, cfg.matching, samples, o);
  return params;
}

inline int cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const fs::path out(cfg.out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  train_model(cfg, out / "checkpoint", out / "train_log.jsonl", true);
  return kOk;
}

// ---------------------------------------------------------------- match

inline pipeline::Checkpoint load_model(const RunConfig& cfg) {
  return pipeline::load_checkpoint(resolve_input(cfg.checkpoint, "checkpoint"), cfg.model_spec());
}

inline std::string matches_jsonl(const pipeline::MatchResult& m) {
  std::string s;
  for (const auto& c : m.coarse) {
    const Point2 pa = cell_center(c.idx_a, m.grid_w_a, kCoarseStride), pb = cell_center(c.idx_b, m.grid_w_b, kCoarseStride);
    s += nlohmann::ordered_json{{"xa", pa.x}, {"ya", pa.y}, {"xb", pb.x}, {"yb", pb.y},
                                {"conf", c.confidence}, {"level", "coarse"}}.dump() + "\n";
  }
  for (const auto& f : m.fine.entries)
    s += nlohmann::ordered_json{{"xa", f.xa}, {"ya", f.ya}, {"xb", f.xb}, {"yb", f.yb},
                                {"conf", f.confidence}, {"level", "fine"}}.dump() + "\n";
  return s;
}

inline int cmd_match(const RunConfig& cfg, const std::string& image_a, const std::string& image_b, bool overlay) {
  cfg.validate();
  const auto ck = load_model(cfg);
  const Image a = data::read_png(resolve_input(image_a, "image"), "a");
  const Image b = data::read_png(resolve_input(image_b, "image"), "b");
  const auto m = pipeline::match_images(ck.params, ck.spec, cfg.matching, a, b);
  const fs::path out(cfg.out);
  write_text(out / "matches.jsonl", matches_jsonl(m));
  if (overlay) {
    fs::create_directories(out);
    data::write_png(out / "overlay.png", draw_matches(a, b, m.fine, {}));
  }
  return m.fine.empty() && m.coarse.empty() ? kEmpty : kOk;
}

// ---------------------------------------------------------------- evaluation

enum class Protocol { Imim, Pose, Homography };

inline const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Imim: return "imim";
    case Protocol::Pose: return "pose";
    case Protocol::Homography: return "homography";
  }
  return "?";
}

inline bool record_has(const data::PairRecord& r, Protocol p) {
  switch (p) {
    case Protocol::Imim: return r.masks.has_value();
    case Protocol::Pose: return r.frame_a.has_value();
    case Protocol::Homography: return r.H.has_value();
  }
  return false;
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

struct EvalOutput {
  nlohmann::ordered_json report;  // {"protocol", "per_pair": [...], "aggregate": {...}}
  int pairs = 0;
};

/// Evaluates every record of `ds` that carries `protocol` supervision.
/// Per-pair entries are sorted by pair id. With `overlay_dir` set, one overlay
/// per pair is written there (green = correct under the protocol's ground truth).
inline EvalOutput evaluate_dataset(const pipeline::Checkpoint& ck, const RunConfig& cfg, const data::Dataset& ds,
                                   Protocol protocol, const fs::path& overlay_dir = {}) {
  struct Row {
    bool used = false;
    std::string id;
    nlohmann::ordered_json json;
    eval::ImimReport imim;
    double error = pipeline::kInf;
    long coarse = 0, coarse_correct = 0;
  };
  auto rows = parallel_map<Row>(ds.size(), cfg.jobs, [&](std::size_t i) {
    Row row;
    const auto r = ds.load(i);
    if (!record_has(r, protocol)) return row;
    row.used = true;
    row.id = r.id;
    const auto m = pipeline::match_images(ck.params, ck.spec, cfg.matching, r.a, r.b);
    eval::RansacOptions ro;
    ro.max_iterations = cfg.ransac_iterations;
    ro.seed = pipeline::mix_seed(cfg.matching.seed, i);
    std::vector<Rgb> colors;
    nlohmann::ordered_json& j = row.json;
    j["id"] = r.id;
    j["coarse_matches"] = m.coarse.size();
    j["fine_matches"] = m.fine.size();
    if (protocol == Protocol::Imim) {
      row.imim = eval::imim_score(m.fine, *r.masks, std::pair{r.a.height(), r.a.width()},
                                  std::pair{r.b.height(), r.b.width()});
      j["n"] = row.imim.n_source_hits;
      j["m"] = row.imim.n_both_hits;
      j["score"] = row.imim.score;
      j["valid"] = row.imim.valid;
      for (const auto& f : m.fine.entries)
        colors.push_back(eval::detail::mask_contains(r.masks->source_mask, f.xa, f.ya) &&
                                 eval::detail::mask_contains(r.masks->target_mask, f.xb, f.yb)
                             ? kGreen
                             : kRed);
    } else if (protocol == Protocol::Pose) {
      ro.threshold_px = cfg.pose_ransac_px;
      const auto p = pipeline::evaluate_pose_pair(m.fine, *r.frame_a, *r.frame_b, ro);
      row.error = p.value;
      j["rotation_deg"] = finite_or_null(p.failed ? pipeline::kInf : p.error.rotation_deg);
      j["translation_deg"] = finite_or_null(p.failed ? pipeline::kInf : p.error.translation_deg);
      j["error_deg"] = finite_or_null(p.value);
      j["failed"] = p.failed;
      if (p.failed) j["failure"] = p.failure;
    } else {
      ro.threshold_px = cfg.homography_ransac_px;
      const auto h = pipeline::evaluate_homography_pair(m, *r.H, r.a.width(), r.a.height(), ro);
      row.error = h.corner_error;
      row.coarse = h.n_coarse;
      row.coarse_correct = h.n_coarse_correct;
      j["coarse_correct"] = h.n_coarse_correct;
      j["coarse_precision"] = h.n_coarse ? nlohmann::json(double(h.n_coarse_correct) / h.n_coarse) : nlohmann::json();
      j["corner_error_px"] = finite_or_null(h.corner_error);
      j["failed"] = h.failed;
      if (h.failed) j["failure"] = h.failure;
      for (const auto& f : m.fine.entries) {
        const auto q = apply_homography(*r.H, {f.xa, f.ya});
        colors.push_back(q && std::hypot(q->x - f.xb, q->y - f.yb) <= 3.0 ? kGreen : kRed);
      }
    }
    if (!overlay_dir.empty()) {
      fs::create_directories(overlay_dir);
      data::write_png(overlay_dir / (r.id + ".png"), draw_matches(r.a, r.b, m.fine, colors));
    }
    return row;
  });
  std::erase_if(rows, [](const Row& r) { return !r.used; });
  std::stable_sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) { return x.id < y.id; });

  EvalOutput out;
  out.pairs = static_cast<int>(rows.size());
  nlohmann::ordered_json per_pair = nlohmann::ordered_json::array(), agg;
  for (const auto& r : rows) per_pair.push_back(r.json);
  agg["pairs"] = rows.size();
  if (protocol == Protocol::Imim) {
    std::vector<eval::ImimReport> reports;
    for (const auto& r : rows) reports.push_back(r.imim);
    const auto a = eval::aggregate_imim(reports);
    agg["imim"] = a.mean_of_ratios;
    agg["imim_ratio_of_sums"] = a.ratio_of_sums;
    agg["valid_pairs"] = a.valid_pairs;
  } else if (!rows.empty()) {
    std::vector<double> errors;
    for (const auto& r : rows) errors.push_back(r.error);
    const std::vector<double> thr = protocol == Protocol::Pose ? std::vector<double>{5, 10, 20}
                                                               : std::vector<double>{3, 5, 10};
    const auto aucs = eval::auc(errors, thr);
    for (std::size_t k = 0; k < thr.size(); ++k) {
      std::ostringstream key;
      key << "auc@" << thr[k] << (protocol == Protocol::Pose ? "deg" : "px");
      agg[key.str()] = aucs[k];
    }
    agg["failures"] = std::count_if(errors.begin(), errors.end(), [](double e) { return !std::isfinite(e); });
    if (protocol == Protocol::Homography) {
      long n = 0, c = 0;
      for (const auto& r : rows) n += r.coarse, c += r.coarse_correct;
      agg["coarse_precision"] = n ? nlohmann::json(double(c) / n) : nlohmann::json();
      agg["coarse_matches"] = n;
    }
  }
  out.report = {{"protocol", protocol_name(protocol)}, {"per_pair", per_pair}, {"aggregate", agg}};
  return out;
}

inline int cmd_eval(const RunConfig& cfg, Protocol protocol, bool overlay) {
  cfg.validate();
  const auto ck = load_model(cfg);
  const data::Dataset ds(resolve_input(cfg.eval_data, "evaluation data"));
  const fs::path out(cfg.out);
  const auto r = evaluate_dataset(ck, cfg, ds, protocol,
                                  overlay ? out / (std::string("overlays_") + protocol_name(protocol)) : fs::path());
  write_text(out / (std::string("eval_") + protocol_name(protocol) + ".json"), r.report.dump(2) + "\n");
  return r.pairs == 0 ? kEmpty : kOk;
}

// ---------------------------------------------------------------- ablate

struct AblateOptions {
  std::vector<std::string> axes;            // subset of {prompt-mode, timestep}
  std::vector<std::string> prompt_modes = {"empty", "individual", "shared", "cross"};
  std::vector<int> timesteps = {0, 100};
};

/// Cross product over the requested axes. Each cell trains a fresh model with
/// the configured budget and evaluates every protocol present in eval_data.
inline int cmd_ablate(const RunConfig& cfg, const AblateOptions& o) {
  cfg.validate();
  if (o.axes.empty()) throw ConfigError("ablate needs at least one axis (prompt-mode, timestep)");
  std::set<std::string> seen;
  for (const auto& a : o.axes) {
    if (a != "prompt-mode" && a != "timestep") throw ConfigError("unknown ablation axis '" + a + "'");
    if (!seen.insert(a).second) throw ConfigError("axis '" + a + "' given twice");
  }
  const bool sweep_prompt = seen.count("prompt-mode"), sweep_t = seen.count("timestep");
  std::vector<cipm::PromptMode> modes;
  for (const auto& m : sweep_prompt ? o.prompt_modes : std::vector<std::string>{cipm::to_string(cfg.prompt_mode)})
    modes.push_back(cipm::prompt_mode_from_string(m));
  const std::vector<int> ts = sweep_t ? o.timesteps : std::vector<int>{cfg.matching.timestep};
  if (modes.empty() || ts.empty()) throw ConfigError("empty ablation axis values");

  const fs::path out(cfg.out);
  const data::Dataset eval_ds(resolve_input(cfg.eval_data, "evaluation data"));
  std::vector<Protocol> protocols;
  for (Protocol p : {Protocol::Homography, Protocol::Pose, Protocol::Imim})
    for (std::size_t i = 0; i < eval_ds.size(); ++i)
      if (record_has(eval_ds.load(i), p)) {
        protocols.push_back(p);
        break;
      }
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  std::vector<std::string> metric_keys;
  for (auto mode : modes)
    for (int t : ts) {
      RunConfig cell = cfg;
      cell.prompt_mode = mode;
      cell.matching.timestep = t;
      const std::string name = cipm::to_string(mode) + "_t" + std::to_string(t);
      const fs::path dir = out / "cells" / name;
      std::cerr << "ablate cell " << name << "\n";
      auto params = train_model(cell, dir / "checkpoint", dir / "train_log.jsonl", false);
      const pipeline::Checkpoint ck{cell.model_spec(), std::move(params), cell.steps};
      nlohmann::ordered_json row = {{"prompt_mode", cipm::to_string(mode)}, {"timestep", t}};
      for (Protocol p : protocols) {
        const auto r = evaluate_dataset(ck, cell, eval_ds, p);
        write_text(dir / (std::string("eval_") + protocol_name(p) + ".json"), r.report.dump(2) + "\n");
        for (const auto& [k, v] : r.report["aggregate"].items()) {
          if (k == "pairs" || k == "valid_pairs" || k == "failures" || k == "coarse_matches") continue;
          const std::string key = std::string(protocol_name(p)) + "." + k;
          row[key] = v;
          if (std::find(metric_keys.begin(), metric_keys.end(), key) == metric_keys.end()) metric_keys.push_back(key);
        }
      }
      rows.push_back(row);
    }

  const nlohmann::ordered_json report = {{"axes", o.axes}, {"config", to_json(cfg)}, {"rows", rows}};
  write_text(out / "ablate.json", report.dump(2) + "\n");
  std::ostringstream md;
  md << "| prompt_mode | timestep |";
  for (const auto& k : metric_keys) md << " " << k << " |";
  md << "\n|---|---|";
  for (std::size_t k = 0; k < metric_keys.size(); ++k) md << "---|";
  md << "\n";
  for (const auto& r : rows) {
    md << "| " << r["prompt_mode"].get<std::string>() << " | " << r["timestep"].get<int>() << " |";
    for (const auto& k : metric_keys) {
      md << " ";
      if (r.contains(k) && r[k].is_number()) md << std::fixed << std::setprecision(4) << r[k].get<double>();
      else md << "-";
      md << " |";
    }
    md << "\n";
  }
  write_text(out / "ablate.md", md.str());
  return kOk;
}

}  // namespace imd::cli
