#include <iostream>

#include "CLI11.hpp"
#include "imd/cli/commands.hpp"

namespace {

using imd::cli::RunConfig;

/// Flags shared by commands that take a run config. Values given on the
/// command line override the config file.
struct ConfigFlags {
  std::string config_path;
  std::string out, checkpoint, train_data, eval_data, prompt_mode;
  std::optional<int> steps, batch, jobs, timestep, checkpoint_every;
  std::optional<double> lr, focal_gamma, tau, ransac_px;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app, bool training) {
    app->add_option("--config", config_path, "run config JSON (see `imd config init`)");
    app->add_option("--out", out, "output directory");
    app->add_option("--jobs", jobs, "worker threads");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--prompt-mode", prompt_mode, "empty|individual|shared|cross");
    app->add_option("--timestep", timestep, "diffusion timestep t");
    if (training) {
      app->add_option("--train-data", train_data, "dataset directory");
      app->add_option("--steps", steps, "optimizer steps");
      app->add_option("--lr", lr, "peak learning rate");
      app->add_option("--batch", batch, "pairs per step");
      app->add_option("--focal-gamma", focal_gamma, "coarse loss focal exponent");
      app->add_option("--checkpoint-every", checkpoint_every, "checkpoint period in steps (0 = end only)");
    } else {
      app->add_option("--checkpoint", checkpoint, "checkpoint directory");
      app->add_option("--tau", tau, "coarse confidence threshold");
    }
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : imd::cli::load_run_config(config_path);
    if (!out.empty()) c.out = out;
    if (!checkpoint.empty()) c.checkpoint = checkpoint;
    if (!train_data.empty()) c.train_data = train_data;
    if (!eval_data.empty()) c.eval_data = eval_data;
    if (!prompt_mode.empty()) c.prompt_mode = imd::cipm::prompt_mode_from_string(prompt_mode);
    if (steps) c.steps = *steps;
    if (batch) c.batch = *batch;
    if (jobs) c.jobs = *jobs;
    if (timestep) c.matching.timestep = *timestep;
    if (checkpoint_every) c.checkpoint_every = *checkpoint_every;
    if (lr) c.lr = *lr;
    if (focal_gamma) c.matching.focal_gamma = *focal_gamma;
    if (tau) c.matching.tau = *tau;
    if (seed) c.matching.seed = *seed;
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"imd: diffusion-feature image matching at desk scale"};
  app.require_subcommand(1);
  std::function<int()> run;

  auto* config = app.add_subcommand("config", "run config helpers");
  auto* init = config->add_subcommand("init", "write the default run config to OUT/config.json");
  std::string init_out = ".";
  init->add_option("--out", init_out, "output directory");
  init->callback([&] {
    run = [&] {
      imd::cli::write_text(std::filesystem::path(init_out) / "config.json",
                           imd::cli::to_json(RunConfig{}).dump(2) + "\n");
      return 0;
    };
  });
  config->require_subcommand(1);

  imd::cli::GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen_cmd->add_option("--kind", gen.kind, "warp|multi-instance|posed")
      ->check(CLI::IsMember({"warp", "multi-instance", "posed"}));
  gen_cmd->add_option("--n", gen.n, "number of pairs");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->add_option("--out", gen.out, "dataset directory")->required();
  gen_cmd->add_option("--split", gen.split, "split tag written to every record");
  gen_cmd->add_option("--size", gen.size, "image side in pixels");
  gen_cmd->add_option("--texture", gen.texture, "noise|shapes|mixed (warp pairs)");
  gen_cmd->add_option("--magnitude", gen.magnitude, "warp magnitude in [0,1] (warp pairs)");
  gen_cmd->add_option("--instances", gen.instances, "instances per image (multi-instance pairs)");
  gen_cmd->add_option("--jobs", gen.jobs, "worker threads");
  gen_cmd->callback([&] { run = [&] { return imd::cli::cmd_gen_data(gen); }; });

  ConfigFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train a model; checkpoint goes to OUT/checkpoint");
  train_flags.add(train_cmd, true);
  train_cmd->callback([&] { run = [&] { return imd::cli::cmd_train(train_flags.resolve()); }; });

  ConfigFlags match_flags;
  std::string image_a, image_b;
  bool overlay = false;
  auto* match_cmd = app.add_subcommand("match", "match two PNG images; writes OUT/matches.jsonl");
  match_flags.add(match_cmd, false);
  match_cmd->add_option("image_a", image_a, "first image")->required();
  match_cmd->add_option("image_b", image_b, "second image")->required();
  match_cmd->add_flag("--overlay", overlay, "also write OUT/overlay.png");
  match_cmd->callback([&] { run = [&] { return imd::cli::cmd_match(match_flags.resolve(), image_a, image_b, overlay); }; });

  ConfigFlags eval_flags;
  bool eval_overlay = false;
  for (auto [name, protocol] : {std::pair{"eval-imim", imd::cli::Protocol::Imim},
                                std::pair{"eval-pose", imd::cli::Protocol::Pose},
                                std::pair{"eval-homography", imd::cli::Protocol::Homography}}) {
    auto* cmd = app.add_subcommand(name, std::string("evaluate a checkpoint; writes OUT/eval_") +
                                             imd::cli::protocol_name(protocol) + ".json");
    eval_flags.add(cmd, false);
    cmd->add_option("--eval-data", eval_flags.eval_data, "dataset directory");
    cmd->add_option("--ransac-px", eval_flags.ransac_px, "RANSAC inlier threshold in pixels");
    cmd->add_flag("--overlay", eval_overlay, "write one match overlay per pair");
    cmd->callback([&, protocol] {
      run = [&, protocol] {
        RunConfig c = eval_flags.resolve();
        if (eval_flags.ransac_px) {
          if (protocol == imd::cli::Protocol::Pose) c.pose_ransac_px = *eval_flags.ransac_px;
          else c.homography_ransac_px = *eval_flags.ransac_px;
        }
        return imd::cli::cmd_eval(c, protocol, eval_overlay);
      };
    });
  }

  ConfigFlags ablate_flags;
  imd::cli::AblateOptions ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate one model per sweep cell");
  ablate_flags.add(ablate_cmd, true);
  ablate_cmd->add_option("--eval-data", ablate_flags.eval_data, "dataset directory");
  ablate_cmd->add_option("--axes", ablate.axes, "prompt-mode and/or timestep")->delimiter(',')->required();
  ablate_cmd->add_option("--prompt-modes", ablate.prompt_modes, "values of the prompt-mode axis")->delimiter(',');
  ablate_cmd->add_option("--timesteps", ablate.timesteps, "values of the timestep axis")->delimiter(',');
  ablate_cmd->callback([&] { run = [&] { return imd::cli::cmd_ablate(ablate_flags.resolve(), ablate); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    return run();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return 1;
}
