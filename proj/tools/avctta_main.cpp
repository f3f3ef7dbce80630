// Command-line front end: run | sweep | forgetting over flat key=value
// experiment configs. See README.md for the config key reference and the
// output file formats.

#include "avctta/config.hpp"
#include "avctta/harness.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::int64_t seed = -1;  // -1: keep the config's seed
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config file")
      ->required();
  cmd->add_option("--set", args.overrides,
                  "override a config key (KEY=VALUE, repeatable)");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "override the global seed");
}

avctta::ExperimentConfig load(const CommonArgs& args) {
  avctta::FlatConfig flat = avctta::FlatConfig::parse_file(args.config_path);
  for (const auto& assignment : args.overrides) {
    flat.apply_override(assignment);
  }
  if (args.seed >= 0) {
    flat.set("seed", std::to_string(args.seed));
  }
  return avctta::experiment_from_flat(flat);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual test-time adaptation experiment harness"};
  app.require_subcommand(1);

  CommonArgs run_args, sweep_args, forget_args;
  CLI::App* run = app.add_subcommand("run", "single adaptation run");
  add_common(run, run_args);
  CLI::App* sweep =
      app.add_subcommand("sweep", "run once per value of a swept parameter");
  add_common(sweep, sweep_args);
  CLI::App* forgetting = app.add_subcommand(
      "forgetting", "compare methods on one stream by source-accuracy drop");
  add_common(forgetting, forget_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      avctta::cmd_run(load(run_args), run_args.out_dir);
    } else if (sweep->parsed()) {
      avctta::cmd_sweep(load(sweep_args), sweep_args.out_dir);
    } else if (forgetting->parsed()) {
      avctta::cmd_forgetting(load(forget_args), forget_args.out_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
