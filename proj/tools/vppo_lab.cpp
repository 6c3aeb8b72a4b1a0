// Command-line entry point: train | eval | analyze | variance | compare.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "vppo/harness.hpp"
#include "vppo/losses.hpp"
#include "vppo/trainer.hpp"

namespace {

using vppo::harness::TrainConfig;

// Config resolution: defaults, then --config file, then per-key flags.
struct ConfigArgs {
  std::string config_path;
  std::map<std::string, std::string> overrides;

  TrainConfig resolve() const {
    TrainConfig config = config_path.empty() ? TrainConfig{}
                                             : vppo::harness::parse_config_file(config_path);
    for (const auto& [key, value] : overrides) vppo::harness::apply_override(config, key, value);
    config.validate();
    return config;
  }
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_path, "config file (key=value lines, '#' comments)");
  for (const std::string& key : vppo::harness::config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key, [&args, key](const std::string& value) { args.overrides[key] = value; },
        "override config key '" + key + "'");
  }
}

std::string run_dir(const std::string& out, const TrainConfig& config) {
  if (!out.empty()) return out;
  const std::string base = vppo::harness::default_out_root();
  std::string dir = base + "/" + vppo::losses::objective_name(config.objective) + "_seed" +
                    std::to_string(config.seed);
  std::string candidate = dir;
  for (int i = 1; std::filesystem::exists(candidate); ++i)
    candidate = dir + "_" + std::to_string(i);
  return candidate;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale RL lab for visually-perceptive policy optimization"};
  app.require_subcommand(1);

  ConfigArgs train_args, variance_args;
  std::string out_dir;
  std::string checkpoint_path;
  int n = 1000;
  uint64_t seed = 1;
  int live_n = 0;
  double threshold = 0.95;
  std::vector<std::string> streams;
  std::string compare_csv;

  CLI::App* train = app.add_subcommand("train", "run a training experiment");
  add_config_options(train, train_args);
  train->add_option("--out", out_dir, "output directory (default derives from $VPPO_LAB_OUT)");

  CLI::App* eval = app.add_subcommand("eval", "greedy accuracy of a checkpoint");
  eval->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("-n", n, "number of instances");
  eval->add_option("--seed", seed, "evaluation seed");

  CLI::App* analyze = app.add_subcommand("analyze", "dependency histograms and token report");
  analyze->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();
  analyze->add_option("-n", n, "number of trajectories");
  analyze->add_option("--seed", seed, "sampling seed");
  analyze->add_option("--out", out_dir, "output directory");

  CLI::App* variance = app.add_subcommand("variance", "variance-reduction ratio checks");
  add_config_options(variance, variance_args);
  variance->add_option("--out", out_dir, "output directory");
  variance->add_option("--live", live_n, "also run the live check with this many trajectories");
  variance->add_option("--checkpoint", checkpoint_path, "policy snapshot for the live check");

  CLI::App* compare = app.add_subcommand("compare", "convergence comparison of metrics streams");
  compare->add_option("streams", streams, "metrics.jsonl files")->required()->expected(-2);
  compare->add_option("--threshold", threshold, "accuracy threshold");
  compare->add_option("--csv", compare_csv, "write report CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const TrainConfig config = train_args.resolve();
      return vppo::harness::cmd_train(config, run_dir(out_dir, config));
    }
    if (eval->parsed()) return vppo::harness::cmd_eval(checkpoint_path, n, seed);
    if (analyze->parsed()) {
      const std::string dir = out_dir.empty() ? vppo::harness::default_out_root() + "/analysis" : out_dir;
      return vppo::harness::cmd_analyze(checkpoint_path, n, dir, seed);
    }
    if (variance->parsed()) {
      const TrainConfig config = variance_args.resolve();
      const std::string dir = out_dir.empty() ? vppo::harness::default_out_root() + "/variance" : out_dir;
      return vppo::harness::cmd_variance(config, dir, live_n, checkpoint_path);
    }
    if (compare->parsed()) return vppo::harness::cmd_compare(streams, threshold, compare_csv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
