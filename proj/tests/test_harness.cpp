#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vppo/analysis.hpp"
#include "vppo/harness.hpp"
#include "vppo/trainer.hpp"

using namespace vppo;
using harness::ConfigError;
using harness::TrainConfig;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TrainConfig tiny_run_config() {
  TrainConfig cfg;
  cfg.rollout_batch = 4;
  cfg.group_size = 4;
  cfg.steps = 3;
  cfg.eval_every = 1;
  cfg.eval_n = 8;
  cfg.checkpoint_every = 2;
  cfg.threads = 2;
  return cfg;
}

}  // namespace

TEST_CASE("parse_config: empty text yields the full defaults") {
  const TrainConfig cfg = harness::parse_config_text("");
  CHECK(cfg.k == 0.4);
  CHECK(cfg.beta_min == 0.9);
  CHECK(cfg.entropy_coef == 0.06);
  CHECK(cfg.group_size == 8);
  CHECK(cfg.eps_low == 0.2);
  CHECK(cfg.eps_high == 0.28);
  CHECK(cfg.top_p == 0.99);
  CHECK(cfg.objective == losses::Objective::kVppo);
  CHECK(cfg.beta_max_mode == signal::BetaMaxMode::kDynamic);
}

TEST_CASE("parse_config: comments, whitespace and overrides") {
  const std::string text =
      "# a comment line\n"
      "objective = grpo   # trailing comment\n"
      "\n"
      "k=0.8\n"
      "steps = 12\n";
  const TrainConfig cfg = harness::parse_config_text(text);
  CHECK(cfg.objective == losses::Objective::kGrpo);
  CHECK(cfg.k == 0.8);
  CHECK(cfg.steps == 12);

  TrainConfig base = cfg;
  harness::apply_override(base, "objective", "vppo");
  CHECK(base.objective == losses::Objective::kVppo);  // flag beats file
}

TEST_CASE("parse_config: unknown keys and out-of-range values name the problem") {
  CHECK_THROWS_WITH_AS(harness::parse_config_text("no_such_key=1\n"),
                       doctest::Contains("unknown key 'no_such_key'"), ConfigError);
  try {
    harness::parse_config_text("k=1.5\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("'k'") != std::string::npos);
    CHECK(msg.find("1") != std::string::npos);  // names the bound
  }
  CHECK_THROWS_AS(harness::parse_config_text("group_size=1\n"), ConfigError);
  CHECK_THROWS_AS(harness::parse_config_text("steps=abc\n"), ConfigError);
  CHECK_THROWS_AS(harness::parse_config_text("objective=ppo\n"), ConfigError);
  CHECK_THROWS_AS(harness::parse_config_text("k\n"), ConfigError);
}

TEST_CASE("serialize_config: canonical text round-trips") {
  TrainConfig cfg = tiny_run_config();
  cfg.k = 0.7;
  cfg.objective = losses::Objective::kDapo;
  const std::string text = harness::serialize_config(cfg);
  const TrainConfig back = harness::parse_config_text(text);
  CHECK(harness::serialize_config(back) == text);
  CHECK(back.k == 0.7);
  CHECK(back.objective == losses::Objective::kDapo);
  // Alphabetical key order.
  std::istringstream in(text);
  std::string prev, line;
  while (std::getline(in, line)) {
    const std::string key = line.substr(0, line.find('='));
    CHECK(prev < key);
    prev = key;
  }
}

TEST_CASE("run_train: writes manifest before metrics plus checkpoints and summary") {
  const fs::path dir = temp_dir("vppo_run_test");
  const TrainConfig cfg = tiny_run_config();
  const harness::TrainOutcome outcome = harness::run_train(cfg, dir.string());

  REQUIRE(fs::exists(dir / "manifest.json"));
  REQUIRE(fs::exists(dir / "metrics.jsonl"));
  REQUIRE(fs::exists(dir / "checkpoint_000002.vppo"));
  REQUIRE(fs::exists(dir / "checkpoint_final.vppo"));
  REQUIRE(fs::exists(dir / "summary.json"));
  REQUIRE(fs::exists(dir / "completed.json"));

  // Manifest carries the exact config snapshot.
  nlohmann::json manifest;
  std::ifstream(dir / "manifest.json") >> manifest;
  CHECK(manifest["master_seed"] == cfg.seed);
  CHECK(manifest["config"]["k"] == harness::config_to_map(cfg)["k"]);

  // Metrics stream: one JSON object per line with the full field set.
  std::ifstream metrics(dir / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    for (const char* field : {"step", "objective", "mean_reward", "eval_acc", "loss", "entropy",
                              "mean_alpha", "masked_fraction", "degenerate_groups", "wall_ms"})
      REQUIRE(j.contains(field));
    ++lines;
  }
  CHECK(lines == cfg.steps);
  CHECK(outcome.init_eval_acc >= 0.0);

  // The manifest's config reproduces the run: identical metrics modulo wall
  // time (manifest + config are the whole experiment record).
  TrainConfig replay;
  for (const auto& [key, value] : manifest["config"].items())
    harness::apply_override(replay, key, value.get<std::string>());
  const fs::path dir2 = temp_dir("vppo_run_test2");
  harness::run_train(replay, dir2.string());
  std::ifstream m1(dir / "metrics.jsonl"), m2(dir2 / "metrics.jsonl");
  std::string l1, l2;
  while (std::getline(m1, l1) && std::getline(m2, l2)) {
    nlohmann::json a = nlohmann::json::parse(l1), b = nlohmann::json::parse(l2);
    a["wall_ms"] = 0.0;
    b["wall_ms"] = 0.0;
    CHECK(a.dump() == b.dump());
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("compare_runs: steps-to-threshold, unreached streams, grid mismatch") {
  const fs::path dir = temp_dir("vppo_compare_test");
  auto write_stream = [&](const std::string& name, const std::string& objective,
                          std::vector<double> accs) {
    std::ofstream f(dir / name);
    for (size_t i = 0; i < accs.size(); ++i) {
      nlohmann::json j;
      j["step"] = i;
      j["objective"] = objective;
      j["eval_acc"] = accs[i];
      f << j.dump() << "\n";
    }
    return (dir / name).string();
  };
  const std::string a = write_stream("a.jsonl", "vppo", {0.1, 0.5, 0.96, 0.97});
  const std::string b = write_stream("b.jsonl", "vppo", {0.1, 0.2, 0.3, 0.99});
  const std::string c = write_stream("c.jsonl", "grpo", {0.1, 0.2, 0.3, 0.4});

  const harness::CompareReport report = harness::compare_runs({a, b, c}, 0.95);
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].steps_to_threshold == 2);
  CHECK(report.rows[1].steps_to_threshold == 3);
  CHECK_FALSE(report.rows[2].steps_to_threshold.has_value());
  CHECK(report.rows[2].final_eval_acc == 0.4);
  REQUIRE(report.medians.size() == 2);

  // Identical streams give identical steps-to-threshold.
  const harness::CompareReport same = harness::compare_runs({a, a}, 0.95);
  CHECK(same.rows[0].steps_to_threshold == same.rows[1].steps_to_threshold);

  const std::string d = write_stream("d.jsonl", "vppo", {0.1, 0.2});
  CHECK_THROWS_WITH_AS(harness::compare_runs({a, d}, 0.95), doctest::Contains("mismatched"),
                       ConfigError);
  CHECK_THROWS_AS(harness::compare_runs({a}, 0.95), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("default_out_root: honors VPPO_LAB_OUT") {
  setenv("VPPO_LAB_OUT", "/tmp/vppo_out_env", 1);
  CHECK(harness::default_out_root() == "/tmp/vppo_out_env");
  unsetenv("VPPO_LAB_OUT");
  CHECK(harness::default_out_root() == "runs");
}

TEST_CASE("cmd_analyze and cmd_variance produce their artifacts") {
  const fs::path dir = temp_dir("vppo_artifacts_test");
  TrainConfig cfg = tiny_run_config();
  cfg.steps = 1;
  const harness::TrainOutcome outcome = harness::run_train(cfg, (dir / "run").string());

  CHECK(harness::cmd_analyze(outcome.final_checkpoint_path, 40, (dir / "analysis").string(), 5) == 0);
  CHECK(fs::exists(dir / "analysis" / "dependency_histogram.csv"));
  CHECK(fs::exists(dir / "analysis" / "annotated_trajectories.txt"));
  CHECK(fs::exists(dir / "analysis" / "analysis.json"));

  // Histogram CSV has the exact column header and both levels.
  std::ifstream csv(dir / "analysis" / "dependency_histogram.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "bin_lo,bin_hi,count,level");
  bool saw_token = false, saw_traj = false;
  std::string line;
  while (std::getline(csv, line)) {
    saw_token |= line.find(",token") != std::string::npos;
    saw_traj |= line.find(",trajectory") != std::string::npos;
  }
  CHECK(saw_token);
  CHECK(saw_traj);

  TrainConfig vcfg = cfg;
  CHECK(harness::cmd_variance(vcfg, (dir / "variance").string(), 0) == 0);
  std::ifstream vcsv(dir / "variance" / "variance_ratio.csv");
  std::getline(vcsv, header);
  CHECK(header.find("empirical_ratio") != std::string::npos);
  int rows = 0;
  bool has_04 = false;
  while (std::getline(vcsv, line)) {
    ++rows;
    has_04 |= line.find("sandbox,0.4,") != std::string::npos;
  }
  CHECK(rows == 6);  // 3 k values x 2 alpha modes
  CHECK(has_04);
  fs::remove_all(dir);
}
