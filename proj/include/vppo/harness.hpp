#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vppo/config.hpp"

namespace vppo::harness {

inline constexpr const char* kCodeVersion = "vppo-lab 0.1.0";

// Resolution order: explicit --out, then $VPPO_LAB_OUT, then ./runs.
std::string default_out_root();

// Written before step 0 and never touched again; a completed.json marker
// carries the end timestamp.
void write_manifest(const TrainConfig& config, const std::string& out_dir,
                    const std::vector<std::string>& output_paths);

struct TrainOutcome {
  double init_eval_acc = 0.0;
  double final_eval_acc = 0.0;
  int skipped_steps = 0;
  std::string metrics_path;
  std::string final_checkpoint_path;
};

// Full training run: manifest, metrics stream (one JSON object per line),
// periodic checkpoints, summary. Returns the outcome; throws on any error.
TrainOutcome run_train(const TrainConfig& config, const std::string& out_dir);

int cmd_train(const TrainConfig& config, const std::string& out_dir);
int cmd_eval(const std::string& checkpoint_path, int n, uint64_t seed);
int cmd_analyze(const std::string& checkpoint_path, int n, const std::string& out_dir, uint64_t seed);

// Sandbox ratio grid (and optionally a live check with live_n trajectories,
// on the checkpoint if given, else on a fresh policy).
int cmd_variance(const TrainConfig& config, const std::string& out_dir, int live_n,
                 const std::string& checkpoint_path = "");

struct CompareRow {
  std::string path;
  std::string objective;
  std::optional<int64_t> steps_to_threshold;
  double final_eval_acc = 0.0;
};

struct CompareMedian {
  std::string objective;
  std::optional<int64_t> median_steps;  // empty when the median run never reached
  double median_final_acc = 0.0;
};

struct CompareReport {
  std::vector<CompareRow> rows;
  std::vector<CompareMedian> medians;
  double threshold = 0.95;
};

// Requires >= 2 metrics streams sharing the same step grid.
CompareReport compare_runs(const std::vector<std::string>& metrics_paths, double threshold);

int cmd_compare(const std::vector<std::string>& metrics_paths, double threshold,
                const std::string& out_csv);

}  // namespace vppo::harness
