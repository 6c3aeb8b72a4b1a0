#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vppo/dependency.hpp"
#include "vppo/trainer.hpp"

namespace vppo::analysis {

// Dependency analysis over sampled trajectories: score histograms at token
// and trajectory level, plus the answer-vs-scaffold contrast. "Answer"
// positions are the digits inside the scored span (between the first ANS
// marker and its EOS); "template" positions are the filler and marker tokens
// that carry no grid content.
struct TokenTag {
  int token = 0;
  double score = 0.0;
  bool selected = false;  // in the top-k% of its trajectory
  bool is_answer = false;
  bool is_template = false;
};

struct AnnotatedTrajectory {
  std::string instance_line;
  double reward = 0.0;
  double trajectory_mean = 0.0;
  std::vector<TokenTag> tags;
};

struct AnalysisResult {
  int n_trajectories = 0;
  dep::Histogram token_hist;
  dep::Histogram trajectory_hist;
  double answer_mean_dep = 0.0;
  double template_mean_dep = 0.0;
  int64_t n_answer_tokens = 0;
  int64_t n_template_tokens = 0;
  double mean_traj_dep = 0.0;
  bool traj_mean_right_of_mode = false;  // mean lies strictly right of the mode bin
  std::vector<AnnotatedTrajectory> annotated;
};

// Samples n trajectories at the config's rollout temperature and scores them
// with the config's metric and perturbation strategy.
AnalysisResult analyze_policy(const policy::PolicyParams& params, const harness::TrainConfig& config,
                              int n, uint64_t seed, int bin_count = 40, int annotate_first = 20);

void classify_positions(const train::Trajectory& trajectory, std::vector<TokenTag>& tags);

// CSV columns: bin_lo, bin_hi, count, level(token|trajectory).
void write_histogram_csv(const std::string& path, const dep::Histogram& token_level,
                         const dep::Histogram& trajectory_level);

void write_annotated_report(const std::string& path, const AnalysisResult& result);

}  // namespace vppo::analysis
