#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vppo::signal {

class SignalError : public std::runtime_error {
 public:
  explicit SignalError(const std::string& what) : std::runtime_error(what) {}
};

// Group-normalized rewards: (R_i - mean) / population std. A group whose
// rewards are all equal is degenerate and yields zeros.
struct GroupAdvantages {
  std::vector<double> advantages;
  bool degenerate = false;
};

GroupAdvantages group_advantages(std::span<const double> rewards);

enum class BetaMaxMode { kFixed, kDynamic };

struct ShapingConfig {
  double k = 0.4;
  double beta_min = 0.9;
  BetaMaxMode beta_max_mode = BetaMaxMode::kDynamic;
  double beta_max_fixed = 1.1;
};

// Min-max normalizes the batch of trajectory dependencies into shaping
// factors alpha in [beta_min, beta_max]. In dynamic mode beta_max is chosen
// per batch so the mean alpha stays near 1:
//   beta_max = beta_min + (1 - beta_min) / mean(normalized deps),
// clipped to [1, 1 + 2 (1 - beta_min)]. Equal dependencies give alpha = 1.
struct ShapingFactors {
  std::vector<double> alpha;
  double beta_max_effective = 1.0;
};

ShapingFactors shaping_factors(std::span<const double> traj_dependencies, double beta_min,
                               BetaMaxMode mode, double beta_max_fixed);

// Mask with exactly max(1, ceil(k*T)) ones at the highest-score indices; ties
// break toward the earlier index.
std::vector<uint8_t> topk_mask(std::span<const double> token_scores, double k);

int topk_count(int length, double k);

// Phase-3 composition over one rollout batch: group advantages per group,
// batch-wide shaping factors, per-trajectory masks and shaped advantages.
struct ShapedSignal {
  double advantage = 0.0;         // group-normalized
  double alpha = 1.0;
  double shaped_advantage = 0.0;  // alpha * advantage
  std::vector<uint8_t> mask;
  bool group_degenerate = false;
};

struct ShapedBatch {
  std::vector<ShapedSignal> per_trajectory;
  double beta_max_effective = 1.0;
  int degenerate_groups = 0;
};

ShapedBatch shape(const std::vector<std::vector<double>>& group_rewards,
                  const std::vector<double>& traj_dependencies,
                  const std::vector<std::vector<double>>& token_scores, const ShapingConfig& config);

}  // namespace vppo::signal
