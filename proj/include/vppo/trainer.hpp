#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vppo/config.hpp"
#include "vppo/dependency.hpp"
#include "vppo/env.hpp"
#include "vppo/policy.hpp"
#include "vppo/signal.hpp"

namespace vppo::train {

class TrainerError : public std::runtime_error {
 public:
  explicit TrainerError(const std::string& what) : std::runtime_error(what) {}
};

// Stream-separating seed mixer (splitmix64 over combined words).
uint64_t mix_seed(uint64_t a, uint64_t b);
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c);
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d);

// One sampled response with everything later phases need: the per-step
// distributions under the frozen rollout policy, their masked-image
// counterparts, the reward and the dependency profile.
struct Trajectory {
  env::Instance instance;
  std::vector<int> tokens;
  std::vector<double> old_log_probs;
  std::vector<policy::StepDistribution> original_dists;
  std::vector<policy::StepDistribution> masked_dists;
  double reward = 0.0;
  uint64_t perturb_seed = 0;
  dep::DependencyProfile profile;
};

struct SampleSettings {
  double temperature = 1.0;
  double top_p = 1.0;
  bool greedy = false;
  int max_len = 16;
};

// Samples one response from the frozen snapshot, recording each step's full
// distribution. Stops at EOS or at max_len (truncated responses are kept).
Trajectory sample_trajectory(const policy::PolicyParams& params_old, const env::Instance& instance,
                             const SampleSettings& settings, uint64_t seed);

std::vector<Trajectory> rollout_group(const policy::PolicyParams& params_old,
                                      const env::Instance& instance,
                                      const harness::TrainConfig& config, uint64_t group_seed);

// Teacher-forced second pass over the same tokens with a perturbed image.
void masked_pass(const policy::PolicyParams& params_old, Trajectory& trajectory,
                 env::PerturbStrategy strategy, uint64_t seed);

struct AdamState {
  std::vector<ad::Tensor> m, v;  // aligned with PolicyParams::for_each order
  int64_t t = 0;
};

struct TrainState {
  policy::PolicyParams params;
  AdamState adam;
  int64_t step = 0;
};

TrainState init_state(const harness::TrainConfig& config);

struct StepMetrics {
  int64_t step = 0;
  std::string objective;
  double mean_reward = 0.0;
  double eval_acc = 0.0;
  double loss = 0.0;
  double entropy = 0.0;
  double mean_alpha = 1.0;
  double masked_fraction = 1.0;
  int degenerate_groups = 0;
  double wall_ms = 0.0;
  bool skipped = false;          // empty post-filter batch
  double max_ratio_deviation = 0.0;  // max |r - 1| at the update; 0 on-policy
};

// One full step: rollouts, dependency scoring, signal shaping, Adam update.
// eval_acc is filled by the caller (see harness) or evaluate().
StepMetrics train_step(TrainState& state, const harness::TrainConfig& config);

// Greedy-decoding accuracy over n freshly generated instances.
double evaluate(const policy::PolicyParams& params, const harness::TrainConfig& config, int n,
                uint64_t seed);

// Draws the training task mix: 50% lookup, 30% row-sum, 20% row-max.
env::Instance draw_instance(const harness::TrainConfig& config, uint64_t seed);

void save_checkpoint(const TrainState& state, const harness::TrainConfig& config,
                     const std::string& path);

struct Checkpoint {
  TrainState state;
  harness::TrainConfig config;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace vppo::train
