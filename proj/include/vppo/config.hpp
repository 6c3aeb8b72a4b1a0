#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppo/dependency.hpp"
#include "vppo/env.hpp"
#include "vppo/losses.hpp"
#include "vppo/policy.hpp"
#include "vppo/signal.hpp"

namespace vppo::harness {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Every knob of a training run. Defaults follow the paper-derived values;
// scale-bound ones (learning rate, batch, lengths) are toy-rescaled.
struct TrainConfig {
  losses::Objective objective = losses::Objective::kVppo;
  dep::MetricKind metric = dep::MetricKind::kKlExact;
  env::PerturbStrategy perturb = env::PerturbStrategy::kPatchBlacken;

  int group_size = 8;      // rollouts per prompt (G)
  int rollout_batch = 48;  // prompts per step
  double k = 0.4;
  double beta_min = 0.9;
  signal::BetaMaxMode beta_max_mode = signal::BetaMaxMode::kDynamic;
  double beta_max = 1.1;  // used in fixed mode
  double eps_low = 0.2;
  double eps_high = 0.28;
  double entropy_coef = 0.06;
  losses::AveragingMode averaging = losses::AveragingMode::kTokenLevel;

  double lr = 3e-4;
  int steps = 500;
  int max_response_len = 16;
  double temperature = 1.0;
  double top_p = 0.99;

  int grid_n = 4;
  int d_model = 32;
  int n_heads = 2;
  int n_blocks = 2;
  int mlp_hidden = 64;
  int context_max = 64;

  uint64_t seed = 1;
  int eval_every = 5;
  int eval_n = 64;
  int checkpoint_every = 100;
  int threads = 0;              // 0 = hardware concurrency
  int max_attempts_factor = 8;  // dynamic-sampling oversampling cap

  policy::PolicyConfig policy() const;
  losses::LossConfig loss() const;
  signal::ShapingConfig shaping() const;

  void validate() const;
};

// Flat key=value text, one per line, '#' comments. Unknown keys rejected.
TrainConfig parse_config_text(const std::string& text);
TrainConfig parse_config_file(const std::string& path);

// Flag-style overrides applied on top of a parsed config.
void apply_override(TrainConfig& config, const std::string& key, const std::string& value);

// Canonical serialization: alphabetical key=value lines.
std::string serialize_config(const TrainConfig& config);
std::map<std::string, std::string> config_to_map(const TrainConfig& config);

std::vector<std::string> config_keys();

}  // namespace vppo::harness
