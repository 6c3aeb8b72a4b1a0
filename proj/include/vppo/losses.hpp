#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppo/signal.hpp"
#include "vppo/tape.hpp"

namespace vppo::losses {

class LossError : public std::runtime_error {
 public:
  explicit LossError(const std::string& what) : std::runtime_error(what) {}
};

enum class Objective { kGrpo, kDapo, kVppo };
enum class AveragingMode { kPerTrajectory, kTokenLevel };

const char* objective_name(Objective o);
const char* averaging_name(AveragingMode m);

struct LossConfig {
  double eps_low = 0.2;
  double eps_high = 0.28;
  double entropy_coef = 0.06;
  AveragingMode averaging = AveragingMode::kTokenLevel;
  Objective objective = Objective::kVppo;

  void validate() const;
};

// min(r*A, clip(r, 1-eps_low, 1+eps_high)*A). Requires r > 0.
double clipped_term(double ratio, double advantage, double eps_low, double eps_high);

// Tape handles for one trajectory's differentiable forward pass.
struct TrajectoryTerms {
  ad::Tape::NodeId new_log_probs;  // {T}
  ad::Tape::NodeId probs_rows;     // {T, V}
  ad::Tape::NodeId logp_rows;      // {T, V}
};

// Batch-level constants a trajectory's partial loss depends on. The batch
// objectives below compute these; the trainer computes them once and then
// builds each trajectory's contribution on its own tape.
struct BatchNormalizers {
  int64_t n_trajectories = 0;
  int64_t token_denominator = 0;  // all tokens (uniform) or selected tokens (masked)
  int64_t total_tokens = 0;       // entropy always averages over all tokens
};

struct TrajectoryObjective {
  ad::Tape::NodeId partial_loss;  // contribution to the batch loss (minimization form)
  std::vector<double> per_token_terms;
};

// One trajectory's contribution: -surrogate_i / norm + coef * entropy_i part.
// Summing partial losses over the batch reproduces the batch objectives.
TrajectoryObjective trajectory_objective(ad::Tape& tape, const TrajectoryTerms& terms,
                                         const std::vector<double>& old_log_probs,
                                         double advantage, const std::vector<uint8_t>* mask,
                                         const BatchNormalizers& norms, const LossConfig& config);

struct LossBuild {
  ad::Tape::NodeId loss;  // scalar; minimization form
  double loss_value = 0.0;
  double surrogate_value = 0.0;  // maximized surrogate, before negation
  double entropy_value = 0.0;    // mean per-token entropy over all tokens
  std::vector<std::vector<double>> per_token_terms;
};

// Clipped surrogate with the uniform group advantage broadcast to every
// token. Loss = -surrogate + entropy_coef * mean entropy, so a larger
// coefficient pushes the policy toward lower entropy.
LossBuild grpo_objective(ad::Tape& tape, const std::vector<TrajectoryTerms>& trajectories,
                         const std::vector<std::vector<double>>& old_log_probs,
                         const std::vector<double>& advantages, const LossConfig& config);

// Shaped advantage routed through the per-trajectory gradient mask. The
// entropy term still covers all generated tokens. Token-level averaging
// divides by the number of selected tokens in the batch; per-trajectory
// averaging keeps the 1/|o_i| weights.
LossBuild vppo_objective(ad::Tape& tape, const std::vector<TrajectoryTerms>& trajectories,
                         const std::vector<std::vector<double>>& old_log_probs,
                         const signal::ShapedBatch& shaped, const LossConfig& config);

bool group_is_degenerate(std::span<const double> rewards);

// Indices of groups with mixed rewards; degenerate groups carry no signal.
std::vector<int> dynamic_filter(const std::vector<std::vector<double>>& group_rewards);

}  // namespace vppo::losses
