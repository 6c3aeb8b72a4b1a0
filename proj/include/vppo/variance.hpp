#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppo/trainer.hpp"

namespace vppo::variance {

class VarianceError : public std::runtime_error {
 public:
  explicit VarianceError(const std::string& what) : std::runtime_error(what) {}
};

enum class EstimatorKind { kGrpo, kVppo };

// Flattened parameter-space gradient of one trajectory's unclipped estimator
// (no entropy term): A * sum_t v_t, or alpha * A * sum over masked t.
struct GradientSample {
  std::vector<double> grad;
  EstimatorKind kind = EstimatorKind::kGrpo;
  double advantage = 0.0;
  double alpha = 1.0;
  int T = 0;
  int k_count = 0;  // selected tokens
};

GradientSample per_trajectory_gradient(const policy::PolicyParams& params,
                                       const train::Trajectory& trajectory, double advantage,
                                       double alpha, std::span<const uint8_t> mask,
                                       EstimatorKind kind);

struct MomentReport {
  int n = 0;
  double mean_norm_sq = 0.0;    // ||E[g]||^2
  double second_moment = 0.0;   // E[||g||^2]
  double variance = 0.0;        // second_moment - mean_norm_sq
  double ci_lo = 0.0, ci_hi = 0.0;  // bootstrap 95% interval on the second moment
};

// Requires >= 100 samples of a single estimator kind. Bootstrap uses 1000
// seeded resamples.
MomentReport estimator_moments(std::span<const GradientSample> samples, uint64_t bootstrap_seed);

// Shaping-factor distribution for the sandbox: constant or uniform [lo, hi].
struct AlphaDist {
  double lo = 1.0, hi = 1.0;

  static AlphaDist constant(double c) { return {c, c}; }
  static AlphaDist uniform(double lo, double hi) { return {lo, hi}; }
  double second_moment() const {  // E[alpha^2]
    return (lo * lo + lo * hi + hi * hi) / 3.0;
  }
  const char* mode_name() const { return lo == hi ? "const" : "uniform"; }
};

struct RatioResult {
  double empirical_ratio = 0.0;
  double predicted = 0.0;
  double ci_lo = 0.0, ci_hi = 0.0;  // paired bootstrap 95% interval on the ratio
};

// Monte Carlo check of the variance-reduction prediction in a sandbox where
// the proof assumptions hold by construction: v_t iid zero-mean Gaussian,
// advantage and alpha independent, and a uniformly random ceil(kT)-subset.
// Predicted value is (ceil(kT)/T) * E[alpha^2].
RatioResult sandbox_ratio(double k, const AlphaDist& alpha, int T, int dim, int n, uint64_t seed);

struct LiveDiagnostics {
  double cross_step_corr = 0.0;   // mean normalized v_t . v_j, t != j
  double corr_alpha_adv = 0.0;    // Pearson corr(alpha, advantage)
  double mean_frac_grpo = 0.0;    // ||E g||^2 / E||g||^2
  double mean_frac_vppo = 0.0;
  double mean_masked_fraction = 0.0;
  int trajectories_used = 0;
  int groups_discarded = 0;
};

struct LiveResult {
  RatioResult ratio;
  LiveDiagnostics diag;
};

// Same comparison on real rollouts from the given policy snapshot. Collects
// n trajectories from non-degenerate groups, computing both estimators per
// trajectory (paired).
LiveResult live_ratio(const policy::PolicyParams& params, const harness::TrainConfig& config, int n,
                      uint64_t seed);

}  // namespace vppo::variance
