#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppo/policy.hpp"

namespace vppo::dep {

class DependencyError : public std::runtime_error {
 public:
  explicit DependencyError(const std::string& what) : std::runtime_error(what) {}
};

enum class MetricKind { kKlExact, kKlK3, kJsd, kTop1Drop };

const char* metric_name(MetricKind kind);

// KL(p || q) over full distributions. Requires strictly positive entries.
double kl_exact(const policy::StepDistribution& p, const policy::StepDistribution& q);

// Sampled low-variance KL estimator at the realized token: (r - 1) - log r
// with r = q(o)/p(o). Pointwise nonnegative and exactly unbiased under p.
double kl_k3(double p_at_sampled, double q_at_sampled);

// Jensen-Shannon divergence, symmetric, in [0, log 2].
double jsd_exact(const policy::StepDistribution& p, const policy::StepDistribution& q);

// Signed probability change of the sampled token, in [-1, 1].
double top1_drop(double p_at_sampled, double q_at_sampled);

// Arithmetic mean of the per-token scores.
double trajectory_dependency(std::span<const double> token_scores);

struct DependencyProfile {
  std::vector<double> token_scores;
  double trajectory_mean = 0.0;
  MetricKind kind = MetricKind::kKlExact;
};

// Scores one trajectory from its recorded original and masked distributions.
DependencyProfile score_trajectory(const std::vector<policy::StepDistribution>& original,
                                   const std::vector<policy::StepDistribution>& masked,
                                   std::span<const int> tokens, MetricKind kind);

struct Histogram {
  double lo = 0.0, hi = 0.0, bin_width = 0.0;
  std::vector<int64_t> counts;
  double mean = 0.0;
  double skewness = 0.0;  // sample skewness m3 / m2^(3/2); 0 for constant data
  int mode_bin = 0;       // lowest index among maximal bins
  int64_t n = 0;

  double bin_lo(int i) const { return lo + bin_width * i; }
  double bin_hi(int i) const { return lo + bin_width * (i + 1); }
};

Histogram histogram(std::span<const double> values, int bin_count);

struct HistogramPair {
  Histogram token_level;
  Histogram trajectory_level;
};

// Token- and trajectory-level histograms over a set of profiles.
// Requires at least 100 token scores in total.
HistogramPair dependency_histogram(std::span<const DependencyProfile> profiles, int bin_count);

double sample_skewness(std::span<const double> values);

}  // namespace vppo::dep
