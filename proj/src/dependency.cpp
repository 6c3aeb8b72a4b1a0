#include "vppo/dependency.hpp"

#include <algorithm>
#include <cmath>

namespace vppo::dep {

const char* metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::kKlExact: return "kl_exact";
    case MetricKind::kKlK3: return "kl_k3";
    case MetricKind::kJsd: return "jsd";
    case MetricKind::kTop1Drop: return "top1_drop";
  }
  return "?";
}

namespace {

void check_positive(const policy::StepDistribution& d, const char* what) {
  for (double p : d.probs)
    if (!(p > 0.0)) throw DependencyError(std::string(what) + ": nonpositive probability entry");
}

}  // namespace

double kl_exact(const policy::StepDistribution& p, const policy::StepDistribution& q) {
  if (p.probs.size() != q.probs.size()) throw DependencyError("kl_exact: size mismatch");
  check_positive(p, "kl_exact");
  check_positive(q, "kl_exact");
  double kl = 0.0;
  for (size_t i = 0; i < p.probs.size(); ++i)
    kl += p.probs[i] * (p.log_probs[i] - q.log_probs[i]);
  return kl;
}

double kl_k3(double p_at_sampled, double q_at_sampled) {
  if (!(p_at_sampled > 0.0) || !(q_at_sampled > 0.0))
    throw DependencyError("kl_k3: zero probability");
  const double r = q_at_sampled / p_at_sampled;
  return (r - 1.0) - std::log(r);
}

double jsd_exact(const policy::StepDistribution& p, const policy::StepDistribution& q) {
  if (p.probs.size() != q.probs.size()) throw DependencyError("jsd_exact: size mismatch");
  check_positive(p, "jsd_exact");
  check_positive(q, "jsd_exact");
  double jsd = 0.0;
  for (size_t i = 0; i < p.probs.size(); ++i) {
    const double m = 0.5 * (p.probs[i] + q.probs[i]);
    jsd += 0.5 * p.probs[i] * (p.log_probs[i] - std::log(m));
    jsd += 0.5 * q.probs[i] * (q.log_probs[i] - std::log(m));
  }
  return jsd;
}

double top1_drop(double p_at_sampled, double q_at_sampled) {
  return p_at_sampled - q_at_sampled;
}

double trajectory_dependency(std::span<const double> token_scores) {
  if (token_scores.empty()) throw DependencyError("trajectory_dependency: empty trajectory");
  double sum = 0.0;
  for (double s : token_scores) sum += s;
  return sum / static_cast<double>(token_scores.size());
}

DependencyProfile score_trajectory(const std::vector<policy::StepDistribution>& original,
                                   const std::vector<policy::StepDistribution>& masked,
                                   std::span<const int> tokens, MetricKind kind) {
  if (original.size() != masked.size() || original.size() != tokens.size())
    throw DependencyError("score_trajectory: length mismatch");
  if (original.empty()) throw DependencyError("score_trajectory: empty trajectory");

  DependencyProfile profile;
  profile.kind = kind;
  profile.token_scores.reserve(tokens.size());
  for (size_t t = 0; t < tokens.size(); ++t) {
    const int tok = tokens[t];
    double s = 0.0;
    switch (kind) {
      case MetricKind::kKlExact:
        s = kl_exact(original[t], masked[t]);
        break;
      case MetricKind::kKlK3:
        s = kl_k3(original[t].probs[tok], masked[t].probs[tok]);
        break;
      case MetricKind::kJsd:
        s = jsd_exact(original[t], masked[t]);
        break;
      case MetricKind::kTop1Drop:
        s = top1_drop(original[t].probs[tok], masked[t].probs[tok]);
        break;
    }
    profile.token_scores.push_back(s);
  }
  profile.trajectory_mean = trajectory_dependency(profile.token_scores);
  return profile;
}

double sample_skewness(std::span<const double> values) {
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double m2 = 0.0, m3 = 0.0;
  for (double v : values) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  // Constant data accumulates only rounding dust in m2; call that zero skew.
  if (m2 < 1e-24 * std::max(1.0, mean * mean)) return 0.0;
  return m3 / std::pow(m2, 1.5);
}

Histogram histogram(std::span<const double> values, int bin_count) {
  if (values.empty()) throw DependencyError("histogram: no values");
  if (bin_count < 1) throw DependencyError("histogram: bin_count must be >= 1");

  Histogram h;
  h.n = static_cast<int64_t>(values.size());
  h.lo = *std::min_element(values.begin(), values.end());
  h.hi = *std::max_element(values.begin(), values.end());
  if (h.hi == h.lo) h.hi = h.lo + 1.0;  // single occupied bin
  h.bin_width = (h.hi - h.lo) / bin_count;
  h.counts.assign(bin_count, 0);
  double sum = 0.0;
  for (double v : values) {
    int b = static_cast<int>((v - h.lo) / h.bin_width);
    b = std::clamp(b, 0, bin_count - 1);
    ++h.counts[b];
    sum += v;
  }
  h.mean = sum / static_cast<double>(values.size());
  h.skewness = sample_skewness(values);
  h.mode_bin = static_cast<int>(std::max_element(h.counts.begin(), h.counts.end()) - h.counts.begin());
  return h;
}

HistogramPair dependency_histogram(std::span<const DependencyProfile> profiles, int bin_count) {
  std::vector<double> token_scores, traj_means;
  for (const DependencyProfile& p : profiles) {
    token_scores.insert(token_scores.end(), p.token_scores.begin(), p.token_scores.end());
    traj_means.push_back(p.trajectory_mean);
  }
  if (token_scores.size() < 100)
    throw DependencyError("dependency_histogram: need at least 100 token scores, got " +
                          std::to_string(token_scores.size()));
  HistogramPair pair;
  pair.token_level = histogram(token_scores, bin_count);
  pair.trajectory_level = histogram(traj_means, bin_count);
  return pair;
}

}  // namespace vppo::dep
