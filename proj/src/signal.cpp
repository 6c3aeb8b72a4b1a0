#include "vppo/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vppo::signal {

namespace {
constexpr double kDegenerateStd = 1e-8;
}

GroupAdvantages group_advantages(std::span<const double> rewards) {
  const int g = static_cast<int>(rewards.size());
  if (g < 2) throw SignalError("group_advantages: group size must be >= 2, got " + std::to_string(g));

  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= g;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= g;  // population variance
  const double sd = std::sqrt(var);

  GroupAdvantages out;
  if (sd < kDegenerateStd) {
    out.degenerate = true;
    out.advantages.assign(g, 0.0);
    return out;
  }
  out.advantages.reserve(g);
  for (double r : rewards) out.advantages.push_back((r - mean) / sd);
  return out;
}

ShapingFactors shaping_factors(std::span<const double> traj_dependencies, double beta_min,
                               BetaMaxMode mode, double beta_max_fixed) {
  if (traj_dependencies.empty()) throw SignalError("shaping_factors: empty batch");
  if (traj_dependencies.size() < 2) throw SignalError("shaping_factors: batch size must be >= 2");

  const auto [mn_it, mx_it] = std::minmax_element(traj_dependencies.begin(), traj_dependencies.end());
  const double mn = *mn_it, mx = *mx_it;

  ShapingFactors out;
  if (mx == mn) {
    out.alpha.assign(traj_dependencies.size(), 1.0);
    out.beta_max_effective = 1.0;
    return out;
  }

  std::vector<double> normalized;
  normalized.reserve(traj_dependencies.size());
  for (double s : traj_dependencies) normalized.push_back((s - mn) / (mx - mn));

  double beta_max = beta_max_fixed;
  if (mode == BetaMaxMode::kDynamic) {
    const double mean_n =
        std::accumulate(normalized.begin(), normalized.end(), 0.0) / normalized.size();
    beta_max = beta_min + (1.0 - beta_min) / mean_n;
    beta_max = std::clamp(beta_max, 1.0, 1.0 + 2.0 * (1.0 - beta_min));
  }

  out.beta_max_effective = beta_max;
  out.alpha.reserve(normalized.size());
  for (double nrm : normalized) out.alpha.push_back(beta_min + (beta_max - beta_min) * nrm);
  return out;
}

int topk_count(int length, double k) {
  if (!(k > 0.0 && k <= 1.0)) throw SignalError("topk: k must lie in (0, 1], got " + std::to_string(k));
  if (length < 1) throw SignalError("topk: empty scores");
  // Epsilon guards against k*T landing one ulp above an exact integer.
  const int count = static_cast<int>(std::ceil(k * static_cast<double>(length) - 1e-9));
  return std::max(1, count);
}

std::vector<uint8_t> topk_mask(std::span<const double> token_scores, double k) {
  const int t = static_cast<int>(token_scores.size());
  const int count = topk_count(t, k);

  std::vector<int> order(t);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (token_scores[a] != token_scores[b]) return token_scores[a] > token_scores[b];
    return a < b;  // ties break toward the earlier index
  });

  std::vector<uint8_t> mask(t, 0);
  for (int i = 0; i < count; ++i) mask[order[i]] = 1;
  return mask;
}

ShapedBatch shape(const std::vector<std::vector<double>>& group_rewards,
                  const std::vector<double>& traj_dependencies,
                  const std::vector<std::vector<double>>& token_scores, const ShapingConfig& config) {
  size_t total = 0;
  for (const auto& g : group_rewards) total += g.size();
  if (total != traj_dependencies.size() || total != token_scores.size())
    throw SignalError("shape: trajectory counts do not line up");
  if (total == 0) throw SignalError("shape: empty batch");

  const ShapingFactors factors = shaping_factors(traj_dependencies, config.beta_min,
                                                 config.beta_max_mode, config.beta_max_fixed);

  ShapedBatch batch;
  batch.beta_max_effective = factors.beta_max_effective;
  batch.per_trajectory.resize(total);

  size_t idx = 0;
  for (const auto& rewards : group_rewards) {
    const GroupAdvantages adv = group_advantages(rewards);
    if (adv.degenerate) ++batch.degenerate_groups;
    for (size_t i = 0; i < rewards.size(); ++i, ++idx) {
      ShapedSignal& s = batch.per_trajectory[idx];
      s.advantage = adv.advantages[i];
      s.group_degenerate = adv.degenerate;
      s.alpha = factors.alpha[idx];
      s.shaped_advantage = s.alpha * s.advantage;
      s.mask = topk_mask(token_scores[idx], config.k);
    }
  }
  return batch;
}

}  // namespace vppo::signal
