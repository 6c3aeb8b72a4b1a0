#include "vppo/variance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vppo/kernels.hpp"
#include "vppo/losses.hpp"
#include "vppo/parallel.hpp"
#include "vppo/signal.hpp"

namespace vppo::variance {

namespace {

double norm_sq(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& values, uint64_t seed,
                                       int resamples = 1000) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, values.size() - 1);
  std::vector<double> means(resamples);
  for (int b = 0; b < resamples; ++b) {
    double s = 0.0;
    for (size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    means[b] = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  return {means[static_cast<size_t>(0.025 * resamples)],
          means[static_cast<size_t>(0.975 * resamples) - 1]};
}

std::pair<double, double> bootstrap_ratio_ci(const std::vector<double>& num,
                                             const std::vector<double>& den, uint64_t seed,
                                             int resamples = 1000) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, num.size() - 1);
  std::vector<double> ratios(resamples);
  for (int b = 0; b < resamples; ++b) {
    double sn = 0.0, sd = 0.0;
    for (size_t i = 0; i < num.size(); ++i) {
      const size_t j = pick(rng);
      sn += num[j];
      sd += den[j];
    }
    ratios[b] = sn / sd;
  }
  std::sort(ratios.begin(), ratios.end());
  return {ratios[static_cast<size_t>(0.025 * resamples)],
          ratios[static_cast<size_t>(0.975 * resamples) - 1]};
}

}  // namespace

GradientSample per_trajectory_gradient(const policy::PolicyParams& params,
                                       const train::Trajectory& trajectory, double advantage,
                                       double alpha, std::span<const uint8_t> mask,
                                       EstimatorKind kind) {
  const int t_len = static_cast<int>(trajectory.tokens.size());
  if (kind == EstimatorKind::kVppo && static_cast<int>(mask.size()) != t_len)
    throw VarianceError("per_trajectory_gradient: missing or misaligned mask");

  ad::Tape tape;
  policy::ParamNodes nodes = policy::add_params_as_inputs(tape, params);
  policy::ResponseForward fwd = policy::build_response_forward(
      tape, nodes, params, trajectory.instance.image, trajectory.instance.query, trajectory.tokens);

  // Seeding the summed log-prob with the (scaled) selection weights yields
  // the unclipped estimator gradient directly: scalar * sum_t v_t.
  const double factor = (kind == EstimatorKind::kVppo) ? alpha * advantage : advantage;
  std::vector<double> seed(t_len, factor);
  int k_count = t_len;
  if (kind == EstimatorKind::kVppo) {
    k_count = 0;
    for (int t = 0; t < t_len; ++t) {
      seed[t] = mask[t] ? factor : 0.0;
      k_count += mask[t] ? 1 : 0;
    }
  }
  std::vector<ad::Tensor> grads = tape.backward(fwd.token_log_probs, ad::Tensor::from({t_len}, seed));

  GradientSample sample;
  sample.grad = policy::flatten_grads(grads);
  sample.kind = kind;
  sample.advantage = advantage;
  sample.alpha = (kind == EstimatorKind::kVppo) ? alpha : 1.0;
  sample.T = t_len;
  sample.k_count = k_count;
  return sample;
}

MomentReport estimator_moments(std::span<const GradientSample> samples, uint64_t bootstrap_seed) {
  if (samples.size() < 100)
    throw VarianceError("estimator_moments: need at least 100 samples, got " +
                        std::to_string(samples.size()));
  const EstimatorKind kind = samples[0].kind;
  const size_t dim = samples[0].grad.size();
  for (const GradientSample& s : samples) {
    if (s.kind != kind) throw VarianceError("estimator_moments: mixed estimator kinds");
    if (s.grad.size() != dim) throw VarianceError("estimator_moments: dimension mismatch");
  }

  std::vector<double> mean(dim, 0.0);
  std::vector<double> norms;
  norms.reserve(samples.size());
  for (const GradientSample& s : samples) {
    kernels::add_inplace(mean.data(), s.grad.data(), static_cast<int>(dim));
    norms.push_back(norm_sq(s.grad));
  }
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  for (double& m : mean) m *= inv_n;

  MomentReport report;
  report.n = static_cast<int>(samples.size());
  report.mean_norm_sq = norm_sq(mean);
  report.second_moment = std::accumulate(norms.begin(), norms.end(), 0.0) * inv_n;
  report.variance = report.second_moment - report.mean_norm_sq;
  std::tie(report.ci_lo, report.ci_hi) = bootstrap_ci(norms, bootstrap_seed);
  return report;
}

RatioResult sandbox_ratio(double k, const AlphaDist& alpha, int T, int dim, int n, uint64_t seed) {
  if (n < 1000) throw VarianceError("sandbox_ratio: need n >= 1000");
  if (dim < 8) throw VarianceError("sandbox_ratio: dim must be >= 8");
  if (T < 1) throw VarianceError("sandbox_ratio: T must be >= 1");

  const int kc = signal::topk_count(T, k);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<double> num(n), den(n);
  std::vector<double> sum_all(dim), sum_sel(dim), v(dim);
  std::vector<int> idx(T);
  for (int s = 0; s < n; ++s) {
    const double adv = gauss(rng);
    const double a = alpha.lo + (alpha.hi - alpha.lo) * unit(rng);

    // Uniformly random ceil(kT)-subset via partial Fisher-Yates.
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < kc; ++i) {
      const int j = i + static_cast<int>(unit(rng) * (T - i));
      std::swap(idx[i], idx[std::min(j, T - 1)]);
    }
    std::vector<char> selected(T, 0);
    for (int i = 0; i < kc; ++i) selected[idx[i]] = 1;

    std::fill(sum_all.begin(), sum_all.end(), 0.0);
    std::fill(sum_sel.begin(), sum_sel.end(), 0.0);
    for (int t = 0; t < T; ++t) {
      for (int d = 0; d < dim; ++d) v[d] = gauss(rng);
      kernels::add_inplace(sum_all.data(), v.data(), dim);
      if (selected[t]) kernels::add_inplace(sum_sel.data(), v.data(), dim);
    }
    den[s] = adv * adv * norm_sq(sum_all);
    num[s] = a * a * adv * adv * norm_sq(sum_sel);
  }

  RatioResult result;
  result.predicted = (static_cast<double>(kc) / static_cast<double>(T)) * alpha.second_moment();
  const double dsum = std::accumulate(den.begin(), den.end(), 0.0);
  const double nsum = std::accumulate(num.begin(), num.end(), 0.0);
  result.empirical_ratio = nsum / dsum;
  std::tie(result.ci_lo, result.ci_hi) = bootstrap_ratio_ci(num, den, train::mix_seed(seed, 0xB007));
  return result;
}

// ---------------------------------------------------------------------------
// live check on real rollouts
// ---------------------------------------------------------------------------

LiveResult live_ratio(const policy::PolicyParams& params, const harness::TrainConfig& config, int n,
                      uint64_t seed) {
  if (n < 100) throw VarianceError("live_ratio: need n >= 100");

  // Collect trajectories from non-degenerate groups.
  std::vector<train::Trajectory> used;
  std::vector<std::vector<double>> group_rewards;
  int discarded = 0;
  const int64_t max_attempts = 100000;
  int64_t attempt = 0;
  const int chunk = 64;
  while (static_cast<int>(used.size()) < n && attempt < max_attempts) {
    std::vector<std::vector<train::Trajectory>> groups(chunk);
    parallel_for(chunk, config.threads, [&](int i) {
      const env::Instance inst = train::draw_instance(config, train::mix_seed(seed, 0x1A, attempt + i));
      groups[i] = train::rollout_group(params, inst, config, train::mix_seed(seed, 0x1B, attempt + i));
    });
    attempt += chunk;
    for (auto& g : groups) {
      std::vector<double> rewards;
      for (const train::Trajectory& t : g) rewards.push_back(t.reward);
      if (losses::group_is_degenerate(rewards)) {
        ++discarded;
        continue;
      }
      group_rewards.push_back(std::move(rewards));
      for (train::Trajectory& t : g) used.push_back(std::move(t));
      if (static_cast<int>(used.size()) >= n) break;
    }
  }
  if (static_cast<int>(used.size()) < n)
    throw VarianceError("live_ratio: insufficient non-degenerate groups after " +
                        std::to_string(attempt) + " attempts");

  const int n_used = static_cast<int>(used.size());

  // Dependency scoring, then batch-level shaping for alpha and the masks.
  parallel_for(n_used, config.threads, [&](int i) {
    train::masked_pass(params, used[i], config.perturb, train::mix_seed(seed, 0x1C, i));
    used[i].profile =
        dep::score_trajectory(used[i].original_dists, used[i].masked_dists, used[i].tokens, config.metric);
  });
  std::vector<double> deps;
  std::vector<std::vector<double>> scores;
  for (const train::Trajectory& t : used) {
    deps.push_back(t.profile.trajectory_mean);
    scores.push_back(t.profile.token_scores);
  }
  const signal::ShapedBatch shaped = signal::shape(group_rewards, deps, scores, config.shaping());

  // Paired estimator gradients per trajectory.
  std::vector<double> num(n_used), den(n_used);
  std::vector<double> masked_frac(n_used);
  std::vector<std::vector<double>> gv(n_used), gg(n_used);
  const int grad_chunk = 32;
  for (int base = 0; base < n_used; base += grad_chunk) {
    const int cnt = std::min(grad_chunk, n_used - base);
    parallel_for(cnt, config.threads, [&](int ci) {
      const int i = base + ci;
      const signal::ShapedSignal& s = shaped.per_trajectory[i];
      GradientSample a = per_trajectory_gradient(params, used[i], s.advantage, 1.0, {},
                                                 EstimatorKind::kGrpo);
      GradientSample b = per_trajectory_gradient(params, used[i], s.advantage, s.alpha, s.mask,
                                                 EstimatorKind::kVppo);
      den[i] = norm_sq(a.grad);
      num[i] = norm_sq(b.grad);
      masked_frac[i] = static_cast<double>(b.k_count) / static_cast<double>(b.T);
      gg[i] = std::move(a.grad);
      gv[i] = std::move(b.grad);
    });
  }

  LiveResult result;
  result.diag.trajectories_used = n_used;
  result.diag.groups_discarded = discarded;

  double alpha_sq_sum = 0.0;
  for (const signal::ShapedSignal& s : shaped.per_trajectory) alpha_sq_sum += s.alpha * s.alpha;
  result.ratio.predicted = config.k * alpha_sq_sum / n_used;
  result.ratio.empirical_ratio = std::accumulate(num.begin(), num.end(), 0.0) /
                                 std::accumulate(den.begin(), den.end(), 0.0);
  std::tie(result.ratio.ci_lo, result.ratio.ci_hi) =
      bootstrap_ratio_ci(num, den, train::mix_seed(seed, 0xB007));

  // Assumption diagnostics.
  {
    const size_t dim = gg[0].size();
    std::vector<double> mean_g(dim, 0.0), mean_v(dim, 0.0);
    double sm_g = 0.0, sm_v = 0.0;
    for (int i = 0; i < n_used; ++i) {
      kernels::add_inplace(mean_g.data(), gg[i].data(), static_cast<int>(dim));
      kernels::add_inplace(mean_v.data(), gv[i].data(), static_cast<int>(dim));
      sm_g += den[i];
      sm_v += num[i];
    }
    const double inv = 1.0 / n_used;
    for (double& x : mean_g) x *= inv;
    for (double& x : mean_v) x *= inv;
    result.diag.mean_frac_grpo = norm_sq(mean_g) / (sm_g * inv);
    result.diag.mean_frac_vppo = norm_sq(mean_v) / (sm_v * inv);
    result.diag.mean_masked_fraction =
        std::accumulate(masked_frac.begin(), masked_frac.end(), 0.0) * inv;
  }
  {
    // Pearson correlation between alpha and the advantage.
    double ma = 0.0, mb = 0.0;
    for (const signal::ShapedSignal& s : shaped.per_trajectory) {
      ma += s.alpha;
      mb += s.advantage;
    }
    ma /= n_used;
    mb /= n_used;
    double cab = 0.0, ca = 0.0, cb = 0.0;
    for (const signal::ShapedSignal& s : shaped.per_trajectory) {
      cab += (s.alpha - ma) * (s.advantage - mb);
      ca += (s.alpha - ma) * (s.alpha - ma);
      cb += (s.advantage - mb) * (s.advantage - mb);
    }
    result.diag.corr_alpha_adv = (ca > 0.0 && cb > 0.0) ? cab / std::sqrt(ca * cb) : 0.0;
  }
  {
    // Cross-step correlation on a subsample: per-step gradients via one
    // backward per position.
    const int sub = std::min(n_used, 64);
    std::vector<double> per_traj(sub, 0.0);
    std::vector<char> valid(sub, 0);
    parallel_for(sub, config.threads, [&](int i) {
      const train::Trajectory& t = used[i];
      const int t_len = static_cast<int>(t.tokens.size());
      if (t_len < 2) return;
      std::vector<std::vector<double>> vs(t_len);
      for (int pos = 0; pos < t_len; ++pos) {
        ad::Tape tape;
        policy::ParamNodes nodes = policy::add_params_as_inputs(tape, params);
        policy::ResponseForward fwd = policy::build_response_forward(
            tape, nodes, params, t.instance.image, t.instance.query, t.tokens);
        std::vector<double> seed_vec(t_len, 0.0);
        seed_vec[pos] = 1.0;
        vs[pos] = policy::flatten_grads(tape.backward(fwd.token_log_probs,
                                                      ad::Tensor::from({t_len}, seed_vec)));
      }
      std::vector<double> sum(vs[0].size(), 0.0);
      double sum_norms = 0.0;
      for (const auto& v : vs) {
        kernels::add_inplace(sum.data(), v.data(), static_cast<int>(v.size()));
        sum_norms += norm_sq(v);
      }
      const double cross = norm_sq(sum) - sum_norms;
      per_traj[i] = cross / (static_cast<double>(t_len - 1) * sum_norms);
      valid[i] = 1;
    });
    double acc = 0.0;
    int cnt = 0;
    for (int i = 0; i < sub; ++i)
      if (valid[i]) {
        acc += per_traj[i];
        ++cnt;
      }
    result.diag.cross_step_corr = cnt ? acc / cnt : 0.0;
  }
  return result;
}

}  // namespace vppo::variance
