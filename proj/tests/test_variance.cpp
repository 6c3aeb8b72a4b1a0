#include <doctest.h>

#include <cmath>
#include <random>

#include "vppo/harness.hpp"
#include "vppo/variance.hpp"

using namespace vppo;
using variance::AlphaDist;
using variance::EstimatorKind;
using variance::GradientSample;
using variance::MomentReport;
using variance::RatioResult;
using variance::VarianceError;

namespace {

harness::TrainConfig small_config() {
  harness::TrainConfig cfg;
  cfg.d_model = 16;
  cfg.mlp_hidden = 24;
  cfg.grid_n = 3;
  cfg.threads = 2;
  return cfg;
}

train::Trajectory sampled_trajectory(const harness::TrainConfig& cfg,
                                     const policy::PolicyParams& params, uint64_t seed) {
  const env::Instance inst = train::draw_instance(cfg, seed);
  train::SampleSettings settings;
  settings.max_len = cfg.max_response_len;
  settings.top_p = cfg.top_p;
  return train::sample_trajectory(params, inst, settings, seed);
}

}  // namespace

TEST_CASE("per_trajectory_gradient: zero advantage gives the zero vector") {
  const harness::TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 1);
  const train::Trajectory traj = sampled_trajectory(cfg, params, 3);
  const GradientSample g =
      variance::per_trajectory_gradient(params, traj, 0.0, 1.0, {}, EstimatorKind::kGrpo);
  CHECK(g.grad.size() == static_cast<size_t>(params.total_size()));
  for (double v : g.grad) CHECK(v == 0.0);
}

TEST_CASE("per_trajectory_gradient: k=1, alpha=1 collapses to the grpo sample") {
  const harness::TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 2);
  const train::Trajectory traj = sampled_trajectory(cfg, params, 5);
  const std::vector<uint8_t> full_mask(traj.tokens.size(), 1);
  const GradientSample a =
      variance::per_trajectory_gradient(params, traj, 0.7, 1.0, {}, EstimatorKind::kGrpo);
  const GradientSample b =
      variance::per_trajectory_gradient(params, traj, 0.7, 1.0, full_mask, EstimatorKind::kVppo);
  REQUIRE(a.grad.size() == b.grad.size());
  for (size_t i = 0; i < a.grad.size(); ++i) CHECK(std::abs(a.grad[i] - b.grad[i]) < 1e-9);
  CHECK(b.k_count == b.T);
}

TEST_CASE("per_trajectory_gradient: scalar factors scale linearly") {
  const harness::TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 4);
  const train::Trajectory traj = sampled_trajectory(cfg, params, 6);
  std::vector<uint8_t> mask(traj.tokens.size(), 0);
  mask[0] = 1;
  const GradientSample one =
      variance::per_trajectory_gradient(params, traj, 1.0, 1.0, mask, EstimatorKind::kVppo);
  const GradientSample scaled =
      variance::per_trajectory_gradient(params, traj, -2.0, 1.5, mask, EstimatorKind::kVppo);
  for (size_t i = 0; i < one.grad.size(); ++i)
    CHECK(scaled.grad[i] == doctest::Approx(-3.0 * one.grad[i]).epsilon(1e-9));
}

TEST_CASE("estimator_moments: identical samples have zero variance") {
  GradientSample proto;
  proto.kind = EstimatorKind::kGrpo;
  proto.grad = {1.0, -2.0, 0.5};
  std::vector<GradientSample> samples(150, proto);
  const MomentReport r = variance::estimator_moments(samples, 1);
  CHECK(r.n == 150);
  CHECK(r.variance == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.second_moment == doctest::Approx(5.25).epsilon(1e-12));
  CHECK(r.ci_lo == doctest::Approx(r.ci_hi).epsilon(1e-12));
}

TEST_CASE("estimator_moments: unit normal scalars have variance 1") {
  // Monte Carlo oracle: n = 10,000 standard normals.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<GradientSample> samples(10000);
  for (auto& s : samples) {
    s.kind = EstimatorKind::kVppo;
    s.grad = {gauss(rng)};
  }
  const MomentReport r = variance::estimator_moments(samples, 2);
  CHECK(r.variance == doctest::Approx(1.0).epsilon(0.03));
  CHECK(r.variance <= r.second_moment);
  CHECK(r.ci_lo < r.second_moment);
  CHECK(r.ci_hi > r.second_moment);
}

TEST_CASE("estimator_moments: input validation") {
  std::vector<GradientSample> few(50);
  for (auto& s : few) s.grad = {1.0};
  CHECK_THROWS_AS(variance::estimator_moments(few, 1), VarianceError);

  std::vector<GradientSample> mixed(150);
  for (size_t i = 0; i < mixed.size(); ++i) {
    mixed[i].grad = {1.0};
    mixed[i].kind = (i == 60) ? EstimatorKind::kVppo : EstimatorKind::kGrpo;
  }
  CHECK_THROWS_AS(variance::estimator_moments(mixed, 1), VarianceError);
}

TEST_CASE("sandbox_ratio: k=0.4 with constant alpha matches 0.40 within 0.02") {
  const RatioResult r = variance::sandbox_ratio(0.4, AlphaDist::constant(1.0), 50, 16, 20000, 11);
  CHECK(r.predicted == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(std::abs(r.empirical_ratio - 0.4) < 0.02);
  CHECK(r.ci_lo < r.empirical_ratio);
  CHECK(r.ci_hi > r.empirical_ratio);
}

TEST_CASE("sandbox_ratio: k=1 with constant alpha gives ratio 1") {
  const RatioResult r = variance::sandbox_ratio(1.0, AlphaDist::constant(1.0), 50, 16, 20000, 12);
  CHECK(r.predicted == 1.0);
  CHECK(std::abs(r.empirical_ratio - 1.0) < 0.02);
}

TEST_CASE("sandbox_ratio: uniform alpha second moment enters the prediction") {
  const AlphaDist a = AlphaDist::uniform(0.9, 1.1);
  // Quadrature oracle for E[alpha^2] over U[0.9, 1.1].
  double quad = 0.0;
  const int steps = 200000;
  for (int i = 0; i < steps; ++i) {
    const double x = 0.9 + 0.2 * ((i + 0.5) / steps);
    quad += x * x;
  }
  quad /= steps;
  CHECK(a.second_moment() == doctest::Approx(quad).epsilon(1e-9));
  CHECK(a.second_moment() == doctest::Approx(1.0 + 0.04 / 12.0).epsilon(1e-12));

  const RatioResult r = variance::sandbox_ratio(0.4, a, 50, 16, 20000, 13);
  CHECK(r.predicted == doctest::Approx(0.4 * (1.0 + 0.04 / 12.0)).epsilon(1e-12));
  CHECK(std::abs(r.empirical_ratio - r.predicted) < 0.02);
}

TEST_CASE("sandbox_ratio: input validation") {
  CHECK_THROWS_AS(variance::sandbox_ratio(0.4, AlphaDist::constant(1.0), 50, 16, 500, 1),
                  VarianceError);
  CHECK_THROWS_AS(variance::sandbox_ratio(0.4, AlphaDist::constant(1.0), 50, 4, 2000, 1),
                  VarianceError);
}

TEST_CASE("live_ratio: smoke check on a fresh policy") {
  // Small n keeps this a smoke test; the acceptance suite runs the full one.
  harness::TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 9);
  const variance::LiveResult r = variance::live_ratio(params, cfg, 120, 21);
  CHECK(r.diag.trajectories_used >= 120);
  CHECK(r.ratio.empirical_ratio > 0.0);
  CHECK(r.ratio.empirical_ratio < 1.0);
  CHECK(r.ratio.predicted > 0.3);
  CHECK(r.ratio.predicted < 0.6);
  CHECK(r.diag.mean_masked_fraction >= cfg.k - 1e-9);
  CHECK(std::abs(r.diag.corr_alpha_adv) <= 1.0);
}
