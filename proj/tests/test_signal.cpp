#include <doctest.h>

#include <cmath>
#include <random>

#include "vppo/signal.hpp"

using namespace vppo;
using signal::BetaMaxMode;
using signal::GroupAdvantages;
using signal::ShapedBatch;
using signal::ShapingConfig;
using signal::SignalError;

TEST_CASE("group_advantages: [1,1,0,0] normalizes to [1,1,-1,-1]") {
  const GroupAdvantages adv = signal::group_advantages(std::vector<double>{1, 1, 0, 0});
  CHECK_FALSE(adv.degenerate);
  CHECK(adv.advantages[0] == 1.0);
  CHECK(adv.advantages[1] == 1.0);
  CHECK(adv.advantages[2] == -1.0);
  CHECK(adv.advantages[3] == -1.0);
}

TEST_CASE("group_advantages: degenerate group yields zeros and the flag") {
  const GroupAdvantages adv = signal::group_advantages(std::vector<double>{0, 0, 0, 0});
  CHECK(adv.degenerate);
  for (double a : adv.advantages) CHECK(a == 0.0);
  const GroupAdvantages ones = signal::group_advantages(std::vector<double>{1, 1, 1});
  CHECK(ones.degenerate);
}

TEST_CASE("group_advantages: population std on [1,0,0,0]") {
  const GroupAdvantages adv = signal::group_advantages(std::vector<double>{1, 0, 0, 0});
  // Hand computation: mean 1/4, population variance 3/16.
  const double sd = std::sqrt(3.0 / 16.0);
  CHECK(adv.advantages[0] == doctest::Approx(0.75 / sd).epsilon(1e-12));
  CHECK(adv.advantages[0] == doctest::Approx(1.7321).epsilon(1e-4));
  for (int i = 1; i < 4; ++i) CHECK(adv.advantages[i] == doctest::Approx(-0.5774).epsilon(1e-4));
}

TEST_CASE("group_advantages: zero mean and unit std when non-degenerate; G >= 2") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int g = 2 + static_cast<int>(rng() % 14);
    std::vector<double> rewards(g);
    for (double& r : rewards) r = static_cast<double>(rng() % 2);
    const GroupAdvantages adv = signal::group_advantages(rewards);
    if (adv.degenerate) continue;
    double mean = 0.0, var = 0.0;
    for (double a : adv.advantages) mean += a;
    mean /= g;
    for (double a : adv.advantages) var += a * a;
    var /= g;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(signal::group_advantages(std::vector<double>{1.0}), SignalError);
}

TEST_CASE("shaping_factors: fixed-mode min-max map") {
  const std::vector<double> deps = {0.02, 0.06, 0.10};
  const auto f = signal::shaping_factors(deps, 0.9, BetaMaxMode::kFixed, 1.1);
  CHECK(f.alpha[0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(f.alpha[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f.alpha[2] == doctest::Approx(1.1).epsilon(1e-12));
}

TEST_CASE("shaping_factors: equal dependencies give alpha = 1") {
  const std::vector<double> deps = {0.05, 0.05, 0.05, 0.05};
  for (BetaMaxMode mode : {BetaMaxMode::kFixed, BetaMaxMode::kDynamic}) {
    const auto f = signal::shaping_factors(deps, 0.9, mode, 1.1);
    for (double a : f.alpha) CHECK(a == 1.0);
  }
}

TEST_CASE("shaping_factors: dynamic beta_max is mean-preserving") {
  // Normalized deps with mean 1/2 -> beta_max = beta_min + (1-beta_min)/0.5.
  const std::vector<double> deps = {0.0, 0.5, 1.0};  // normalized: 0, 0.5, 1; mean 0.5
  const auto f = signal::shaping_factors(deps, 0.9, BetaMaxMode::kDynamic, 0.0);
  CHECK(f.beta_max_effective == doctest::Approx(1.1).epsilon(1e-12));
  double mean = 0.0;
  for (double a : f.alpha) mean += a;
  CHECK(mean / 3.0 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("shaping_factors: dynamic beta_max clipping bounds") {
  // Tiny mean of normalized deps pushes the raw formula far above the cap.
  std::vector<double> deps(50, 0.0);
  deps[0] = 1.0;  // mean of normalized ~ 0.02
  const auto lowmean = signal::shaping_factors(deps, 0.9, BetaMaxMode::kDynamic, 0.0);
  CHECK(lowmean.beta_max_effective == doctest::Approx(1.2).epsilon(1e-12));  // 1 + 2*(1-0.9)

  // Mean near 1 pulls it to the lower clip at 1.0.
  std::vector<double> high(50, 1.0);
  high[0] = 0.0;
  const auto highmean = signal::shaping_factors(high, 0.9, BetaMaxMode::kDynamic, 0.0);
  CHECK(highmean.beta_max_effective >= 1.0);
  for (double a : highmean.alpha) CHECK(a <= 1.2 + 1e-12);
}

TEST_CASE("shaping_factors: scale invariance of fixed-mode alphas") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> unif(0.001, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> deps(8);
    for (double& d : deps) d = unif(rng);
    const double c = unif(rng) * 10.0 + 0.1;
    std::vector<double> scaled = deps;
    for (double& d : scaled) d *= c;
    const auto a = signal::shaping_factors(deps, 0.9, BetaMaxMode::kFixed, 1.1);
    const auto b = signal::shaping_factors(scaled, 0.9, BetaMaxMode::kFixed, 1.1);
    for (size_t i = 0; i < deps.size(); ++i)
      CHECK(a.alpha[i] == doctest::Approx(b.alpha[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(signal::shaping_factors(std::vector<double>{}, 0.9, BetaMaxMode::kFixed, 1.1),
                  SignalError);
}

TEST_CASE("topk_mask: highest-score indices win") {
  const std::vector<double> scores = {0.1, 0.9, 0.5, 0.3, 0.7};
  CHECK(signal::topk_mask(scores, 0.4) == std::vector<uint8_t>{0, 1, 0, 0, 1});
  CHECK(signal::topk_mask(scores, 1.0) == std::vector<uint8_t>{1, 1, 1, 1, 1});
}

TEST_CASE("topk_mask: ties break toward the earlier index") {
  // ceil(0.3 * 3) = 1 slot; the first of the tied 0.5s gets it.
  const std::vector<double> tied = {0.5, 0.5, 0.1};
  CHECK(signal::topk_mask(tied, 0.3) == std::vector<uint8_t>{1, 0, 0});
  // With two slots (ceil(0.6 * 3) = 2) both tied entries are selected.
  CHECK(signal::topk_mask(tied, 0.6) == std::vector<uint8_t>{1, 1, 0});
}

TEST_CASE("topk_mask: popcount law over T in [1,512] and k in {0.1..1.0}") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int T : {1, 2, 3, 5, 7, 16, 33, 100, 255, 511, 512}) {
    std::vector<double> scores(T);
    for (double& s : scores) s = unif(rng);
    for (int kk = 1; kk <= 10; ++kk) {
      const double k = kk / 10.0;
      const auto mask = signal::topk_mask(scores, k);
      int pop = 0;
      for (uint8_t b : mask) pop += b;
      const int expect = std::max(1, static_cast<int>(std::ceil(k * T - 1e-9)));
      CHECK(pop == expect);
    }
  }
  CHECK_THROWS_AS(signal::topk_mask(std::vector<double>{1.0}, 0.0), SignalError);
  CHECK_THROWS_AS(signal::topk_mask(std::vector<double>{1.0}, 1.5), SignalError);
}

TEST_CASE("shape: identity configuration reduces to the GRPO signal") {
  ShapingConfig cfg;
  cfg.k = 1.0;
  cfg.beta_min = 1.0;
  cfg.beta_max_mode = BetaMaxMode::kFixed;
  cfg.beta_max_fixed = 1.0;
  const std::vector<std::vector<double>> rewards = {{1, 0, 0, 1}, {1, 1, 1, 1}};
  const std::vector<double> deps = {0.1, 0.4, 0.2, 0.3, 0.5, 0.6, 0.1, 0.2};
  std::vector<std::vector<double>> scores(8, std::vector<double>{0.5, 0.2, 0.9});
  const ShapedBatch batch = signal::shape(rewards, deps, scores, cfg);

  const GroupAdvantages g0 = signal::group_advantages(rewards[0]);
  for (int i = 0; i < 4; ++i) {
    CHECK(batch.per_trajectory[i].alpha == 1.0);
    CHECK(batch.per_trajectory[i].shaped_advantage == g0.advantages[i]);
    for (uint8_t b : batch.per_trajectory[i].mask) CHECK(b == 1);
  }
  // Degenerate group: zero advantages regardless of alpha.
  for (int i = 4; i < 8; ++i) {
    CHECK(batch.per_trajectory[i].group_degenerate);
    CHECK(batch.per_trajectory[i].shaped_advantage == 0.0);
  }
  CHECK(batch.degenerate_groups == 1);
}

TEST_CASE("shape: paper defaults keep alpha within the dynamic band") {
  ShapingConfig cfg;  // k=0.4, beta_min=0.9, dynamic
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> unif(0.0, 0.3);
  std::vector<std::vector<double>> rewards;
  std::vector<double> deps;
  std::vector<std::vector<double>> scores;
  for (int g = 0; g < 6; ++g) {
    rewards.push_back({1, 0, static_cast<double>(rng() % 2), 0});
    for (int i = 0; i < 4; ++i) {
      deps.push_back(unif(rng));
      scores.push_back({unif(rng), unif(rng), unif(rng), unif(rng), unif(rng)});
    }
  }
  const ShapedBatch batch = signal::shape(rewards, deps, scores, cfg);
  CHECK(batch.beta_max_effective >= 1.0);
  CHECK(batch.beta_max_effective <= 1.2 + 1e-12);
  double alpha_mean = 0.0;
  for (const auto& s : batch.per_trajectory) {
    CHECK(s.alpha >= 0.9 - 1e-12);
    CHECK(s.alpha <= batch.beta_max_effective + 1e-12);
    alpha_mean += s.alpha;
    int pop = 0;
    for (uint8_t b : s.mask) pop += b;
    CHECK(pop == 2);  // ceil(0.4 * 5)
  }
  alpha_mean /= batch.per_trajectory.size();
  CHECK(alpha_mean == doctest::Approx(1.0).epsilon(0.25));
}
