#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vppo/harness.hpp"
#include "vppo/tokens.hpp"
#include "vppo/trainer.hpp"

using namespace vppo;
using harness::TrainConfig;
using train::SampleSettings;
using train::TrainState;
using train::Trajectory;
using train::TrainerError;

namespace {

// Small enough for fast unit steps, large enough to exercise every phase.
TrainConfig small_config() {
  TrainConfig cfg;
  cfg.rollout_batch = 6;
  cfg.group_size = 4;
  cfg.eval_n = 16;
  cfg.threads = 2;
  return cfg;
}

bool params_bitwise_equal(const policy::PolicyParams& a, const policy::PolicyParams& b) {
  bool equal = true;
  std::vector<ad::Tensor> bs;
  b.for_each([&](const std::string&, const ad::Tensor& t) { bs.push_back(t); });
  size_t i = 0;
  a.for_each([&](const std::string&, const ad::Tensor& t) {
    auto x = t.data();
    auto y = bs[i++].data();
    for (size_t j = 0; j < x.size(); ++j)
      if (x[j] != y[j]) equal = false;
  });
  return equal;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("rollout_group: deterministic per seed, G trajectories with records") {
  const TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 1);
  const env::Instance inst = env::generate_instance(7, cfg.grid_n, env::TaskKind::kCellLookup);

  const auto g1 = train::rollout_group(params, inst, cfg, 99);
  const auto g2 = train::rollout_group(params, inst, cfg, 99);
  REQUIRE(g1.size() == static_cast<size_t>(cfg.group_size));
  for (int i = 0; i < cfg.group_size; ++i) {
    CHECK(g1[i].tokens == g2[i].tokens);
    CHECK(g1[i].old_log_probs == g2[i].old_log_probs);
    REQUIRE(g1[i].original_dists.size() == g1[i].tokens.size());
    for (size_t t = 0; t < g1[i].tokens.size(); ++t)
      CHECK(g1[i].original_dists[t].probs == g2[i].original_dists[t].probs);
    CHECK(g1[i].reward == g2[i].reward);
    CHECK(static_cast<int>(g1[i].tokens.size()) <= cfg.max_response_len);
  }
  const auto g3 = train::rollout_group(params, inst, cfg, 100);
  bool any_diff = false;
  for (int i = 0; i < cfg.group_size; ++i) any_diff |= (g1[i].tokens != g3[i].tokens);
  CHECK(any_diff);
}

TEST_CASE("sample_trajectory: greedy flag makes the group collapse to one sequence") {
  const TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 2);
  const env::Instance inst = env::generate_instance(8, cfg.grid_n, env::TaskKind::kRowMax);
  SampleSettings settings;
  settings.greedy = true;
  settings.max_len = cfg.max_response_len;
  const Trajectory a = train::sample_trajectory(params, inst, settings, 1);
  const Trajectory b = train::sample_trajectory(params, inst, settings, 2);
  CHECK(a.tokens == b.tokens);  // seeds do not matter under argmax
}

TEST_CASE("sample_trajectory: truncation at max length, scored as-is") {
  const TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 3);
  const env::Instance inst = env::generate_instance(9, cfg.grid_n, env::TaskKind::kCellLookup);
  SampleSettings settings;
  settings.max_len = 2;
  int truncated_seen = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const Trajectory t = train::sample_trajectory(params, inst, settings, seed);
    REQUIRE(t.tokens.size() <= 2);
    REQUIRE(t.tokens.size() >= 1);
    if (t.tokens.back() != tokens::kEos) {
      ++truncated_seen;
      CHECK(t.reward == 0.0);
    }
  }
  CHECK(truncated_seen > 0);
}

TEST_CASE("masked_pass: identity strategy reproduces the original distributions exactly") {
  const TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 4);
  const env::Instance inst = env::generate_instance(10, cfg.grid_n, env::TaskKind::kRowSum);
  SampleSettings settings;
  settings.max_len = cfg.max_response_len;
  Trajectory t = train::sample_trajectory(params, inst, settings, 5);
  train::masked_pass(params, t, env::PerturbStrategy::kIdentity, 77);
  REQUIRE(t.masked_dists.size() == t.original_dists.size());
  for (size_t i = 0; i < t.masked_dists.size(); ++i) {
    CHECK(t.masked_dists[i].probs == t.original_dists[i].probs);
    CHECK(t.masked_dists[i].log_probs == t.original_dists[i].log_probs);
  }
  const auto profile = dep::score_trajectory(t.original_dists, t.masked_dists, t.tokens,
                                             dep::MetricKind::kKlExact);
  for (double s : profile.token_scores) CHECK(s == 0.0);

  // Deterministic per seed under a real perturbation.
  Trajectory t2 = t;
  train::masked_pass(params, t, env::PerturbStrategy::kPatchBlacken, 123);
  train::masked_pass(params, t2, env::PerturbStrategy::kPatchBlacken, 123);
  for (size_t i = 0; i < t.masked_dists.size(); ++i)
    CHECK(t.masked_dists[i].probs == t2.masked_dists[i].probs);
}

TEST_CASE("train_step: ratios are exactly 1 at the first inner update") {
  for (const char* objective : {"grpo", "dapo", "vppo"}) {
    TrainConfig cfg = small_config();
    harness::apply_override(cfg, "objective", objective);
    TrainState state = train::init_state(cfg);
    const auto m = train::train_step(state, cfg);
    if (!m.skipped) CHECK(m.max_ratio_deviation == 0.0);
  }
}

TEST_CASE("train_step: grpo path bypasses dependency machinery") {
  TrainConfig cfg = small_config();
  harness::apply_override(cfg, "objective", "grpo");
  TrainState state = train::init_state(cfg);
  const auto m = train::train_step(state, cfg);
  CHECK_FALSE(m.skipped);
  CHECK(m.mean_alpha == 1.0);
  CHECK(m.masked_fraction == 1.0);
  CHECK(m.step == 0);
  CHECK(state.step == 1);
}

TEST_CASE("train_step: vppo masked fraction tracks k") {
  TrainConfig cfg = small_config();
  cfg.rollout_batch = 4;
  TrainState state = train::init_state(cfg);
  train::StepMetrics m;
  do {
    m = train::train_step(state, cfg);
  } while (m.skipped && state.step < 30);
  REQUIRE_FALSE(m.skipped);
  CHECK(m.masked_fraction >= cfg.k - 1e-9);
  CHECK(m.masked_fraction <= cfg.k + 0.15);  // ceil overhead on short responses
  CHECK(m.mean_alpha == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("train_step: identical (config, seed) reproduce metrics and parameters bitwise") {
  auto run = [](int steps) {
    TrainConfig cfg = small_config();
    cfg.seed = 11;
    TrainState state = train::init_state(cfg);
    std::vector<train::StepMetrics> ms;
    for (int s = 0; s < steps; ++s) ms.push_back(train::train_step(state, cfg));
    return std::make_pair(std::move(state), std::move(ms));
  };
  auto [s1, m1] = run(3);
  auto [s2, m2] = run(3);
  CHECK(params_bitwise_equal(s1.params, s2.params));
  for (int i = 0; i < 3; ++i) {
    CHECK(m1[i].mean_reward == m2[i].mean_reward);
    CHECK(m1[i].loss == m2[i].loss);
    CHECK(m1[i].entropy == m2[i].entropy);
    CHECK(m1[i].degenerate_groups == m2[i].degenerate_groups);
  }
}

TEST_CASE("evaluate: deterministic, near chance level at init") {
  const TrainConfig cfg = small_config();
  const policy::PolicyParams params = policy::init_policy(cfg.policy(), 6);
  CHECK(train::evaluate(params, cfg, 32, 5) == train::evaluate(params, cfg, 32, 5));
  CHECK_THROWS_AS(train::evaluate(params, cfg, 0, 5), TrainerError);

  // Fresh-init greedy accuracy on cell lookup stays at or below chance-ish
  // levels; measured over 50 init seeds.
  SampleSettings settings;
  settings.greedy = true;
  settings.max_len = cfg.max_response_len;
  double total = 0.0;
  int count = 0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const policy::PolicyParams p = policy::init_policy(cfg.policy(), seed);
    for (uint64_t j = 0; j < 4; ++j) {
      const env::Instance inst =
          env::generate_instance(train::mix_seed(seed, j), cfg.grid_n, env::TaskKind::kCellLookup);
      total += train::sample_trajectory(p, inst, settings, j).reward;
      ++count;
    }
  }
  CHECK(total / count <= 0.15);
}

TEST_CASE("checkpoint: round-trip is bit-identical and evaluation agrees") {
  TrainConfig cfg = small_config();
  TrainState state = train::init_state(cfg);
  train::train_step(state, cfg);

  const std::string path = temp_path("vppo_ckpt_test.vppo");
  train::save_checkpoint(state, cfg, path);
  const train::Checkpoint loaded = train::load_checkpoint(path);

  CHECK(params_bitwise_equal(state.params, loaded.state.params));
  CHECK(loaded.state.step == state.step);
  CHECK(loaded.state.adam.t == state.adam.t);
  CHECK(loaded.config.seed == cfg.seed);
  CHECK(train::evaluate(loaded.state.params, loaded.config, 16, 3) ==
        train::evaluate(state.params, cfg, 16, 3));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: corruption, bad magic and truncation are rejected") {
  TrainConfig cfg = small_config();
  TrainState state = train::init_state(cfg);
  const std::string path = temp_path("vppo_ckpt_corrupt.vppo");
  train::save_checkpoint(state, cfg, path);

  auto slurp = [&]() {
    std::ifstream f(path, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
  };
  const std::string good = slurp();

  // Flip a payload byte: checksum failure.
  {
    std::string bad = good;
    bad[bad.size() / 2] ^= 0x01;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << bad;
    f.close();
    CHECK_THROWS_WITH_AS(train::load_checkpoint(path), doctest::Contains("checksum"), TrainerError);
  }
  // Wrong magic: version error.
  {
    std::string bad = good;
    bad[0] = 'X';
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << bad;
    f.close();
    CHECK_THROWS_WITH_AS(train::load_checkpoint(path), doctest::Contains("magic"), TrainerError);
  }
  // Truncated file.
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << good.substr(0, good.size() / 3);
    f.close();
    CHECK_THROWS_AS(train::load_checkpoint(path), TrainerError);
  }
  std::remove(path.c_str());
}

TEST_CASE("draw_instance: follows the 50/5/45 task mix") {
  const TrainConfig cfg = small_config();
  int counts[3] = {0, 0, 0};
  const int n = 6000;
  for (int i = 0; i < n; ++i) {
    const env::Instance inst = train::draw_instance(cfg, train::mix_seed(3, i));
    counts[static_cast<int>(inst.kind)]++;
  }
  CHECK(counts[0] / static_cast<double>(n) == doctest::Approx(0.5).epsilon(0.05));
  CHECK(counts[1] / static_cast<double>(n) == doctest::Approx(0.05).epsilon(0.3));
  CHECK(counts[2] / static_cast<double>(n) == doctest::Approx(0.45).epsilon(0.08));
}
