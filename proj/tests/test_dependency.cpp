#include <doctest.h>

#include <cmath>
#include <random>

#include "vppo/dependency.hpp"

using namespace vppo;
using dep::DependencyError;
using dep::DependencyProfile;
using dep::MetricKind;
using policy::StepDistribution;

namespace {

StepDistribution make_dist(std::vector<double> probs) {
  StepDistribution d;
  d.probs = std::move(probs);
  d.log_probs.reserve(d.probs.size());
  for (double p : d.probs) d.log_probs.push_back(std::log(p));
  return d;
}

StepDistribution random_dist(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  std::vector<double> p(n);
  double s = 0.0;
  for (double& v : p) s += (v = unif(rng));
  for (double& v : p) v /= s;
  return make_dist(std::move(p));
}

// Direct-formula oracle for KL, independent of the library path.
double kl_formula(const StepDistribution& p, const StepDistribution& q) {
  double kl = 0.0;
  for (size_t i = 0; i < p.probs.size(); ++i) kl += p.probs[i] * std::log(p.probs[i] / q.probs[i]);
  return kl;
}

}  // namespace

TEST_CASE("kl_exact: identity, hand values, nonnegativity") {
  const StepDistribution p = make_dist({0.9, 0.1});
  const StepDistribution q = make_dist({0.5, 0.5});
  CHECK(dep::kl_exact(p, p) == 0.0);
  CHECK(dep::kl_exact(p, q) == doctest::Approx(kl_formula(p, q)).epsilon(1e-12));
  CHECK(dep::kl_exact(p, q) == doctest::Approx(0.3681).epsilon(1e-4));

  const StepDistribution p2 = make_dist({0.5, 0.5});
  const StepDistribution q2 = make_dist({0.25, 0.75});
  CHECK(dep::kl_exact(p2, q2) == doctest::Approx(kl_formula(p2, q2)).epsilon(1e-12));
  CHECK(dep::kl_exact(p2, q2) == doctest::Approx(0.1438).epsilon(1e-4));
}

TEST_CASE("kl_exact: nonnegative, zero iff equal (fuzzed)") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const StepDistribution p = random_dist(8, rng);
    const StepDistribution q = random_dist(8, rng);
    const double kl = dep::kl_exact(p, q);
    CHECK(kl >= -1e-12);
    CHECK(dep::kl_exact(p, p) <= 1e-12);
    if (kl < 1e-12) {
      for (size_t i = 0; i < p.probs.size(); ++i)
        CHECK(p.probs[i] == doctest::Approx(q.probs[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("kl_exact: rejects nonpositive probabilities") {
  StepDistribution bad = make_dist({0.5, 0.5});
  bad.probs[0] = 0.0;
  const StepDistribution ok = make_dist({0.5, 0.5});
  CHECK_THROWS_AS(dep::kl_exact(bad, ok), DependencyError);
  CHECK_THROWS_AS(dep::kl_exact(ok, bad), DependencyError);
}

TEST_CASE("kl_k3: identity, hand value, zero-probability error") {
  CHECK(dep::kl_k3(0.3, 0.3) == 0.0);
  // (r - 1) - log r at r = 0.4 / 0.8 = 0.5.
  const double expect = (0.5 - 1.0) - std::log(0.5);
  CHECK(dep::kl_k3(0.8, 0.4) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(dep::kl_k3(0.8, 0.4) == doctest::Approx(0.1931).epsilon(1e-4));
  CHECK(dep::kl_k3(0.2, 0.9) >= 0.0);
  CHECK_THROWS_AS(dep::kl_k3(0.0, 0.5), DependencyError);
}

TEST_CASE("kl_k3: exactly unbiased under exhaustive expectation") {
  // Sum over the vocabulary of p(x) * k3(x) must reproduce exact KL.
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const StepDistribution p = random_dist(4, rng);
    const StepDistribution q = random_dist(4, rng);
    double expectation = 0.0;
    for (int x = 0; x < 4; ++x) expectation += p.probs[x] * dep::kl_k3(p.probs[x], q.probs[x]);
    CHECK(expectation == doctest::Approx(dep::kl_exact(p, q)).epsilon(1e-12));
    CHECK(dep::kl_k3(p.probs[0], q.probs[0]) >= 0.0);
  }
}

TEST_CASE("jsd_exact: identity, symmetry, range, near-disjoint limit") {
  std::mt19937_64 rng(11);
  const StepDistribution p = random_dist(6, rng);
  CHECK(dep::jsd_exact(p, p) == doctest::Approx(0.0).epsilon(1e-15));
  for (int trial = 0; trial < 200; ++trial) {
    const StepDistribution a = random_dist(6, rng);
    const StepDistribution b = random_dist(6, rng);
    const double ab = dep::jsd_exact(a, b);
    CHECK(ab == doctest::Approx(dep::jsd_exact(b, a)).epsilon(1e-12));
    CHECK(ab >= 0.0);
    CHECK(ab <= std::log(2.0) + 1e-12);
  }
  const StepDistribution x = make_dist({1.0 - 1e-9, 1e-9});
  const StepDistribution y = make_dist({1e-9, 1.0 - 1e-9});
  CHECK(dep::jsd_exact(x, y) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("top1_drop: signed difference in [-1, 1]") {
  CHECK(dep::top1_drop(0.7, 0.2) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(dep::top1_drop(0.4, 0.4) == 0.0);
  CHECK(dep::top1_drop(0.1, 0.6) == doctest::Approx(-0.5).epsilon(1e-15));
}

TEST_CASE("trajectory_dependency: mean semantics and the empty error") {
  CHECK(dep::trajectory_dependency(std::vector<double>{0.2, 0.4}) ==
        doctest::Approx(0.3).epsilon(1e-12));
  CHECK(dep::trajectory_dependency(std::vector<double>{0.0, 0.0, 0.0}) == 0.0);
  CHECK(dep::trajectory_dependency(std::vector<double>{0.77}) == 0.77);
  CHECK_THROWS_AS(dep::trajectory_dependency(std::vector<double>{}), DependencyError);
}

TEST_CASE("trajectory_dependency: concatenation is the length-weighted mean of parts") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> unif(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(3 + rng() % 5), b(1 + rng() % 7);
    for (double& v : a) v = unif(rng);
    for (double& v : b) v = unif(rng);
    std::vector<double> cat = a;
    cat.insert(cat.end(), b.begin(), b.end());
    const double expect = (dep::trajectory_dependency(a) * a.size() +
                           dep::trajectory_dependency(b) * b.size()) /
                          (a.size() + b.size());
    CHECK(dep::trajectory_dependency(cat) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("score_trajectory: per-metric scoring and the profile invariant") {
  std::mt19937_64 rng(17);
  std::vector<StepDistribution> orig, masked;
  std::vector<int> toks;
  for (int t = 0; t < 6; ++t) {
    orig.push_back(random_dist(5, rng));
    masked.push_back(random_dist(5, rng));
    toks.push_back(static_cast<int>(rng() % 5));
  }
  for (MetricKind kind : {MetricKind::kKlExact, MetricKind::kKlK3, MetricKind::kJsd,
                          MetricKind::kTop1Drop}) {
    const DependencyProfile prof = dep::score_trajectory(orig, masked, toks, kind);
    REQUIRE(prof.token_scores.size() == toks.size());
    CHECK(prof.trajectory_mean ==
          doctest::Approx(dep::trajectory_dependency(prof.token_scores)).epsilon(1e-12));
    if (kind != MetricKind::kTop1Drop)
      for (double s : prof.token_scores) CHECK(s >= 0.0);
  }
  CHECK(dep::score_trajectory(orig, orig, toks, MetricKind::kKlExact).trajectory_mean == 0.0);
}

TEST_CASE("histogram: constant scores give zero skew and one occupied bin") {
  std::vector<double> constant(200, 0.7);
  const dep::Histogram h = dep::histogram(constant, 10);
  CHECK(h.skewness == 0.0);
  int occupied = 0;
  for (int64_t c : h.counts) occupied += (c > 0);
  CHECK(occupied == 1);
  CHECK(h.n == 200);
}

TEST_CASE("histogram: exponential-like scores are right-skewed") {
  // Known right-skewed generator as the oracle.
  std::mt19937_64 rng(19);
  std::exponential_distribution<double> expo(2.0);
  std::vector<double> scores(5000);
  for (double& v : scores) v = expo(rng);
  const dep::Histogram h = dep::histogram(scores, 30);
  CHECK(h.skewness > 0.5);
  CHECK(h.mean > h.bin_hi(h.mode_bin));  // mean sits right of the mode bin
}

TEST_CASE("dependency_histogram: needs at least 100 tokens, fills both levels") {
  std::mt19937_64 rng(23);
  std::exponential_distribution<double> expo(1.0);
  std::vector<DependencyProfile> profiles;
  for (int i = 0; i < 40; ++i) {
    DependencyProfile p;
    for (int t = 0; t < 5; ++t) p.token_scores.push_back(expo(rng));
    p.trajectory_mean = dep::trajectory_dependency(p.token_scores);
    profiles.push_back(std::move(p));
  }
  const dep::HistogramPair pair = dep::dependency_histogram(profiles, 20);
  CHECK(pair.token_level.n == 200);
  CHECK(pair.trajectory_level.n == 40);
  CHECK(pair.token_level.skewness > 0.0);

  profiles.resize(10);  // 50 tokens only
  CHECK_THROWS_AS(dep::dependency_histogram(profiles, 20), DependencyError);
}
