/*
 * Copyright 2026 The covshift Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "covshift/certificates.hpp"
#include "covshift/rng.hpp"

using namespace covshift;
using namespace covshift::cert;

namespace {

constexpr double kSanityKl = 1.9325850929940457;  // 0.5 (0.01 + 0.25 - 1 + ln 100)

DiscretePosterior random_posterior(Rng& rng, std::size_t n, const std::vector<double>& grid) {
  std::vector<double> w(n);
  for (double& x : w) x = rng.uniform() + 1e-3;
  return normalized(grid, w);
}

}  // namespace

TEST(KlGaussian, Oracles) {
  EXPECT_DOUBLE_EQ(kl_gaussian({0.3, 2.0}, {0.3, 2.0}), 0.0);
  EXPECT_NEAR(kl_gaussian(risk::kSanityPosterior, risk::kStandardPrior), 1.93259, 1e-5);
  EXPECT_NEAR(kl_gaussian(risk::kSanityPosterior, risk::kStandardPrior), kSanityKl, 1e-14);
  EXPECT_DOUBLE_EQ(kl_gaussian({0.7, 0.2}, {0.0, 1.0}), kl_gaussian({-0.7, 0.2}, {0.0, 1.0}));
  EXPECT_THROW(kl_gaussian({0.0, 0.0}, {0.0, 1.0}), std::invalid_argument);
}

TEST(SqrtBound, Oracles) {
  EXPECT_NEAR(sqrt_penalty(0.0, 1, std::nextafter(1.0, 0.0)), std::sqrt(2.0), 1e-12);
  // 0.1 + sqrt((1.93259 + ln 20 + ln 10^4 + 2) / 19999)
  EXPECT_NEAR(sqrt_bound(0.1, 1.93259, 10000, 0.05), 0.1284073, 1e-7);
  // quadrupling t at a fixed numerator roughly halves the penalty
  const double p1 = std::sqrt(10.0 / (2.0 * 1000 - 1));
  const double p4 = std::sqrt(10.0 / (2.0 * 4000 - 1));
  EXPECT_NEAR(p1 / p4, 2.0, 1e-3);
}

TEST(SqrtBound, Monotonicity) {
  EXPECT_GT(sqrt_bound(0.1, 2.0, 100, 0.05), sqrt_bound(0.1, 1.0, 100, 0.05));
  EXPECT_GT(sqrt_bound(0.1, 1.0, 100, 0.01), sqrt_bound(0.1, 1.0, 100, 0.05));
  EXPECT_GT(sqrt_bound(0.1, 1.0, 100, 0.05), sqrt_bound(0.1, 1.0, 1000, 0.05));
  EXPECT_GE(sqrt_bound(0.3, 1.0, 100, 0.05), 0.3);
  EXPECT_THROW(sqrt_bound(0.1, -1.0, 100, 0.05), std::invalid_argument);
  EXPECT_THROW(sqrt_bound(0.1, 1.0, 0, 0.05), std::invalid_argument);
  EXPECT_THROW(sqrt_bound(0.1, 1.0, 10, 1.0), std::invalid_argument);
}

TEST(KlBer, Oracles) {
  EXPECT_EQ(kl_ber(0.5, 0.5), 0.0);
  EXPECT_NEAR(kl_ber(0.0, 0.3), -std::log(0.7), 1e-15);
  EXPECT_NEAR(kl_ber(0.1, 0.3), 0.1 * std::log(1.0 / 3.0) + 0.9 * std::log(9.0 / 7.0), 1e-15);
  EXPECT_NEAR(kl_ber(0.1, 0.3), 0.11632, 1e-5);
  EXPECT_EQ(kl_ber(0.0, 0.0), 0.0);
  EXPECT_EQ(kl_ber(1.0, 1.0), 0.0);
}

TEST(KlBer, BoundaryIsInfinityNotNan) {
  EXPECT_EQ(kl_ber(0.2, 1.0), std::numeric_limits<double>::infinity());
  EXPECT_EQ(kl_ber(0.2, 0.0), std::numeric_limits<double>::infinity());
  EXPECT_FALSE(std::isnan(kl_ber(1.0, 0.0)));
  EXPECT_THROW(kl_ber(-0.1, 0.5), std::invalid_argument);
}

TEST(KlBerInverse, Oracles) {
  EXPECT_EQ(kl_ber_inv_upper(0.37, 0.0), 0.37);
  EXPECT_NEAR(kl_ber_inv_upper(0.0, 0.05), 1.0 - std::exp(-0.05), 1e-12);
  EXPECT_NEAR(kl_ber_inv_upper(0.0, 0.05), 0.0487706, 1e-7);
  EXPECT_EQ(kl_ber_inv_upper(1.0, 0.3), 1.0);
  // kl(0.5 || p) stays below 10 until p is within double precision of 1
  EXPECT_GT(kl_ber_inv_upper(0.5, 10.0), 1.0 - 1e-8);
}

TEST(KlBerInverse, RoundTripOnRandomInputs) {
  Rng rng(2024);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double q = rng.uniform(0.001, 0.95);
    const double eps = rng.uniform(1e-6, 0.5);
    const double p = kl_ber_inv_upper(q, eps);
    ASSERT_GE(p, q);
    if (p < 1.0) worst = std::max(worst, std::abs(kl_ber(q, p) - eps));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(KlBerInverse, MonotoneInBothArguments) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const double q = rng.uniform(0.0, 0.9);
    const double e = rng.uniform(0.0, 0.3);
    EXPECT_LE(kl_ber_inv_upper(q, e), kl_ber_inv_upper(q, e + 0.01) + 1e-15);
    EXPECT_LE(kl_ber_inv_upper(q, e), kl_ber_inv_upper(q + 0.05, e) + 1e-15);
  }
}

TEST(BernoulliKlBound, SanityPointBudget) {
  const double eps = bernoulli_kl_budget(1.93259, 10000, 0.05);
  // (1.93259 + ln(2 * 100 / 0.05)) / 10^4
  EXPECT_NEAR(eps, 0.00102266, 1e-8);
  const double b = bernoulli_kl_bound(0.02, 1.93259, 10000, 0.05);
  EXPECT_NEAR(kl_ber(0.02, b), eps, 1e-12);
  EXPECT_GT(b, 0.02);
  EXPECT_LT(b, 0.03);
}

TEST(BernoulliKlBound, VanishingBudget) {
  const double b = bernoulli_kl_bound(0.2, 0.0, 1000000000, std::nextafter(1.0, 0.0));
  EXPECT_NEAR(b, 0.2, 1e-3);
}

TEST(BernoulliKlBound, TighterThanSqrtAtSanityPoint) {
  const double r = 0.0203125;
  for (std::uint64_t t : {100u, 1000u, 10000u})
    EXPECT_LE(bernoulli_kl_bound(r, kSanityKl, t, 0.05), sqrt_bound(r, kSanityKl, t, 0.05)) << t;
}

TEST(Peeling, EpochBoundariesAreExact) {
  const PeelingSchedule s;
  EXPECT_EQ(epoch_index(100, s), 0u);
  EXPECT_EQ(epoch_index(199, s), 0u);
  EXPECT_EQ(epoch_index(200, s), 1u);
  EXPECT_EQ(epoch_index(399, s), 1u);
  EXPECT_EQ(epoch_index(400, s), 2u);
  EXPECT_EQ(epoch_index(100ull << 40, s), 40u);
  EXPECT_EQ(epoch_index((100ull << 40) - 1, s), 39u);
  EXPECT_THROW(epoch_index(99, s), std::invalid_argument);
}

TEST(Peeling, NonIntegerBase) {
  const PeelingSchedule s{100, 1.5, 0.05};
  EXPECT_EQ(epoch_index(149, s), 0u);
  EXPECT_EQ(epoch_index(150, s), 1u);
  EXPECT_EQ(epoch_index(224, s), 1u);
  EXPECT_EQ(epoch_index(225, s), 2u);
}

TEST(Peeling, BudgetOracles) {
  const PeelingSchedule s;
  const auto e0 = epoch_budget(0, s);
  EXPECT_DOUBLE_EQ(e0.delta_k, 0.025);
  EXPECT_EQ(e0.epoch_size, 100u);
  EXPECT_EQ(epoch_budget(3, s).epoch_size, 800u);
  double partial = 0.0;
  for (std::uint64_t k = 0; k < 30; ++k) {
    partial += epoch_budget(k, s).delta_k;
    EXPECT_LE(partial, s.delta);
  }
  EXPECT_NEAR(partial, s.delta, 1e-10);
  double more = partial;
  for (std::uint64_t k = 30; k < 60; ++k) more += epoch_budget(k, s).delta_k;
  EXPECT_NEAR(more, s.delta, 1e-12);
  EXPECT_LE(more, s.delta);
}

TEST(AnytimeBound, NumeratorGrowthAtTMin) {
  const PeelingSchedule s;
  const double kl = 0.7, emp = 0.1;
  const auto any = anytime_bound(emp, kl, 100, s, BoundMode::anytime_sqrt);
  const double pen = any.bound - emp;
  const double fixed_num = kl + std::log(1.0 / 0.05) + std::log(100.0) + 2.0;
  const double any_num = pen * pen * (2.0 * 100 - 1);
  EXPECT_NEAR(any_num - fixed_num, std::log(100.0) + std::log(2.0), 1e-10);
  EXPECT_EQ(any.epoch.value(), 0u);
  EXPECT_DOUBLE_EQ(any.epoch_budget.value(), 0.025);
  EXPECT_EQ(any.mode, BoundMode::anytime_sqrt);
}

TEST(AnytimeBound, DominatesFixedTime) {
  const PeelingSchedule s;
  for (std::uint64_t t = 100; t <= 5000; t += 37) {
    EXPECT_GE(anytime_bound(0.05, kSanityKl, t, s, BoundMode::anytime_sqrt).bound,
              sqrt_bound(0.05, kSanityKl, t, s.delta));
    EXPECT_GE(anytime_bound(0.05, kSanityKl, t, s, BoundMode::anytime_bernoulli_kl).bound,
              bernoulli_kl_bound(0.05, kSanityKl, t, s.delta));
  }
}

TEST(AnytimeBound, DecreasesWithinAnEpoch) {
  const PeelingSchedule s;
  double prev = std::numeric_limits<double>::infinity();
  for (std::uint64_t t = 200; t < 400; ++t) {
    const double b = anytime_bound(0.05, 1.0, t, s, BoundMode::anytime_sqrt).bound;
    ASSERT_TRUE(std::isfinite(b));
    ASSERT_LT(b, prev);
    prev = b;
  }
  EXPECT_THROW(anytime_bound(0.05, 1.0, 50, s, BoundMode::anytime_sqrt), std::invalid_argument);
}

TEST(BoundReport, InvariantsAndJson) {
  const auto r = fixed_time_bound(0.1, 1.0, 500, 0.05, BoundMode::bernoulli_kl);
  EXPECT_GE(r.bound, r.emp_risk);
  EXPECT_LE(r.bound, 1.0);
  const auto j = to_json(r);
  EXPECT_EQ(j["mode"], "bernoulli_kl");
  EXPECT_FALSE(j.contains("epoch"));
  const auto a = to_json(anytime_bound(0.1, 1.0, 500, PeelingSchedule{}, BoundMode::bernoulli_kl));
  EXPECT_EQ(a["mode"], "anytime_bernoulli_kl");
  EXPECT_EQ(a["epoch"], 2);
}

TEST(Gibbs, Oracles) {
  const std::vector<double> grid = {0.0, 1.0};
  const DiscretePosterior prior{grid, {0.5, 0.5}};
  const std::vector<double> risks = {0.0, 1.0};
  const auto g = gibbs_posterior(risks, prior, 1.0);
  EXPECT_NEAR(g.mass[0], 0.7310585786300049, 1e-12);
  EXPECT_NEAR(g.mass[1], 0.2689414213699951, 1e-12);

  const std::vector<double> flat = {0.3, 0.3};
  const auto same = gibbs_posterior(flat, DiscretePosterior{grid, {0.2, 0.8}}, 4.0);
  EXPECT_NEAR(same.mass[0], 0.2, 1e-15);

  const auto cold = gibbs_posterior(risks, prior, 1e4);
  EXPECT_NEAR(cold.mass[0], 1.0, 1e-12);
  EXPECT_TRUE(std::isfinite(cold.mass[1]));
}

TEST(Gibbs, ZeroPriorMassStaysZero) {
  const std::vector<double> grid = {0.0, 1.0, 2.0};
  const DiscretePosterior prior{grid, {0.5, 0.0, 0.5}};
  const std::vector<double> risks = {1.0, 0.0, 2.0};
  const auto g = gibbs_posterior(risks, prior, 2.0);
  EXPECT_EQ(g.mass[1], 0.0);
  g.validate();
}

TEST(Gibbs, ObjectiveGapIdentity) {
  Rng rng(17);
  const auto grid = default_slope_grid();
  ASSERT_EQ(grid.size(), 601u);
  const auto prior = discretize(risk::kStandardPrior, grid);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> risks(grid.size());
    const double c = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < grid.size(); ++i) risks[i] = (1.0 - grid[i] * c) * (1.0 - grid[i] * c) / 16.0;
    const double beta = rng.uniform(0.5, 200.0);
    const auto g = gibbs_posterior(risks, prior, beta);
    const auto cand = random_posterior(rng, grid.size(), grid);
    const auto gap = gibbs_objective_gap(cand, g, beta, risks, prior);
    worst = std::max(worst, std::abs(gap.gap - gap.kl_scaled));
    EXPECT_GE(gap.kl_scaled, 0.0);
  }
  EXPECT_LE(worst, 1e-9);
  // candidate = Gibbs posterior
  std::vector<double> risks(grid.size(), 0.1);
  const auto g = gibbs_posterior(risks, prior, 3.0);
  const auto self = gibbs_objective_gap(g, g, 3.0, risks, prior);
  EXPECT_NEAR(self.gap, 0.0, 1e-14);
  EXPECT_EQ(self.kl_scaled, 0.0);
}

TEST(Gibbs, GapRejectsNonAbsolutelyContinuousCandidate) {
  const std::vector<double> grid = {0.0, 1.0};
  const DiscretePosterior prior{grid, {1.0, 0.0}};
  const std::vector<double> risks = {0.0, 0.0};
  const auto g = gibbs_posterior(risks, prior, 1.0);
  const DiscretePosterior cand{grid, {0.5, 0.5}};
  EXPECT_THROW(gibbs_objective_gap(cand, g, 1.0, risks, prior), std::invalid_argument);
}

TEST(Gibbs, TvStabilityBound) {
  Rng rng(99);
  const auto grid = uniform_grid(-3.0, 3.0, 61);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto prior = random_posterior(rng, grid.size(), grid);
    std::vector<double> r1(grid.size()), r2(grid.size());
    double sup = 0.0;
    const double scale = rng.uniform(0.0, 0.5);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      r1[i] = rng.uniform();
      r2[i] = r1[i] + rng.uniform(-scale, scale);
      sup = std::max(sup, std::abs(r1[i] - r2[i]));
    }
    const double beta = rng.uniform(0.1, 20.0);
    const double tv = tv_distance(gibbs_posterior(r1, prior, beta), gibbs_posterior(r2, prior, beta));
    ASSERT_LE(tv, 0.5 * beta * sup + 1e-12) << trial;
  }
}

TEST(Divergences, PinskerOnRandomPairs) {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    const auto grid = uniform_grid(0.0, 1.0, n);
    const auto p = random_posterior(rng, n, grid);
    const auto q = random_posterior(rng, n, grid);
    ASSERT_LE(tv_distance(p, q), std::sqrt(0.5 * kl_discrete(p, q)) + 1e-12);
  }
}

TEST(Divergences, TvOracles) {
  const std::vector<double> grid = {0.0, 1.0};
  EXPECT_NEAR(tv_distance({grid, {0.6, 0.4}}, {grid, {0.5, 0.5}}), 0.1, 1e-15);
  EXPECT_EQ(tv_distance({grid, {1.0, 0.0}}, {grid, {0.0, 1.0}}), 1.0);
  EXPECT_EQ(tv_distance({grid, {0.3, 0.7}}, {grid, {0.3, 0.7}}), 0.0);
  EXPECT_THROW(tv_distance({grid, {1.0, 0.0}}, {{0.0, 2.0}, {1.0, 0.0}}), std::invalid_argument);
  EXPECT_EQ(kl_discrete({grid, {0.5, 0.5}}, {grid, {1.0, 0.0}}), std::numeric_limits<double>::infinity());
}

TEST(Discretize, StandardPriorIsSymmetric) {
  const auto prior = discretize(risk::kStandardPrior, default_slope_grid());
  prior.validate();
  EXPECT_NEAR(prior.mass[0], prior.mass[600], 1e-18);
  EXPECT_EQ(prior.grid[300], 0.0);
}
