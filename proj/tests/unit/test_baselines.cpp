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
#include <vector>

#include <gtest/gtest.h>

#include "covshift/baselines.hpp"
#include "covshift/diagnostics.hpp"
#include "covshift/gaussian_shift.hpp"

using namespace covshift;
using namespace covshift::baselines;

namespace {

struct Samples {
  std::vector<double> q, p;
};

Samples draw(double mu, std::size_t n, std::uint64_t seed) {
  const lab::ShiftConfig c{mu, n, n, seed};
  return {lab::sample(c, lab::Law::source).values, lab::sample(c, lab::Law::target).values};
}

}  // namespace

TEST(Bandwidth, Oracles) {
  const auto b = median_bandwidth(std::vector<double>{0.0, 1.0, 2.0});
  EXPECT_EQ(b.value, 1.0);
  EXPECT_FALSE(b.fallback);
  const auto same = median_bandwidth(std::vector<double>(10, 3.0));
  EXPECT_TRUE(same.fallback);
  EXPECT_GT(same.value, 0.0);
  EXPECT_THROW(median_bandwidth(std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Bandwidth, StandardNormalScale) {
  // median |X - Y| for X, Y iid N(0,1) is sqrt(2) * 0.6745
  const auto s = draw(0.0, 5000, 1);
  EXPECT_NEAR(median_bandwidth(s.q).value, std::sqrt(2.0) * 0.67449, 0.05);
}

TEST(Centers, DeterministicSubset) {
  const auto s = draw(0.0, 500, 2);
  const auto a = select_centers(s.q, 50, 9);
  EXPECT_EQ(a, select_centers(s.q, 50, 9));
  EXPECT_EQ(a.size(), 50u);
  for (double c : a) EXPECT_NE(std::find(s.q.begin(), s.q.end(), c), s.q.end());
}

TEST(Ulsif, ConstantBasisGivesUnitRatio) {
  // an enormous bandwidth makes every basis function 1, so the fit is the
  // constant h / (H + lambda) = 1 / (1 + lambda)
  const auto s = draw(0.5, 2000, 3);
  const auto fit = fit_ulsif(s.q, s.p, {0.0}, 1e8, 1e-6);
  EXPECT_NEAR(fit.model(0.3), 1.0 / (1.0 + 1e-6), 1e-9);
}

TEST(Ulsif, SolvesNormalEquationsAndMinimizes) {
  const auto s = draw(0.5, 3000, 4);
  const double bw = median_bandwidth(s.q).value;
  const auto fit = fit_ulsif(s.q, s.p, select_centers(s.q, 100, 1), bw, 1e-3);
  EXPECT_LE(fit.normal_equation_residual(), 1e-8);
  Rng rng(5);
  const double best = fit.objective(fit.model.alpha);
  for (int i = 0; i < 20; ++i) {
    Eigen::VectorXd a = fit.model.alpha;
    for (Eigen::Index k = 0; k < a.size(); ++k) a[k] += 1e-3 * rng.normal();
    EXPECT_GE(fit.objective(a), best);
  }
  EXPECT_THROW(fit_ulsif(s.q, s.p, {0.0}, bw, 0.0), std::invalid_argument);
}

TEST(Ulsif, ClipsNegativePredictions) {
  const auto s = draw(1.5, 2000, 6);
  const auto fit = fit_ulsif(s.q, s.p, select_centers(s.q, 100, 2), 0.3, 1e-3);
  for (double r : fit.model.evaluate(std::vector<double>{-8.0, -4.0, 0.0, 4.0, 8.0})) EXPECT_GE(r, 0.0);
}

TEST(Kliep, FeasibleAndImproving) {
  const auto s = draw(0.5, 3000, 7);
  const double bw = median_bandwidth(s.p).value;
  const auto fit = fit_kliep(s.q, s.p, select_centers(s.p, 100, 3), bw, 200);
  EXPECT_TRUE((fit.model.alpha.array() >= 0.0).all());
  EXPECT_NEAR(mean(fit.model.evaluate(s.q)), 1.0, 1e-8);
  // mean_P ln r is positive: the fit beats r = 1, whose value is 0
  EXPECT_GT(fit.objective, 0.0);
  for (std::size_t i = 1; i < fit.objective_trace.size(); ++i)
    EXPECT_GE(fit.objective_trace[i], fit.objective_trace[i - 1]);
}

TEST(Discriminator, NoShiftGivesUnitRatio) {
  const lab::ShiftConfig c{0.0, 20000, 20000, 8};
  const auto q = lab::sample(c, lab::Law::source).values;
  const auto p = lab::sample(c, lab::Law::target).values;
  const auto m = fit_discriminator(q, p, 1e-4, 100);
  EXPECT_TRUE(m.converged);
  for (double z : {-2.0, 0.0, 2.0}) EXPECT_NEAR(ratio_from_discriminator(m, z), 1.0, 0.1);
}

TEST(Discriminator, RecoversGaussianLogit) {
  // log r* = mu z - mu^2 / 2 is linear, so the logit is exact
  const auto s = draw(0.5, 10000, 9);
  const auto m = fit_discriminator(s.q, s.p, 0.0, 100);
  ASSERT_EQ(m.standard_errors.size(), 2);
  EXPECT_NEAR(m.weights[0], 0.5, 3.0 * m.standard_errors[1]);
  EXPECT_NEAR(m.intercept, -0.125, 3.0 * m.standard_errors[0]);
  EXPECT_FALSE(m.large_weights);
}

TEST(Discriminator, RatioIsClamped) {
  LogisticModel m;
  m.weights = Eigen::VectorXd::Constant(1, 100.0);
  m.n_q = m.n_p = 10;
  EXPECT_EQ(ratio_from_discriminator(m, 10.0), 1e6);
  EXPECT_EQ(ratio_from_discriminator(m, -10.0), 1e-6);
  const auto v = ratio_from_discriminator(m, std::vector<double>{10.0, -10.0});
  EXPECT_EQ(v[0], 1e6);
}

TEST(Discriminator, SeparableDataKeepsFiniteSlope) {
  std::vector<double> q(50), p(50);
  for (std::size_t i = 0; i < 50; ++i) {
    q[i] = -1.0 - 0.01 * static_cast<double>(i);
    p[i] = 1.0 + 0.01 * static_cast<double>(i);
  }
  const auto m = fit_discriminator(q, p, 0.0, 100);
  // the likelihood has no maximizer; the slope grows until the gradient vanishes
  EXPECT_TRUE(std::isfinite(m.weights[0]));
  EXPECT_GT(m.weights[0], 5.0);
}
