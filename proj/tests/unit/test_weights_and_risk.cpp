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

#include "covshift/constraints.hpp"
#include "covshift/diagnostics.hpp"
#include "covshift/gaussian_shift.hpp"
#include "covshift/weighted_risk.hpp"

using namespace covshift;

TEST(Ess, Oracles) {
  const std::vector<double> equal(37, 2.5);
  EXPECT_DOUBLE_EQ(diag::ess(equal).ess_abs, 37.0);
  EXPECT_DOUBLE_EQ(diag::ess(equal).ess_fraction, 1.0);
  std::vector<double> atom(10, 0.0);
  atom[0] = 1.0;
  EXPECT_DOUBLE_EQ(diag::ess(atom).ess_abs, 1.0);
  EXPECT_NEAR(diag::ess(std::vector<double>{2, 1, 1}).ess_abs, 16.0 / 6.0, 1e-15);
}

TEST(Ess, RejectsBadWeights) {
  EXPECT_THROW(diag::ess(std::vector<double>{1.0, -0.1}), std::invalid_argument);
  EXPECT_THROW(diag::ess(std::vector<double>{0.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(diag::ess(std::vector<double>{1.0, NAN}), std::invalid_argument);
  EXPECT_THROW(diag::ess(std::vector<double>{}), std::invalid_argument);
}

TEST(Ess, HugeWeightsStayFinite) {
  const std::vector<double> w = {1e200, 1e200, 1.0};
  EXPECT_NEAR(diag::ess(w).ess_abs, 2.0, 1e-12);
}

TEST(SecondMoment, Oracles) {
  EXPECT_DOUBLE_EQ(diag::second_moment(std::vector<double>(5, 1.0)), 1.0);
  EXPECT_DOUBLE_EQ(diag::second_moment(std::vector<double>{0.0, 2.0}), 2.0);
  const auto q = lab::sample(lab::ShiftConfig{0.5, 100000, 1, 31}, lab::Law::source);
  const auto w = lab::true_ratio(q.view(), 0.5);
  EXPECT_NEAR(diag::second_moment(w), std::exp(0.25), 0.1 * std::exp(0.25));
}

TEST(L2qError, Oracles) {
  const auto q = lab::sample(lab::ShiftConfig{0.5, 20000, 1, 8}, lab::Law::source);
  EXPECT_EQ(diag::l2q_error(lab::true_ratio(q.view(), 0.5), 0.5, q.view()), 0.0);
  const std::vector<double> ones(q.size(), 1.0);
  const double est = diag::l2q_error(ones, 0.5, q.view());
  const double pop = std::sqrt(std::exp(0.25) - 1.0);
  EXPECT_NEAR(pop, 0.5329, 1e-4);
  // delta method on the mean of (1 - r*)^2: its variance is
  // E(1-r*)^4 - (e^{mu^2}-1)^2 with E(1-r*)^4 = e^{6 mu^2} - 4 e^{3 mu^2} + 6 e^{mu^2} - 3
  const double m2 = std::exp(0.25) - 1.0;
  const double m4 = std::exp(1.5) - 4.0 * std::exp(0.75) + 6.0 * std::exp(0.25) - 3.0;
  const double se = std::sqrt((m4 - m2 * m2) / static_cast<double>(q.size())) / (2.0 * pop);
  EXPECT_NEAR(est, pop, 4.0 * se);
}

TEST(WeightTransforms, Oracles) {
  EXPECT_EQ(al::posthoc_normalize(std::vector<double>{2, 2, 2}), (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(al::posthoc_normalize(std::vector<double>{1, 3}), (std::vector<double>{0.5, 1.5}));
  const std::vector<double> w = {0.5, 1.5, 1.0};
  const auto again = al::posthoc_normalize(w);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(again[i], w[i], 1e-12);

  EXPECT_EQ(al::clip_weights(std::vector<double>{1, 100}, 20.0), (std::vector<double>{1, 20}));
  EXPECT_EQ(al::clip_weights(w, 2.0), w);
  EXPECT_THROW(al::clip_weights(w, 0.0), std::invalid_argument);

  EXPECT_EQ(al::temper_weights(w, 1.0), w);
  EXPECT_DOUBLE_EQ(al::temper_weights(std::vector<double>{4.0}, 0.5)[0], 2.0);
  EXPECT_LT(mean(al::temper_weights(w, 0.7)), 1.0);
  EXPECT_THROW(al::temper_weights(w, 1.5), std::invalid_argument);
}

TEST(WeightTransforms, ClipIsMonotoneInThreshold) {
  const auto q = lab::sample(lab::ShiftConfig{2.0, 5000, 1, 4}, lab::Law::source);
  const auto w = lab::true_ratio(q.view(), 2.0);
  double prev = 0.0;
  for (double c : {1.0, 5.0, 20.0, 60.0, 1e9}) {
    const double m = diag::second_moment(al::clip_weights(w, c));
    EXPECT_GE(m, prev);
    prev = m;
  }
  EXPECT_DOUBLE_EQ(prev, diag::second_moment(w));
}

TEST(Loss, Oracles) {
  EXPECT_EQ(risk::squared_loss(1.0, 3.7), 0.0);
  EXPECT_EQ(risk::squared_loss(0.0, 2.0), 4.0);
  EXPECT_EQ(risk::squared_loss(-1.0, 1.0), 4.0);
  EXPECT_EQ(risk::clipped_scaled_loss(1.0, 3.7), 0.0);
  EXPECT_DOUBLE_EQ(risk::clipped_scaled_loss(0.5, 2.0), 0.0625);
  EXPECT_EQ(risk::clipped_scaled_loss(0.0, 10.0), 1.0);
  EXPECT_THROW(risk::parse_loss("hinge"), std::invalid_argument);
}

TEST(WeightedRisk, Oracles) {
  const std::vector<double> z = {0.3, -1.2, 2.0};
  const std::vector<double> ones(3, 1.0), zeros(3, 0.0);
  EXPECT_EQ(risk::weighted_empirical_risk(ones, 1.0, z, risk::Loss::squared), 0.0);
  EXPECT_NEAR(risk::weighted_empirical_risk(ones, 0.0, z, risk::Loss::squared), (0.09 + 1.44 + 4.0) / 3.0, 1e-15);
  EXPECT_EQ(risk::posterior_risk(risk::kSanityPosterior, zeros, z), 0.0);
  EXPECT_THROW(risk::weighted_empirical_risk(ones, 0.0, std::vector<double>{1.0}, risk::Loss::squared),
               std::invalid_argument);
}

TEST(WeightedRisk, OracleWeightsTrackTargetRisk) {
  // One seed per slope; each within 4 sigma of (1 - a)^2 (1 + mu^2). The
  // sigma is the standard error of the importance-weighted mean itself.
  const double mu = 0.5;
  const std::size_t n = 10000;
  const auto q = lab::sample(lab::ShiftConfig{mu, n, 1, 77}, lab::Law::source);
  const auto w = lab::true_ratio(q.view(), mu);
  const double e = std::exp(mu * mu);
  const double m4 = e * (16 * mu * mu * mu * mu + 24 * mu * mu + 3);  // E_Q[r*^2 z^4]
  for (double a : risk::kPredictorGrid) {
    const double f = (1 - a) * (1 - a);
    const double target = lab::target_risk(a, mu);
    const double sd = f * std::sqrt((m4 - (1 + mu * mu) * (1 + mu * mu)) / static_cast<double>(n));
    EXPECT_NEAR(risk::weighted_empirical_risk(w, a, q.view(), risk::Loss::squared), target, 4.0 * sd + 1e-15) << a;
  }
}

TEST(PosteriorRisk, Oracles) {
  EXPECT_DOUBLE_EQ(risk::posterior_target_risk(risk::kSanityPosterior, 0.5), 0.0203125);
  EXPECT_DOUBLE_EQ(risk::posterior_target_risk({0.5, 0.01}, 1.5), 0.0528125);
  EXPECT_LT(risk::posterior_target_risk({1.0, 1e-12}, 3.0), 1e-12);
  EXPECT_THROW(risk::posterior_target_risk({0.5, 0.0}, 0.5), std::invalid_argument);
}

TEST(PosteriorRisk, DegenerateLimitMatchesPointRisk) {
  const auto q = lab::sample(lab::ShiftConfig{0.5, 1000, 1, 3}, lab::Law::source);
  const auto w = lab::true_ratio(q.view(), 0.5);
  const double point = risk::weighted_empirical_risk(w, 0.3, q.view(), risk::Loss::clipped_scaled);
  EXPECT_NEAR(risk::posterior_risk({0.3, 1e-12}, w, q.view()), point, 1e-10);
}

TEST(PosteriorRisk, PopulationValueAtSanityPoint) {
  const auto q = lab::sample(lab::ShiftConfig{0.5, 200000, 1, 12}, lab::Law::source);
  const auto w = lab::true_ratio(q.view(), 0.5);
  EXPECT_NEAR(risk::posterior_risk(risk::kSanityPosterior, w, q.view()), 0.0203, 1e-3);
}
