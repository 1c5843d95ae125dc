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

#ifndef COVSHIFT_WEIGHTED_RISK_HPP
#define COVSHIFT_WEIGHTED_RISK_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "covshift/numeric.hpp"

namespace covshift::risk {

/// Loss ceiling that maps the squared loss onto [0, 1].
inline constexpr double kDefaultLossCeiling = 16.0;

/// Slope grid of the weighted-risk stage.
inline constexpr std::array<double, 5> kPredictorGrid = {-1.0, -0.5, 0.0, 0.5, 1.0};

/// h_a(z) = a z.
struct Predictor {
  double a = 0.0;
  double operator()(double z) const noexcept { return a * z; }
};

/// Scalar Gaussian law over the slope a.
struct GaussianPosterior {
  double a0 = 0.0;
  double sigma2 = 1.0;

  void validate() const {
    require(std::isfinite(a0), "GaussianPosterior: mean must be finite");
    require(sigma2 > 0.0 && std::isfinite(sigma2), "GaussianPosterior: variance must be positive");
  }
};

/// The evaluation posterior N(0.5, 0.01).
inline constexpr GaussianPosterior kSanityPosterior{0.5, 0.01};
/// The prior N(0, 1).
inline constexpr GaussianPosterior kStandardPrior{0.0, 1.0};

enum class Loss { squared, clipped_scaled };

inline Loss parse_loss(std::string_view s) {
  if (s == "squared") return Loss::squared;
  if (s == "clipped_scaled") return Loss::clipped_scaled;
  throw std::invalid_argument("unknown loss: " + std::string(s));
}

/// (z - a z)^2 = (1 - a)^2 z^2.
inline double squared_loss(double a, double z) noexcept { return (1.0 - a) * (1.0 - a) * z * z; }

inline double clipped_scaled_loss(double a, double z, double ceiling = kDefaultLossCeiling) noexcept {
  return std::min(squared_loss(a, z), ceiling) / ceiling;
}

inline double loss(Loss kind, double a, double z, double ceiling = kDefaultLossCeiling) noexcept {
  return kind == Loss::squared ? squared_loss(a, z) : clipped_scaled_loss(a, z, ceiling);
}

/// (1/t) sum_i w_i L(h_a, z_i).
inline double weighted_empirical_risk(std::span<const double> weights, double a, std::span<const double> batch,
                                      Loss kind, double ceiling = kDefaultLossCeiling) {
  require(weights.size() == batch.size(), "weighted_empirical_risk: weights and batch differ in length");
  require(!batch.empty(), "weighted_empirical_risk: empty batch");
  CompensatedSum s;
  for (std::size_t i = 0; i < batch.size(); ++i) s += weights[i] * loss(kind, a, batch[i], ceiling);
  return s.value() / static_cast<double>(batch.size());
}

/// E_{a ~ rho}[(1 - a)^2] = (1 - a0)^2 + sigma^2.
inline double posterior_loss_factor(const GaussianPosterior& rho) noexcept {
  return (1.0 - rho.a0) * (1.0 - rho.a0) + rho.sigma2;
}

/// Posterior-averaged clipped loss at one point, with the clip applied
/// after the expectation: min(((1 - a0)^2 + sigma^2) z^2, L) / L. The
/// exchange differs from E[min(.)] only where the clip is active.
inline double posterior_point_loss(const GaussianPosterior& rho, double z,
                                   double ceiling = kDefaultLossCeiling) noexcept {
  return std::min(posterior_loss_factor(rho) * z * z, ceiling) / ceiling;
}

/// (1/t) sum_i w_i E_{h ~ rho}[L~(h, z_i)].
inline double posterior_risk(const GaussianPosterior& rho, std::span<const double> weights,
                             std::span<const double> batch, double ceiling = kDefaultLossCeiling) {
  rho.validate();
  require(weights.size() == batch.size(), "posterior_risk: weights and batch differ in length");
  require(!batch.empty(), "posterior_risk: empty batch");
  CompensatedSum s;
  for (std::size_t i = 0; i < batch.size(); ++i) s += weights[i] * posterior_point_loss(rho, batch[i], ceiling);
  return s.value() / static_cast<double>(batch.size());
}

/// R_P(rho) under the Gaussian shift, scaled by the ceiling; the clipping
/// correction is neglected.
inline double posterior_target_risk(const GaussianPosterior& rho, double mu,
                                    double ceiling = kDefaultLossCeiling) {
  rho.validate();
  return posterior_loss_factor(rho) * (1.0 + mu * mu) / ceiling;
}

}  // namespace covshift::risk

#endif  // COVSHIFT_WEIGHTED_RISK_HPP
