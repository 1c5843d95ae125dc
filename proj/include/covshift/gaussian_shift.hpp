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

// One-dimensional Gaussian mean-shift laboratory: source Q = N(0, 1),
// target P = N(mu, 1), the closed-form ratio dP/dQ and its population
// reference values.

#ifndef COVSHIFT_GAUSSIAN_SHIFT_HPP
#define COVSHIFT_GAUSSIAN_SHIFT_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "covshift/numeric.hpp"
#include "covshift/rng.hpp"

namespace covshift::lab {

enum class Law { source, target };

constexpr std::string_view to_string(Law law) noexcept {
  return law == Law::source ? "source" : "target";
}

struct ShiftConfig {
  double mu = 0.5;
  std::size_t n_q = 10000;
  std::size_t n_p = 10000;
  std::uint64_t seed = 0;

  void validate() const {
    require(std::isfinite(mu), "ShiftConfig: mu must be finite");
    require(n_q >= 1 && n_p >= 1, "ShiftConfig: sample counts must be positive");
  }
};

struct SampleBatch {
  std::vector<double> values;
  Law law = Law::source;
  std::uint64_t seed_used = 0;

  std::size_t size() const noexcept { return values.size(); }
  std::span<const double> view() const noexcept { return values; }
};

struct IdentityTable {
  double norm = 1.0;
  double second_moment = 1.0;
  double first_moment_transport = 0.0;
  double second_moment_transport = 1.0;
  double ess_fraction = 1.0;
};

struct RatioValue {
  double value;
  bool saturated;
};

/// r*(z) = exp(mu z - mu^2 / 2). Saturates at the largest finite double
/// instead of overflowing; `saturated` reports when that happened.
inline RatioValue true_ratio_checked(double z, double mu) noexcept {
  const double log_r = mu * z - 0.5 * mu * mu;
  constexpr double kMaxLog = 709.782712893384;  // log(DBL_MAX)
  if (!(log_r < kMaxLog)) return {std::numeric_limits<double>::max(), true};
  return {std::exp(log_r), false};
}

inline double true_ratio(double z, double mu) noexcept { return true_ratio_checked(z, mu).value; }

inline std::vector<double> true_ratio(std::span<const double> zs, double mu) {
  std::vector<double> out;
  out.reserve(zs.size());
  for (double z : zs) out.push_back(true_ratio(z, mu));
  return out;
}

inline IdentityTable analytic_identities(double mu) {
  require(std::isfinite(mu), "analytic_identities: mu must be finite");
  IdentityTable t;
  t.norm = 1.0;
  t.second_moment = std::exp(mu * mu);
  t.first_moment_transport = mu;
  t.second_moment_transport = 1.0 + mu * mu;
  t.ess_fraction = std::exp(-mu * mu);
  return t;
}

/// Seed actually used for a batch: the config seed combined with the law so
/// source and target draws are independent streams.
inline std::uint64_t batch_seed(std::uint64_t seed, Law law) noexcept {
  return derive_seed(seed, {tag_hash(to_string(law))});
}

inline SampleBatch sample(const ShiftConfig& config, Law law, std::size_t count) {
  config.validate();
  SampleBatch batch;
  batch.law = law;
  batch.seed_used = batch_seed(config.seed, law);
  Rng rng(batch.seed_used);
  const double mean = law == Law::source ? 0.0 : config.mu;
  batch.values.resize(count);
  for (double& v : batch.values) v = rng.normal(mean, 1.0);
  return batch;
}

inline SampleBatch sample(const ShiftConfig& config, Law law) {
  return sample(config, law, law == Law::source ? config.n_q : config.n_p);
}

/// Standard errors of the Q-sample averages of r*, r* z and r* z^2.
struct IdentitySigmas {
  double norm;
  double first_moment_transport;
  double second_moment_transport;
};

/// Uses E_Q[r*^2 g(z)] = e^{mu^2} E_{N(2 mu, 1)}[g(z)].
inline IdentitySigmas identity_sigmas(double mu, std::size_t n) {
  require(n >= 1, "identity_sigmas: n must be positive");
  const double e = std::exp(mu * mu);
  const double m2 = mu * mu;
  const double nd = static_cast<double>(n);
  IdentitySigmas s;
  s.norm = std::sqrt((e - 1.0) / nd);
  s.first_moment_transport = std::sqrt((e * (1.0 + 4.0 * m2) - m2) / nd);
  s.second_moment_transport = std::sqrt((e * (16.0 * m2 * m2 + 24.0 * m2 + 3.0) - (1.0 + m2) * (1.0 + m2)) / nd);
  return s;
}

/// Target risk of h_a(z) = a z under squared loss: (1 - a)^2 (1 + mu^2).
inline double target_risk(double a, double mu) noexcept {
  return (1.0 - a) * (1.0 - a) * (1.0 + mu * mu);
}

/// Monte Carlo standard error of the squared-loss risk at sample size n.
inline double sigma_mc(double a, double mu, std::size_t n) {
  require(n >= 1, "sigma_mc: n must be positive");
  return (1.0 - a) * (1.0 - a) * std::sqrt((2.0 + 4.0 * mu * mu) / static_cast<double>(n));
}

}  // namespace covshift::lab

#endif  // COVSHIFT_GAUSSIAN_SHIFT_HPP
