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

// PAC-Bayes certificates for importance-weighted risks.
//
// Fixed-time bounds:
//   sqrt:          R <= R^ + sqrt((KL + ln(1/delta) + ln t + 2) / (2t - 1))
//   bernoulli_kl:  R <= kl^-1(R^, (KL + ln(2 sqrt(t) / delta)) / t)
//
// Anytime bounds split delta over geometric epochs
// T_k = [t_min b^k, t_min b^(k+1)) with delta_k = delta (b - 1) / b^(k+1),
// then uniformly inside an epoch, and apply the fixed-time bound at the
// per-time budget delta_k / |T_k|.
//
// All logarithms are natural.

#ifndef COVSHIFT_CERTIFICATES_HPP
#define COVSHIFT_CERTIFICATES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "covshift/numeric.hpp"
#include "covshift/weighted_risk.hpp"

namespace covshift::cert {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// KL(N(a, s) || N(m, v)) for scalar Gaussians given by mean and variance.
inline double kl_gaussian(const risk::GaussianPosterior& posterior, const risk::GaussianPosterior& prior) {
  posterior.validate();
  prior.validate();
  const double ratio = posterior.sigma2 / prior.sigma2;
  const double d = posterior.a0 - prior.a0;
  return 0.5 * (ratio + d * d / prior.sigma2 - 1.0 - std::log(ratio));
}

inline void validate_bound_inputs(double kl, std::uint64_t t, double delta) {
  require(t >= 1, "bound: t must be positive");
  require(delta > 0.0 && delta < 1.0, "bound: delta must lie in (0, 1)");
  require(kl >= 0.0, "bound: KL must be nonnegative");
}

inline double sqrt_penalty(double kl, std::uint64_t t, double delta) {
  validate_bound_inputs(kl, t, delta);
  const double td = static_cast<double>(t);
  return std::sqrt((kl + std::log(1.0 / delta) + std::log(td) + 2.0) / (2.0 * td - 1.0));
}

inline double sqrt_bound(double emp_risk, double kl, std::uint64_t t, double delta) {
  return emp_risk + sqrt_penalty(kl, t, delta);
}

/// Bernoulli KL divergence kl(q || p) with 0 ln 0 = 0. Returns +infinity
/// (never NaN) when p sits on a boundary that q does not.
inline double kl_ber(double q, double p) {
  require(q >= 0.0 && q <= 1.0 && p >= 0.0 && p <= 1.0, "kl_ber: arguments must lie in [0, 1]");
  auto term = [](double a, double b) {
    if (a == 0.0) return 0.0;
    if (b == 0.0) return kInfinity;
    return a * std::log(a / b);
  };
  return term(q, p) + term(1.0 - q, 1.0 - p);
}

/// sup{p in [q, 1] : kl(q || p) <= eps}, by bisection. The returned point
/// always satisfies the constraint.
inline double kl_ber_inv_upper(double q, double eps) {
  require(q >= 0.0 && q <= 1.0, "kl_ber_inv_upper: q must lie in [0, 1]");
  require(eps >= 0.0, "kl_ber_inv_upper: eps must be nonnegative");
  if (q == 1.0 || kl_ber(q, 1.0) <= eps) return 1.0;
  if (eps == 0.0) return q;
  double lo = q;
  double hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;  // interval exhausted at double precision
    if (kl_ber(q, mid) <= eps)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

/// Confidence term of the Bernoulli-KL form. Kept in one place so the rate
/// can be swapped without touching callers.
inline double bernoulli_kl_budget(double kl, std::uint64_t t, double delta) {
  validate_bound_inputs(kl, t, delta);
  const double td = static_cast<double>(t);
  return (kl + std::log(2.0 * std::sqrt(td) / delta)) / td;
}

inline double bernoulli_kl_bound(double emp_risk, double kl, std::uint64_t t, double delta) {
  require(emp_risk >= 0.0 && emp_risk <= 1.0, "bernoulli_kl_bound: empirical risk must lie in [0, 1]");
  return kl_ber_inv_upper(emp_risk, bernoulli_kl_budget(kl, t, delta));
}

// ---------------------------------------------------------------------------
// Geometric peeling.

struct PeelingSchedule {
  std::uint64_t t_min = 100;
  double base = 2.0;
  double delta = 0.05;

  void validate() const {
    require(t_min >= 1, "PeelingSchedule: t_min must be positive");
    require(base > 1.0 && std::isfinite(base), "PeelingSchedule: base must exceed 1");
    require(delta > 0.0 && delta < 1.0, "PeelingSchedule: delta must lie in (0, 1)");
  }
};

namespace detail {

/// t_min * b^k as an exact integer when b is integral, otherwise in long
/// double. Saturates instead of overflowing.
inline long double epoch_start(const PeelingSchedule& s, std::uint64_t k) {
  long double v = static_cast<long double>(s.t_min);
  for (std::uint64_t i = 0; i < k; ++i) {
    v *= static_cast<long double>(s.base);
    if (v > 1e30L) return v;
  }
  return v;
}

inline bool integral_base(const PeelingSchedule& s) { return s.base == std::floor(s.base) && s.base < 1e9; }

}  // namespace detail

/// k(t) with t in [t_min b^k, t_min b^(k+1)). Found by stepping k upward,
/// never through a floating-point logarithm.
inline std::uint64_t epoch_index(std::uint64_t t, const PeelingSchedule& s) {
  s.validate();
  if (t < s.t_min) throw std::invalid_argument("epoch_index: t is below t_min");
  std::uint64_t k = 0;
  if (detail::integral_base(s)) {
    const auto b = static_cast<unsigned __int128>(s.base);
    unsigned __int128 next = static_cast<unsigned __int128>(s.t_min) * b;
    while (next <= t) {
      ++k;
      next *= b;
    }
    return k;
  }
  while (detail::epoch_start(s, k + 1) <= static_cast<long double>(t)) ++k;
  return k;
}

struct EpochBudget {
  double delta_k;
  std::uint64_t epoch_size;
};

/// delta_k = delta (b - 1) / b^(k+1) and the number of integers in T_k.
inline EpochBudget epoch_budget(std::uint64_t k, const PeelingSchedule& s) {
  s.validate();
  EpochBudget out;
  out.delta_k = s.delta * (s.base - 1.0) / std::pow(s.base, static_cast<double>(k + 1));
  if (detail::integral_base(s)) {
    const auto b = static_cast<unsigned __int128>(s.base);
    unsigned __int128 lo = s.t_min;
    constexpr auto cap = static_cast<unsigned __int128>(std::numeric_limits<std::uint64_t>::max());
    for (std::uint64_t i = 0; i < k && lo <= cap; ++i) lo *= b;
    // epochs past 2^64 cannot be reached by any t; the size saturates
    out.epoch_size = lo > cap ? std::numeric_limits<std::uint64_t>::max()
                              : static_cast<std::uint64_t>(std::min(lo * b - lo, cap));
  } else {
    const long double lo = detail::epoch_start(s, k);
    const long double hi = lo * static_cast<long double>(s.base);
    const long double size = std::min(std::ceil(hi) - std::ceil(lo), 18446744073709551615.0L);
    out.epoch_size = static_cast<std::uint64_t>(size);
  }
  require(out.epoch_size >= 1, "epoch_budget: empty epoch");
  return out;
}

/// Budget assigned to the single time t: delta_{k(t)} / |T_{k(t)}|.
inline double per_time_budget(std::uint64_t t, const PeelingSchedule& s) {
  const EpochBudget e = epoch_budget(epoch_index(t, s), s);
  return e.delta_k / static_cast<double>(e.epoch_size);
}

// ---------------------------------------------------------------------------
// Bound reports.

enum class BoundMode { sqrt, bernoulli_kl, anytime_sqrt, anytime_bernoulli_kl };

constexpr std::string_view to_string(BoundMode m) noexcept {
  switch (m) {
    case BoundMode::sqrt: return "sqrt";
    case BoundMode::bernoulli_kl: return "bernoulli_kl";
    case BoundMode::anytime_sqrt: return "anytime_sqrt";
    case BoundMode::anytime_bernoulli_kl: return "anytime_bernoulli_kl";
  }
  return "?";
}

struct BoundReport {
  double emp_risk = 0.0;
  double kl = 0.0;
  std::uint64_t t = 1;
  double delta = 0.05;
  BoundMode mode = BoundMode::sqrt;
  double bound = 0.0;
  std::optional<std::uint64_t> epoch;
  std::optional<double> epoch_budget;
};

inline nlohmann::json to_json(const BoundReport& r) {
  nlohmann::json j;
  j["emp_risk"] = r.emp_risk;
  j["kl"] = r.kl;
  j["t"] = r.t;
  j["delta"] = r.delta;
  j["mode"] = std::string(to_string(r.mode));
  j["bound"] = r.bound;
  if (r.epoch) j["epoch"] = *r.epoch;
  if (r.epoch_budget) j["epoch_budget"] = *r.epoch_budget;
  return j;
}

/// Fixed-time certificate. The Bernoulli form needs a risk in [0, 1];
/// larger weighted risks are clamped to 1, which makes that bound vacuous.
inline BoundReport fixed_time_bound(double emp_risk, double kl, std::uint64_t t, double delta, BoundMode mode) {
  require(mode == BoundMode::sqrt || mode == BoundMode::bernoulli_kl, "fixed_time_bound: not a fixed-time mode");
  require(emp_risk >= 0.0, "fixed_time_bound: empirical risk must be nonnegative");
  BoundReport r{emp_risk, kl, t, delta, mode, 0.0, std::nullopt, std::nullopt};
  r.bound = mode == BoundMode::sqrt ? sqrt_bound(emp_risk, kl, t, delta)
                                    : bernoulli_kl_bound(std::min(emp_risk, 1.0), kl, t, delta);
  return r;
}

/// Time-uniform certificate: the fixed-time form at the per-time budget.
/// `mode` selects the underlying form; either the fixed or the anytime tag
/// is accepted.
inline BoundReport anytime_bound(double emp_risk, double kl, std::uint64_t t, const PeelingSchedule& s,
                                 BoundMode mode) {
  s.validate();
  const std::uint64_t k = epoch_index(t, s);
  const EpochBudget e = epoch_budget(k, s);
  const double budget = e.delta_k / static_cast<double>(e.epoch_size);
  const bool sq = mode == BoundMode::sqrt || mode == BoundMode::anytime_sqrt;
  BoundReport r = fixed_time_bound(emp_risk, kl, t, budget, sq ? BoundMode::sqrt : BoundMode::bernoulli_kl);
  r.delta = s.delta;
  r.mode = sq ? BoundMode::anytime_sqrt : BoundMode::anytime_bernoulli_kl;
  r.epoch = k;
  r.epoch_budget = e.delta_k;
  return r;
}

// ---------------------------------------------------------------------------
// Discrete posteriors on a hypothesis grid.

struct DiscretePosterior {
  std::vector<double> grid;
  std::vector<double> mass;

  void validate() const {
    require(grid.size() == mass.size() && !grid.empty(), "DiscretePosterior: grid and mass differ in length");
    CompensatedSum s;
    for (double m : mass) {
      require(m >= 0.0 && std::isfinite(m), "DiscretePosterior: masses must be finite and nonnegative");
      s += m;
    }
    require(std::abs(s.value() - 1.0) <= 1e-12, "DiscretePosterior: masses must sum to one");
  }
};

inline std::vector<double> uniform_grid(double lo, double hi, std::size_t points) {
  require(points >= 2 && hi > lo, "uniform_grid: need at least two points on a nonempty interval");
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i)
    g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  return g;
}

/// The hypothesis grid for slope posteriors: 601 points on [-3, 3].
inline std::vector<double> default_slope_grid() { return uniform_grid(-3.0, 3.0, 601); }

/// Normalizes nonnegative weights on a grid into a posterior.
inline DiscretePosterior normalized(std::vector<double> grid, std::vector<double> weights) {
  require(grid.size() == weights.size(), "normalized: grid and weights differ in length");
  const double total = compensated_sum(weights);
  require(total > 0.0, "normalized: weights must have positive total");
  for (double& w : weights) w /= total;
  return {std::move(grid), std::move(weights)};
}

/// Density of a Gaussian law restricted to the grid, renormalized.
inline DiscretePosterior discretize(const risk::GaussianPosterior& g, std::vector<double> grid) {
  g.validate();
  std::vector<double> logw(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double d = grid[i] - g.a0;
    logw[i] = -0.5 * d * d / g.sigma2;
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  for (double& w : logw) w = std::exp(w - mx);
  return normalized(std::move(grid), std::move(logw));
}

/// mass_i proportional to prior_i exp(-beta risk_i), via log-sum-exp.
/// Grid points without prior mass keep zero mass.
inline DiscretePosterior gibbs_posterior(std::span<const double> grid_risks, const DiscretePosterior& prior,
                                         double beta) {
  require(beta > 0.0 && std::isfinite(beta), "gibbs_posterior: beta must be positive");
  require(grid_risks.size() == prior.mass.size(), "gibbs_posterior: one risk per grid point required");
  std::vector<double> logw(grid_risks.size(), -kInfinity);
  double mx = -kInfinity;
  for (std::size_t i = 0; i < grid_risks.size(); ++i) {
    if (prior.mass[i] > 0.0) {
      logw[i] = std::log(prior.mass[i]) - beta * grid_risks[i];
      mx = std::max(mx, logw[i]);
    }
  }
  require(std::isfinite(mx), "gibbs_posterior: prior has no mass");
  std::vector<double> w(grid_risks.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::isfinite(logw[i]) ? std::exp(logw[i] - mx) : 0.0;
  return normalized(prior.grid, std::move(w));
}

inline void require_same_grid(const DiscretePosterior& p, const DiscretePosterior& q) {
  require(p.grid == q.grid, "posteriors must live on the same grid");
}

/// KL(p || q) on a common grid; +infinity when p is not absolutely
/// continuous with respect to q.
inline double kl_discrete(const DiscretePosterior& p, const DiscretePosterior& q) {
  require_same_grid(p, q);
  CompensatedSum s;
  for (std::size_t i = 0; i < p.mass.size(); ++i) {
    if (p.mass[i] == 0.0) continue;
    if (q.mass[i] == 0.0) return kInfinity;
    s += p.mass[i] * std::log(p.mass[i] / q.mass[i]);
  }
  return std::max(s.value(), 0.0);
}

inline double tv_distance(const DiscretePosterior& p, const DiscretePosterior& q) {
  require_same_grid(p, q);
  CompensatedSum s;
  for (std::size_t i = 0; i < p.mass.size(); ++i) s += std::abs(p.mass[i] - q.mass[i]);
  return std::min(0.5 * s.value(), 1.0);
}

/// Linearized PAC-Bayes objective E_rho[R] + (1 / beta) KL(rho || prior).
inline double gibbs_objective(const DiscretePosterior& rho, std::span<const double> grid_risks,
                              const DiscretePosterior& prior, double beta) {
  require(grid_risks.size() == rho.mass.size(), "gibbs_objective: one risk per grid point required");
  CompensatedSum s;
  for (std::size_t i = 0; i < rho.mass.size(); ++i) s += rho.mass[i] * grid_risks[i];
  return s.value() + kl_discrete(rho, prior) / beta;
}

struct ObjectiveGap {
  double gap;       // J(candidate) - J(gibbs)
  double kl_scaled; // (1 / beta) KL(candidate || gibbs)
};

/// Both sides of J(rho) - J(rho*) = (1 / beta) KL(rho || rho*).
inline ObjectiveGap gibbs_objective_gap(const DiscretePosterior& candidate, const DiscretePosterior& gibbs,
                                        double beta, std::span<const double> grid_risks,
                                        const DiscretePosterior& prior) {
  require(beta > 0.0, "gibbs_objective_gap: beta must be positive");
  require_same_grid(candidate, gibbs);
  for (std::size_t i = 0; i < candidate.mass.size(); ++i)
    if (candidate.mass[i] > 0.0 && gibbs.mass[i] == 0.0)
      throw std::invalid_argument("gibbs_objective_gap: candidate is not absolutely continuous w.r.t. the Gibbs posterior");
  ObjectiveGap g;
  g.gap = gibbs_objective(candidate, grid_risks, prior, beta) - gibbs_objective(gibbs, grid_risks, prior, beta);
  g.kl_scaled = kl_discrete(candidate, gibbs) / beta;
  return g;
}

}  // namespace covshift::cert

#endif  // COVSHIFT_CERTIFICATES_HPP
