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

#ifndef COVSHIFT_DIAGNOSTICS_HPP
#define COVSHIFT_DIAGNOSTICS_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "covshift/gaussian_shift.hpp"
#include "covshift/numeric.hpp"
#include "covshift/ratio_net.hpp"

namespace covshift::diag {

using WeightVector = std::vector<double>;

struct EssResult {
  double ess_abs;
  double ess_fraction;
};

struct DiagnosticsReport {
  double mean = 0.0;
  double second_moment = 0.0;
  double ess_abs = 0.0;
  double ess_fraction = 0.0;
  std::size_t count = 0;
};

inline void validate_weights(std::span<const double> w) {
  for (double x : w)
    if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument("weights must be finite and nonnegative");
}

/// Mean, second moment and ESS in one compensated pass.
inline DiagnosticsReport diagnostics(std::span<const double> w) {
  require(!w.empty(), "diagnostics: empty weight vector");
  validate_weights(w);
  const double top = *std::max_element(w.begin(), w.end());
  if (!(top > 0.0)) throw std::invalid_argument("diagnostics: all weights are zero");
  CompensatedSum s1, s2, u1, u2;
  for (double x : w) {
    s1 += x;
    s2 += x * x;
    u1 += x / top;
    u2 += (x / top) * (x / top);
  }
  DiagnosticsReport r;
  r.count = w.size();
  r.mean = s1.value() / static_cast<double>(w.size());
  r.second_moment = s2.value() / static_cast<double>(w.size());
  // ESS is scale free; the sums of w / max(w) cannot overflow.
  r.ess_abs = u1.value() * (u1.value() / u2.value());
  r.ess_fraction = r.ess_abs / static_cast<double>(w.size());
  return r;
}

inline EssResult ess(std::span<const double> w) {
  const DiagnosticsReport r = diagnostics(w);
  return {r.ess_abs, r.ess_fraction};
}

inline double second_moment(std::span<const double> w) {
  require(!w.empty(), "second_moment: empty weight vector");
  CompensatedSum s;
  for (double x : w) s += x * x;
  return s.value() / static_cast<double>(w.size());
}

/// Root of the Monte Carlo estimate of E_Q[(r - r*)^2] over `q_batch`.
inline double l2q_error(std::span<const double> ratio, double mu, std::span<const double> q_batch) {
  require(ratio.size() == q_batch.size() && !q_batch.empty(), "l2q_error: length mismatch");
  CompensatedSum s;
  for (std::size_t i = 0; i < q_batch.size(); ++i) {
    const double d = ratio[i] - lab::true_ratio(q_batch[i], mu);
    s += d * d;
  }
  return std::sqrt(s.value() / static_cast<double>(q_batch.size()));
}

inline double l2q_error(const net::RatioModel& model, double mu, std::span<const double> q_batch) {
  const std::vector<double> r = net::evaluate(model, q_batch);
  return l2q_error(r, mu, q_batch);
}

}  // namespace covshift::diag

#endif  // COVSHIFT_DIAGNOSTICS_HPP
