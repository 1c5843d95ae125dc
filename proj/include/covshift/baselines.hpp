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

// Classical direct ratio estimators: uLSIF, KLIEP and the inverse odds of a
// logistic discriminator. Inputs are one-dimensional samples.

#ifndef COVSHIFT_BASELINES_HPP
#define COVSHIFT_BASELINES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "covshift/numeric.hpp"
#include "covshift/rng.hpp"

namespace covshift::baselines {

struct Bandwidth {
  double value = 1.0;
  bool fallback = false;  // all sampled points coincided
};

/// Median pairwise distance over at most `cap` points, taken with an even
/// stride so the result does not depend on an RNG.
inline Bandwidth median_bandwidth(std::span<const double> batch, std::size_t cap = 1000) {
  require(batch.size() >= 2, "median_bandwidth: need at least two points");
  require(cap >= 2, "median_bandwidth: cap must be at least two");
  std::vector<double> pts;
  if (batch.size() <= cap) {
    pts.assign(batch.begin(), batch.end());
  } else {
    pts.reserve(cap);
    for (std::size_t i = 0; i < cap; ++i) pts.push_back(batch[i * batch.size() / cap]);
  }
  std::vector<double> d;
  d.reserve(pts.size() * (pts.size() - 1) / 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) d.push_back(std::abs(pts[i] - pts[j]));
  const double m = median(d);
  if (!(m > 0.0) || !std::isfinite(m)) return {1.0, true};
  return {m, false};
}

/// `count` distinct points of `batch`, drawn without replacement.
inline std::vector<double> select_centers(std::span<const double> batch, std::size_t count, std::uint64_t seed) {
  require(count >= 1, "select_centers: count must be positive");
  count = std::min(count, batch.size());
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = batch[idx[i]];
  return out;
}

/// r(z) = sum_j alpha_j exp(-(z - c_j)^2 / (2 sigma^2)).
struct KernelModel {
  std::vector<double> centers;
  double bandwidth = 1.0;
  Eigen::VectorXd alpha;
  bool nonneg_clip = false;

  void validate() const {
    require(!centers.empty(), "KernelModel: centers must be nonempty");
    require(bandwidth > 0.0 && std::isfinite(bandwidth), "KernelModel: bandwidth must be positive");
    require(static_cast<std::size_t>(alpha.size()) == centers.size(), "KernelModel: one coefficient per center");
  }

  double operator()(double z) const {
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    double s = 0.0;
    for (std::size_t j = 0; j < centers.size(); ++j) {
      const double d = z - centers[j];
      s += alpha[static_cast<Eigen::Index>(j)] * std::exp(-d * d * inv);
    }
    return nonneg_clip ? std::max(s, 0.0) : s;
  }

  std::vector<double> evaluate(std::span<const double> z) const {
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = (*this)(z[i]);
    return out;
  }
};

/// Row i holds the basis functions at z_i.
inline Eigen::MatrixXd design_matrix(std::span<const double> z, std::span<const double> centers, double bandwidth) {
  Eigen::MatrixXd phi(static_cast<Eigen::Index>(z.size()), static_cast<Eigen::Index>(centers.size()));
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  for (std::size_t j = 0; j < centers.size(); ++j)
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double d = z[i] - centers[j];
      phi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::exp(-d * d * inv);
    }
  return phi;
}

// ---------------------------------------------------------------------------
// uLSIF

struct UlsifFit {
  KernelModel model;
  Eigen::MatrixXd H;  // mean over Q of phi phi^T
  Eigen::VectorXd h;  // mean over P of phi
  double lambda_reg = 0.0;

  /// ||(H + lambda I) alpha - h||.
  double normal_equation_residual() const {
    const Eigen::VectorXd r = H * model.alpha + lambda_reg * model.alpha - h;
    return r.norm();
  }

  /// 0.5 a^T H a - h^T a + (lambda / 2) ||a||^2.
  double objective(const Eigen::VectorXd& a) const {
    return 0.5 * a.dot(H * a) - h.dot(a) + 0.5 * lambda_reg * a.squaredNorm();
  }
};

inline UlsifFit fit_ulsif(std::span<const double> q_batch, std::span<const double> p_batch,
                          std::vector<double> centers, double bandwidth, double lambda_reg) {
  require(lambda_reg > 0.0, "fit_ulsif: lambda_reg must be positive");
  require(!q_batch.empty() && !p_batch.empty(), "fit_ulsif: empty batch");
  UlsifFit fit;
  fit.lambda_reg = lambda_reg;
  const Eigen::MatrixXd phi_q = design_matrix(q_batch, centers, bandwidth);
  const Eigen::MatrixXd phi_p = design_matrix(p_batch, centers, bandwidth);
  fit.H = (phi_q.transpose() * phi_q) / static_cast<double>(q_batch.size());
  fit.h = phi_p.colwise().mean().transpose();
  Eigen::MatrixXd A = fit.H;
  A.diagonal().array() += lambda_reg;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  Eigen::VectorXd alpha = ldlt.solve(fit.h);
  // one step of iterative refinement
  alpha += ldlt.solve(fit.h - A * alpha);
  fit.model = KernelModel{std::move(centers), bandwidth, std::move(alpha), true};
  fit.model.validate();
  return fit;
}

// ---------------------------------------------------------------------------
// KLIEP

struct KliepFit {
  KernelModel model;
  double objective = 0.0;  // mean over P of ln r
  int iterations = 0;
  bool restarted = false;  // alpha hit zero after projection
  std::vector<double> objective_trace;
};

namespace detail {

inline double mean_log(const Eigen::VectorXd& v) {
  if ((v.array() <= 0.0).any()) return -std::numeric_limits<double>::infinity();
  return v.array().log().mean();
}

}  // namespace detail

/// Projected gradient ascent on mean_P[ln r] subject to mean_Q[r] = 1 and
/// alpha >= 0. Each step projects onto the constraint hyperplane, clips at
/// zero and rescales; a step is accepted only if the objective does not
/// decrease.
inline KliepFit fit_kliep(std::span<const double> q_batch, std::span<const double> p_batch,
                          std::vector<double> centers, double bandwidth, int max_iters) {
  require(max_iters >= 1, "fit_kliep: max_iters must be positive");
  require(!q_batch.empty() && !p_batch.empty(), "fit_kliep: empty batch");
  const Eigen::MatrixXd A = design_matrix(p_batch, centers, bandwidth);
  const Eigen::VectorXd b = design_matrix(q_batch, centers, bandwidth).colwise().mean().transpose();
  const auto nb = b.size();
  require((b.array() > 0.0).all(), "fit_kliep: a center has no support under Q");

  KliepFit fit;
  auto uniform = [&] { return Eigen::VectorXd(Eigen::VectorXd::Constant(nb, 1.0 / b.sum())); };
  const double bb = b.squaredNorm();
  auto project = [&](Eigen::VectorXd a) -> Eigen::VectorXd {
    a += ((1.0 - b.dot(a)) / bb) * b;  // orthogonal projection onto b^T a = 1
    a = a.cwiseMax(0.0);
    const double s = b.dot(a);
    if (!(s > 0.0)) {
      fit.restarted = true;
      return uniform();
    }
    return a / s;
  };

  Eigen::VectorXd alpha = uniform();
  Eigen::VectorXd r_p = A * alpha;
  double f = detail::mean_log(r_p);
  double step = 1e-3;
  fit.objective_trace.push_back(f);
  for (int it = 0; it < max_iters; ++it) {
    const Eigen::VectorXd grad = A.transpose() * r_p.cwiseInverse() / static_cast<double>(p_batch.size());
    bool accepted = false;
    for (int bt = 0; bt < 40; ++bt) {
      Eigen::VectorXd cand = project(alpha + step * grad);
      Eigen::VectorXd r_cand = A * cand;
      const double fc = detail::mean_log(r_cand);
      if (fc >= f) {
        alpha = std::move(cand);
        r_p = std::move(r_cand);
        f = fc;
        accepted = true;
        step *= 1.5;
        break;
      }
      step *= 0.5;
    }
    fit.iterations = it + 1;
    fit.objective_trace.push_back(f);
    if (!accepted) break;
  }
  // exact rescale onto the constraint
  alpha /= b.dot(alpha);
  fit.objective = detail::mean_log(A * alpha);
  fit.model = KernelModel{std::move(centers), bandwidth, std::move(alpha), false};
  fit.model.validate();
  return fit;
}

// ---------------------------------------------------------------------------
// Logistic discriminator

struct LogisticModel {
  Eigen::VectorXd weights;  // one slope per feature
  double intercept = 0.0;
  std::size_t n_q = 0;
  std::size_t n_p = 0;
  int iterations = 0;
  bool converged = false;
  bool large_weights = false;  // ||w|| > 1e3
  Eigen::VectorXd standard_errors;  // intercept first, then slopes

  double logit(double z) const { return intercept + weights[0] * z; }
};

/// Regularized logistic regression of "came from P" on [1, z] by Newton's
/// method with step halving. The intercept is not penalized.
inline LogisticModel fit_discriminator(std::span<const double> q_batch, std::span<const double> p_batch,
                                       double l2_reg, int max_iters) {
  require(!q_batch.empty() && !p_batch.empty(), "fit_discriminator: both batches must be nonempty");
  require(l2_reg >= 0.0 && max_iters >= 1, "fit_discriminator: invalid settings");
  const std::size_t n = q_batch.size() + p_batch.size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), 2);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < q_batch.size(); ++i) {
    X(static_cast<Eigen::Index>(i), 0) = 1.0;
    X(static_cast<Eigen::Index>(i), 1) = q_batch[i];
    y[static_cast<Eigen::Index>(i)] = 0.0;
  }
  for (std::size_t i = 0; i < p_batch.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(q_batch.size() + i);
    X(k, 0) = 1.0;
    X(k, 1) = p_batch[i];
    y[k] = 1.0;
  }
  Eigen::Vector2d reg(0.0, l2_reg);
  const double nd = static_cast<double>(n);

  // mean negative log-likelihood + (l2 / 2) ||w||^2
  auto loss = [&](const Eigen::Vector2d& th) {
    const Eigen::VectorXd eta = X * th;
    double s = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double e = eta[i];
      const double sp = e > 0.0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
      s += sp - y[i] * e;
    }
    return s / nd + 0.5 * th.cwiseProduct(reg).dot(th);
  };
  auto sigmoid = [](double e) { return e >= 0.0 ? 1.0 / (1.0 + std::exp(-e)) : std::exp(e) / (1.0 + std::exp(e)); };

  Eigen::Vector2d theta(std::log(static_cast<double>(p_batch.size()) / static_cast<double>(q_batch.size())), 0.0);
  LogisticModel m;
  m.n_q = q_batch.size();
  m.n_p = p_batch.size();
  Eigen::Matrix2d hess;
  double f = loss(theta);
  for (int it = 0; it < max_iters; ++it) {
    const Eigen::VectorXd eta = X * theta;
    Eigen::VectorXd p(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      p[i] = sigmoid(eta[i]);
      w[i] = p[i] * (1.0 - p[i]);
    }
    const Eigen::Vector2d grad = X.transpose() * (p - y) / nd + reg.cwiseProduct(theta);
    hess = X.transpose() * w.asDiagonal() * X / nd;
    hess.diagonal() += reg;
    m.iterations = it;
    if (grad.norm() <= 1e-8) {
      m.converged = true;
      break;
    }
    const Eigen::Vector2d dir = hess.ldlt().solve(grad);
    double t = 1.0;
    Eigen::Vector2d cand = theta - dir;
    double fc = loss(cand);
    while (fc > f && t > 1e-10) {
      t *= 0.5;
      cand = theta - t * dir;
      fc = loss(cand);
    }
    theta = cand;
    f = fc;
    m.iterations = it + 1;
  }
  m.intercept = theta[0];
  m.weights = Eigen::VectorXd::Constant(1, theta[1]);
  m.large_weights = m.weights.norm() > 1e3;
  // asymptotic standard errors from the inverse observed information
  const Eigen::Matrix2d cov = (hess * nd).inverse();
  m.standard_errors = cov.diagonal().cwiseSqrt();
  return m;
}

/// Target probability under the fitted discriminator.
inline double predict_target_probability(const LogisticModel& m, double z) {
  const double e = m.logit(z);
  return e >= 0.0 ? 1.0 / (1.0 + std::exp(-e)) : std::exp(e) / (1.0 + std::exp(e));
}

/// (n_q / n_p) p / (1 - p), computed from the logit and clipped to
/// [floor, 1e6].
inline double ratio_from_discriminator(const LogisticModel& m, double z, double floor = 1e-6) {
  require(m.n_q > 0 && m.n_p > 0, "ratio_from_discriminator: model is not fitted");
  const double log_r =
      std::log(static_cast<double>(m.n_q)) - std::log(static_cast<double>(m.n_p)) + m.logit(z);
  return std::clamp(std::exp(std::min(log_r, 50.0)), floor, 1e6);
}

inline std::vector<double> ratio_from_discriminator(const LogisticModel& m, std::span<const double> z,
                                                    double floor = 1e-6) {
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = ratio_from_discriminator(m, z[i], floor);
  return out;
}

}  // namespace covshift::baselines

#endif  // COVSHIFT_BASELINES_HPP
