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

// LSIF fitting with augmented-Lagrangian integral constraints.
//
// The objective minimized by the primal step is
//
//   L_AL = J_fit + lambda g0 + rho0/2 g0^2 + sum_j (mu_j g_j + rho/2 g_j^2),
//   J_fit = 1/2 mean_Q[t(r)^2] - mean_P[t(r)],
//   g0    = mean_Q[s(r)] - 1,
//   g_j   = mean_Q[s(r) phi_j] - mean_P[phi_j],
//
// where t is the tempering map (identity unless tempering is active) and s
// is the clipping map (identity unless clipping is active). Tempering never
// enters the constraints and clipping never enters the fit term.
//
// rho0 and rho are quadratic penalties; eta_norm and eta_mm are the dual
// ascent steps. They are separate knobs even though some presentations use
// one symbol for both.

#ifndef COVSHIFT_CONSTRAINTS_HPP
#define COVSHIFT_CONSTRAINTS_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "covshift/diagnostics.hpp"
#include "covshift/gaussian_shift.hpp"
#include "covshift/numeric.hpp"
#include "covshift/ratio_net.hpp"
#include "covshift/rng.hpp"

namespace covshift::al {

using TestFunction = std::function<double(double)>;

/// phi_1(z) = z, phi_2(z) = z^2.
inline std::vector<TestFunction> default_test_functions() {
  return {[](double z) { return z; }, [](double z) { return z * z; }};
}

enum class ConstraintMode { none, norm, norm_moments };

constexpr std::string_view to_string(ConstraintMode m) noexcept {
  switch (m) {
    case ConstraintMode::none: return "none";
    case ConstraintMode::norm: return "norm";
    case ConstraintMode::norm_moments: return "norm+moments";
  }
  return "?";
}

inline ConstraintMode parse_constraint_mode(std::string_view s) {
  if (s == "none") return ConstraintMode::none;
  if (s == "norm") return ConstraintMode::norm;
  if (s == "norm+moments" || s == "norm_moments") return ConstraintMode::norm_moments;
  throw std::invalid_argument("unknown constraint mode: " + std::string(s));
}

struct TailMode {
  enum class Kind { raw, clip, temper };
  Kind kind = Kind::raw;
  double clip_at = 0.0;  // c, when clipping
  double beta = 1.0;     // exponent, when tempering

  static TailMode raw() { return {}; }
  static TailMode clip(double c) { return {Kind::clip, c, 1.0}; }
  static TailMode temper(double beta) { return {Kind::temper, 0.0, beta}; }

  void validate() const {
    if (kind == Kind::clip) require(clip_at > 0.0, "TailMode: clipping threshold must be positive");
    if (kind == Kind::temper) require(beta > 0.0 && beta <= 1.0, "TailMode: tempering exponent must be in (0, 1]");
  }
};

inline std::string to_string(const TailMode& t) {
  switch (t.kind) {
    case TailMode::Kind::raw: return "raw";
    case TailMode::Kind::clip: return "clip(" + std::to_string(t.clip_at) + ")";
    case TailMode::Kind::temper: return "temper(" + std::to_string(t.beta) + ")";
  }
  return "?";
}

struct DualState {
  double lambda = 0.0;
  std::vector<double> mus;
  double rho0 = 1.0;
  double rhos = 1.0;
  double eta_norm = 1e-1;
  double eta_mm = 5e-3;
  double cap = 1e6;
  bool diverged = false;

  static DualState with_moments(std::size_t m) {
    DualState d;
    d.mus.assign(m, 0.0);
    return d;
  }
};

struct ConstraintResiduals {
  double g0 = 0.0;
  std::vector<double> g;
};

// ---------------------------------------------------------------------------
// Weight transforms.

inline diag::WeightVector posthoc_normalize(std::span<const double> w) {
  const double m = w.empty() ? 0.0 : mean(w);
  if (!(m > 0.0)) throw std::invalid_argument("posthoc_normalize: weights must have positive mean");
  diag::WeightVector out(w.begin(), w.end());
  for (double& x : out) x /= m;
  return out;
}

inline diag::WeightVector clip_weights(std::span<const double> w, double c) {
  require(c > 0.0, "clip_weights: threshold must be positive");
  diag::WeightVector out(w.begin(), w.end());
  for (double& x : out) x = std::min(x, c);
  return out;
}

inline diag::WeightVector temper_weights(std::span<const double> w, double beta) {
  require(beta > 0.0 && beta <= 1.0, "temper_weights: exponent must be in (0, 1]");
  diag::WeightVector out(w.begin(), w.end());
  for (double& x : out) {
    require(x >= 0.0, "temper_weights: weights must be nonnegative");
    x = std::pow(x, beta);
  }
  return out;
}

/// The ratio that is actually deployed after training: raw or clipped.
/// Tempering is a training-time device and is never deployed.
inline diag::WeightVector deployed_weights(std::span<const double> raw, const TailMode& tail) {
  if (tail.kind == TailMode::Kind::clip) return clip_weights(raw, tail.clip_at);
  return {raw.begin(), raw.end()};
}

// ---------------------------------------------------------------------------
// Fit data and objective terms.

/// Source and target samples with the test functions pre-evaluated.
struct FitData {
  std::vector<double> q;
  std::vector<double> p;
  std::vector<TestFunction> test_fns;
  Eigen::MatrixXd phi_q;               // m x n_q
  std::vector<double> target_moments;  // mean_P[phi_j]

  FitData() = default;
  FitData(std::vector<double> q_batch, std::vector<double> p_batch,
          std::vector<TestFunction> fns = default_test_functions())
      : q(std::move(q_batch)), p(std::move(p_batch)), test_fns(std::move(fns)) {
    require(!q.empty() && !p.empty(), "FitData: both batches must be nonempty");
    const auto m = static_cast<Eigen::Index>(test_fns.size());
    phi_q.resize(m, static_cast<Eigen::Index>(q.size()));
    target_moments.assign(test_fns.size(), 0.0);
    for (Eigen::Index j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < q.size(); ++i) phi_q(j, static_cast<Eigen::Index>(i)) = test_fns[j](q[i]);
      CompensatedSum s;
      for (double z : p) s += test_fns[j](z);
      target_moments[j] = s.value() / static_cast<double>(p.size());
    }
  }

  std::size_t moments() const { return test_fns.size(); }
};

/// Objective value, residuals, and d(objective)/d(r) at every sample.
struct ObjectiveTerms {
  double lsif = 0.0;
  double value = 0.0;
  ConstraintResiduals residuals;
  std::vector<double> upstream_q;
  std::vector<double> upstream_p;
};

/// Evaluates the augmented Lagrangian given network outputs on both
/// batches. `duals == nullptr` evaluates the bare LSIF objective; the
/// residuals are still computed.
inline ObjectiveTerms objective_terms(std::span<const double> r_q, std::span<const double> r_p,
                                      const FitData& data, ConstraintMode mode, const TailMode& tail,
                                      const DualState* duals) {
  const std::size_t nq = r_q.size();
  const std::size_t np = r_p.size();
  require(nq == data.q.size() && np == data.p.size(), "objective_terms: ratio length mismatch");
  const double inv_q = 1.0 / static_cast<double>(nq);
  const double inv_p = 1.0 / static_cast<double>(np);
  const std::size_t m = data.moments();
  const bool temper = tail.kind == TailMode::Kind::temper;
  const bool clip = tail.kind == TailMode::Kind::clip;

  ObjectiveTerms out;
  out.upstream_q.resize(nq);
  out.upstream_p.resize(np);

  CompensatedSum fit_q, fit_p, norm;
  std::vector<CompensatedSum> mom(m);
  for (std::size_t i = 0; i < nq; ++i) {
    const double r = r_q[i];
    const double t = temper ? std::pow(r, tail.beta) : r;
    fit_q += t * t;
    // d(1/2 t^2)/dr = t dt/dr, with dt/dr = beta r^(beta - 1) = beta t / r.
    out.upstream_q[i] = (temper ? tail.beta * t * t / r : r) * inv_q;
    const double s = clip ? std::min(r, tail.clip_at) : r;
    norm += s;
    for (std::size_t j = 0; j < m; ++j) mom[j] += s * data.phi_q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
  }
  for (std::size_t i = 0; i < np; ++i) {
    const double r = r_p[i];
    const double t = temper ? std::pow(r, tail.beta) : r;
    fit_p += t;
    out.upstream_p[i] = -(temper ? tail.beta * t / r : 1.0) * inv_p;
  }
  out.lsif = 0.5 * fit_q.value() * inv_q - fit_p.value() * inv_p;
  out.residuals.g0 = norm.value() * inv_q - 1.0;
  out.residuals.g.resize(m);
  for (std::size_t j = 0; j < m; ++j) out.residuals.g[j] = mom[j].value() * inv_q - data.target_moments[j];
  out.value = out.lsif;

  if (duals == nullptr || mode == ConstraintMode::none) return out;

  const double g0 = out.residuals.g0;
  const double coef0 = duals->lambda + duals->rho0 * g0;  // effective multiplier
  out.value += duals->lambda * g0 + 0.5 * duals->rho0 * g0 * g0;
  std::vector<double> coef(m, 0.0);
  if (mode == ConstraintMode::norm_moments) {
    require(duals->mus.size() == m, "objective_terms: dual count does not match test functions");
    for (std::size_t j = 0; j < m; ++j) {
      const double gj = out.residuals.g[j];
      coef[j] = duals->mus[j] + duals->rhos * gj;
      out.value += duals->mus[j] * gj + 0.5 * duals->rhos * gj * gj;
    }
  }
  for (std::size_t i = 0; i < nq; ++i) {
    if (clip && r_q[i] >= tail.clip_at) continue;  // flat branch of min(r, c)
    double c = coef0;
    for (std::size_t j = 0; j < m; ++j) c += coef[j] * data.phi_q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
    out.upstream_q[i] += c * inv_q;
  }
  return out;
}

struct ValueAndGrad {
  double value;
  Eigen::VectorXd grad;
};

namespace detail {

inline ValueAndGrad value_and_grad(const net::RatioModel& model, const FitData& data, ConstraintMode mode,
                                   const TailMode& tail, const DualState* duals) {
  const auto pq = net::forward<double>(model, net::as_batch<double>(data.q));
  const auto pp = net::forward<double>(model, net::as_batch<double>(data.p));
  const ObjectiveTerms terms = objective_terms(pq.ratio, pp.ratio, data, mode, tail, duals);
  Eigen::VectorXd g = net::backward(model, pq, terms.upstream_q) + net::backward(model, pp, terms.upstream_p);
  return {terms.value, std::move(g)};
}

}  // namespace detail

/// Empirical LSIF objective 1/2 mean_Q[r^2] - mean_P[r] and its gradient.
inline ValueAndGrad lsif_value_and_grad(const net::RatioModel& model, const FitData& data) {
  return detail::value_and_grad(model, data, ConstraintMode::none, TailMode::raw(), nullptr);
}

inline ConstraintResiduals residuals(std::span<const double> r_q, const FitData& data) {
  require(r_q.size() == data.q.size(), "residuals: ratio length mismatch");
  ConstraintResiduals res;
  res.g0 = mean(r_q) - 1.0;
  res.g.resize(data.moments());
  for (std::size_t j = 0; j < data.moments(); ++j) {
    CompensatedSum s;
    for (std::size_t i = 0; i < r_q.size(); ++i)
      s += r_q[i] * data.phi_q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
    res.g[j] = s.value() / static_cast<double>(r_q.size()) - data.target_moments[j];
  }
  return res;
}

inline ConstraintResiduals residuals(const net::RatioModel& model, const FitData& data) {
  return residuals(net::evaluate(model, data.q), data);
}

/// Augmented Lagrangian value and gradient. Which constraint terms are
/// active follows `mode`.
inline ValueAndGrad al_value_and_grad(const net::RatioModel& model, const DualState& duals, const FitData& data,
                                      ConstraintMode mode, const TailMode& tail = TailMode::raw()) {
  return detail::value_and_grad(model, data, mode, tail, &duals);
}

/// One dual ascent step: lambda += eta_norm g0, mu_j += eta_mm g_j.
/// Only the multipliers of active constraints move.
inline DualState dual_update(DualState duals, const ConstraintResiduals& res,
                             ConstraintMode mode = ConstraintMode::norm_moments) {
  require(std::isfinite(res.g0), "dual_update: non-finite residual");
  for (double g : res.g) require(std::isfinite(g), "dual_update: non-finite residual");
  if (mode == ConstraintMode::none) return duals;
  duals.lambda += duals.eta_norm * res.g0;
  if (mode == ConstraintMode::norm_moments) {
    require(duals.mus.size() == res.g.size(), "dual_update: dual count does not match residuals");
    for (std::size_t j = 0; j < res.g.size(); ++j) duals.mus[j] += duals.eta_mm * res.g[j];
  }
  bool over = std::abs(duals.lambda) > duals.cap;
  for (double m : duals.mus) over = over || std::abs(m) > duals.cap;
  if (over) duals.diverged = true;
  return duals;
}

// ---------------------------------------------------------------------------
// Training.

enum class Precision { float32, float64 };

struct TrainConfig {
  lab::ShiftConfig shift;
  std::size_t steps = 2000;
  ConstraintMode constraint_mode = ConstraintMode::none;
  TailMode tail = TailMode::raw();
  std::vector<int> layer_sizes = {1, 64, 64, 1};
  double floor = 1e-3;
  double lr = 1e-3;
  double eta_norm = 1e-1;
  double eta_mm = 5e-3;
  double rho0 = 1.0;
  double rhos = 1.0;
  double dual_cap = 1e6;
  std::size_t batch_size = 0;  // 0 means full batch
  std::optional<std::uint64_t> init_seed;
  std::size_t l2q_every = 0;   // 0 disables the L2(Q) probe in the trace
  Precision precision = Precision::float32;

  void validate() const {
    shift.validate();
    tail.validate();
    require(steps >= 1, "TrainConfig: steps must be positive");
    require(lr > 0.0 && eta_norm > 0.0 && eta_mm > 0.0, "TrainConfig: step sizes must be positive");
    require(rho0 > 0.0 && rhos > 0.0, "TrainConfig: penalties must be positive");
  }
};

struct TraceRecord {
  std::size_t step = 0;
  double lsif = 0.0;
  ConstraintResiduals residuals;
  double lambda = 0.0;
  std::vector<double> mus;
  std::optional<double> l2q;
};

using TrainTrace = std::vector<TraceRecord>;

enum class TrainStatus { ok, diverged };

struct TrainResult {
  net::RatioModel model;
  DualState duals;
  TrainTrace trace;
  TrainStatus status = TrainStatus::ok;
};

/// Batches used by train(): the source and target draws of the shift
/// config, plus an independent source draw for held-out evaluation.
inline FitData training_data(const lab::ShiftConfig& shift) {
  return FitData(lab::sample(shift, lab::Law::source).values, lab::sample(shift, lab::Law::target).values);
}

inline std::vector<double> evaluation_batch(const lab::ShiftConfig& shift) {
  lab::ShiftConfig eval = shift;
  eval.seed = derive_seed(shift.seed, {tag_hash("evaluation")});
  return lab::sample(eval, lab::Law::source).values;
}

namespace detail {

template <typename Scalar>
TrainResult train_impl(const TrainConfig& cfg, const FitData& full) {
  TrainResult result;
  const std::uint64_t init_seed = cfg.init_seed.value_or(derive_seed(cfg.shift.seed, {tag_hash("init")}));
  result.model = net::init_model(cfg.layer_sizes, cfg.floor, init_seed);
  net::AdamState adam = net::make_adam(result.model, cfg.lr);
  result.duals = DualState::with_moments(full.moments());
  result.duals.rho0 = cfg.rho0;
  result.duals.rhos = cfg.rhos;
  result.duals.eta_norm = cfg.eta_norm;
  result.duals.eta_mm = cfg.eta_mm;
  result.duals.cap = cfg.dual_cap;
  result.trace.reserve(cfg.steps);

  std::vector<double> eval_q;
  if (cfg.l2q_every > 0) eval_q = evaluation_batch(cfg.shift);

  const bool minibatch = cfg.batch_size > 0 && (cfg.batch_size < full.q.size() || cfg.batch_size < full.p.size());
  Rng batch_rng(derive_seed(cfg.shift.seed, {tag_hash("minibatch")}));
  FitData mb;
  const FitData* data = &full;

  net::ForwardPass<Scalar> pass;
  net::BackwardScratch<Scalar> scratch;
  Eigen::VectorXd grad;
  net::Batch<Scalar> joint;
  std::vector<double> upstream;

  auto build_joint = [&](const FitData& d) {
    joint.resize(1, static_cast<Eigen::Index>(d.q.size() + d.p.size()));
    for (std::size_t i = 0; i < d.q.size(); ++i) joint(0, static_cast<Eigen::Index>(i)) = static_cast<Scalar>(d.q[i]);
    for (std::size_t i = 0; i < d.p.size(); ++i)
      joint(0, static_cast<Eigen::Index>(d.q.size() + i)) = static_cast<Scalar>(d.p[i]);
  };
  if (!minibatch) build_joint(full);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (minibatch) {
      std::vector<double> q(std::min(cfg.batch_size, full.q.size())), p(std::min(cfg.batch_size, full.p.size()));
      for (double& z : q) z = full.q[batch_rng.below(full.q.size())];
      for (double& z : p) z = full.p[batch_rng.below(full.p.size())];
      mb = FitData(std::move(q), std::move(p), full.test_fns);
      data = &mb;
      build_joint(mb);
    }
    const std::size_t nq = data->q.size();
    net::forward_into<Scalar>(result.model, joint, pass);
    const std::span<const double> r(pass.ratio);
    const ObjectiveTerms terms =
        objective_terms(r.subspan(0, nq), r.subspan(nq), *data, cfg.constraint_mode, cfg.tail, &result.duals);
    if (!std::isfinite(terms.value)) throw net::NonFiniteError("train: non-finite objective at step " + std::to_string(step));

    upstream.resize(r.size());
    std::copy(terms.upstream_q.begin(), terms.upstream_q.end(), upstream.begin());
    std::copy(terms.upstream_p.begin(), terms.upstream_p.end(), upstream.begin() + static_cast<std::ptrdiff_t>(nq));
    net::backward_into(result.model, pass, upstream, scratch, grad);
    net::adam_step(result.model, adam, grad);

    result.duals = dual_update(std::move(result.duals), terms.residuals, cfg.constraint_mode);

    TraceRecord rec;
    rec.step = step;
    rec.lsif = terms.lsif;
    rec.residuals = terms.residuals;
    rec.lambda = result.duals.lambda;
    rec.mus = result.duals.mus;
    if (cfg.l2q_every > 0 && (step % cfg.l2q_every == 0 || step == cfg.steps))
      rec.l2q = diag::l2q_error(result.model, cfg.shift.mu, eval_q);
    result.trace.push_back(std::move(rec));

    if (result.duals.diverged) {
      result.status = TrainStatus::diverged;
      break;
    }
  }
  return result;
}

}  // namespace detail

/// Runs `steps` full-batch Adam steps on the augmented Lagrangian, each
/// followed by one dual update evaluated at the pre-step residuals. A run
/// whose multipliers exceed the cap stops early with status `diverged`.
inline TrainResult train(const TrainConfig& cfg, const FitData& data) {
  cfg.validate();
  if (cfg.precision == Precision::float64) return detail::train_impl<double>(cfg, data);
  return detail::train_impl<float>(cfg, data);
}

inline TrainResult train(const TrainConfig& cfg) { return train(cfg, training_data(cfg.shift)); }

/// CSV with columns step,lsif,g0,g1,g2,lambda,mu1,mu2,l2q. Missing values
/// are left empty.
inline void write_trace_csv(std::ostream& out, const TrainTrace& trace) {
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  auto at = [&](const std::vector<double>& v, std::size_t j) { return j < v.size() ? num(v[j]) : std::string(); };
  out << "step,lsif,g0,g1,g2,lambda,mu1,mu2,l2q\n";
  for (const auto& r : trace) {
    out << r.step << ',' << num(r.lsif) << ',' << num(r.residuals.g0) << ',' << at(r.residuals.g, 0) << ','
        << at(r.residuals.g, 1) << ',' << num(r.lambda) << ',' << at(r.mus, 0) << ',' << at(r.mus, 1) << ','
        << (r.l2q ? num(*r.l2q) : std::string()) << '\n';
  }
}

}  // namespace covshift::al

#endif  // COVSHIFT_CONSTRAINTS_HPP
