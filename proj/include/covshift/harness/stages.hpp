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

// Stages S0-S7 of the Gaussian patch test.
//
//   S0  oracle ratio identities
//   S1  unconstrained LSIF network, kernel and discriminator baselines
//   S2  + normalization multiplier         (needs S1)
//   S3  + moment multipliers               (needs S2)
//   S4  raw versus clipped deployment under strong shift (needs S3)
//   S5  oracle-weighted risk on the predictor grid
//   S6  fixed-time certificates
//   S7  anytime certificates

#ifndef COVSHIFT_HARNESS_STAGES_HPP
#define COVSHIFT_HARNESS_STAGES_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covshift/baselines.hpp"
#include "covshift/certificates.hpp"
#include "covshift/constraints.hpp"
#include "covshift/diagnostics.hpp"
#include "covshift/gaussian_shift.hpp"
#include "covshift/harness/registry.hpp"
#include "covshift/harness/report.hpp"
#include "covshift/numeric.hpp"
#include "covshift/rng.hpp"
#include "covshift/weighted_risk.hpp"

namespace covshift::harness {

/// Reports of earlier stages, keyed by stage tag.
using PriorReports = std::map<std::string, StageReport>;

/// Stage output: the report plus trace exports (file name -> CSV text).
struct StageOutput {
  StageReport report;
  std::map<std::string, std::string> exports;
};

inline std::uint64_t replicate_seed(std::uint64_t base, std::string_view tag, std::uint64_t i,
                                    std::uint64_t extra = 0) {
  return derive_seed(base, {tag_hash(tag), i, extra});
}

namespace detail {

inline double nan() { return std::numeric_limits<double>::quiet_NaN(); }

inline double median_of(std::vector<double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return nan();
  return median(std::move(v));
}

/// Adds one criterion, evaluated from its registered rule.
class CriterionSink {
 public:
  CriterionSink(StageReport& r, std::map<std::string, ToleranceRule> rules) : r_(r), rules_(std::move(rules)) {}

  const ToleranceRule& rule(const std::string& name) const {
    auto it = rules_.find(name);
    if (it == rules_.end()) throw std::invalid_argument(r_.stage + ": criterion '" + name + "' is not registered");
    return it->second;
  }

  void add(const std::string& name, std::vector<Check> checks) {
    CriterionResult c;
    c.name = name;
    c.rule = rule(name);
    c.verdict = combine(checks);
    c.checks = std::move(checks);
    r_.criteria.push_back(std::move(c));
  }

  void add_single(const std::string& name, double value, const OracleContext& ctx, std::string label = {}) {
    add(name, {check_rule(value, rule(name), ctx, std::move(label))});
  }

  const std::map<std::string, ToleranceRule>& rules() const { return rules_; }

 private:
  StageReport& r_;
  std::map<std::string, ToleranceRule> rules_;
};

inline StageReport new_report(std::string_view stage, const Registry& reg) {
  StageReport r;
  r.stage = std::string(stage);
  r.registry_hash = reg.hash;
  r.config["stage"] = toml_to_json(reg.stage(stage));
  if (auto* a = reg.stage(stage)["annotations"].as_table()) r.annotations = toml_to_json(*a);
  return r;
}

inline const StageReport& require_prior(const PriorReports& priors, std::string_view stage, const Registry& reg) {
  auto it = priors.find(std::string(stage));
  if (it == priors.end())
    throw std::runtime_error("missing prerequisite artifact for stage " + std::string(stage));
  if (it->second.registry_hash != reg.hash)
    throw std::runtime_error("prerequisite artifact " + std::string(stage) + " was produced under a different registry");
  return it->second;
}

// ---------------------------------------------------------------------------
// Training stages

inline al::TrainConfig training_config(const Registry& reg, double mu, std::size_t n, std::uint64_t seed,
                                       al::ConstraintMode mode, al::TailMode tail) {
  const toml::table* t = reg.table["training"].as_table();
  if (t == nullptr) throw std::invalid_argument("registry has no [training] table");
  const std::string where = "training";
  al::TrainConfig cfg;
  cfg.shift = lab::ShiftConfig{mu, n, n, seed};
  cfg.steps = get_required<std::size_t>(*t, "steps", where);
  cfg.layer_sizes.clear();
  for (double v : get_doubles(*t, "layers", where)) cfg.layer_sizes.push_back(static_cast<int>(v));
  cfg.floor = get_required<double>(*t, "floor", where);
  cfg.lr = get_required<double>(*t, "lr", where);
  cfg.eta_norm = get_required<double>(*t, "eta_norm", where);
  cfg.eta_mm = get_required<double>(*t, "eta_mm", where);
  cfg.rho0 = get_required<double>(*t, "rho0", where);
  cfg.rhos = get_required<double>(*t, "rhos", where);
  cfg.dual_cap = get_required<double>(*t, "dual_cap", where);
  const std::string prec = get_required<std::string>(*t, "precision", where);
  if (prec != "float32" && prec != "float64") throw std::invalid_argument("training.precision must be float32 or float64");
  cfg.precision = prec == "float32" ? al::Precision::float32 : al::Precision::float64;
  cfg.l2q_every = get_required<std::size_t>(*t, "l2q_every", where);
  cfg.constraint_mode = mode;
  cfg.tail = tail;
  cfg.validate();
  return cfg;
}

struct RunSummary {
  bool completed = false;  // neither diverged nor non-finite
  std::string status;
  double g0 = nan(), g1 = nan(), g2 = nan();
  double lambda = nan(), mu1 = nan(), mu2 = nan();
  double l2q = nan();
  double ess_fraction = nan();
  double second_moment = nan();
  double max_weight = nan();
  std::size_t steps_run = 0;
  std::string trace_csv;
};

inline nlohmann::json to_json(const RunSummary& s) {
  return nlohmann::json{{"status", s.status},
                        {"g0", s.g0},
                        {"g1", s.g1},
                        {"g2", s.g2},
                        {"lambda", s.lambda},
                        {"mu1", s.mu1},
                        {"mu2", s.mu2},
                        {"l2q", s.l2q},
                        {"ess_fraction", s.ess_fraction},
                        {"second_moment", s.second_moment},
                        {"max_weight", s.max_weight},
                        {"steps_run", s.steps_run}};
}

/// Trains one network and measures it on a held-out source batch.
inline RunSummary run_training(const al::TrainConfig& cfg) {
  RunSummary s;
  const al::FitData data = al::training_data(cfg.shift);
  al::TrainResult res;
  try {
    res = al::train(cfg, data);
  } catch (const net::NonFiniteError& e) {
    s.status = std::string("non-finite: ") + e.what();
    return s;
  }
  s.steps_run = res.trace.size();
  s.completed = res.status == al::TrainStatus::ok;
  s.status = s.completed ? "ok" : "diverged";
  const al::ConstraintResiduals g = al::residuals(res.model, data);
  s.g0 = g.g0;
  s.g1 = g.g.size() > 0 ? g.g[0] : nan();
  s.g2 = g.g.size() > 1 ? g.g[1] : nan();
  s.lambda = res.duals.lambda;
  s.mu1 = res.duals.mus.size() > 0 ? res.duals.mus[0] : nan();
  s.mu2 = res.duals.mus.size() > 1 ? res.duals.mus[1] : nan();
  const std::vector<double> eval = al::evaluation_batch(cfg.shift);
  const std::vector<double> raw = net::evaluate(res.model, eval);
  s.l2q = diag::l2q_error(raw, cfg.shift.mu, eval);
  const diag::WeightVector deployed = al::deployed_weights(raw, cfg.tail);
  const diag::DiagnosticsReport d = diag::diagnostics(deployed);
  s.ess_fraction = d.ess_fraction;
  s.second_moment = d.second_moment;
  s.max_weight = *std::max_element(deployed.begin(), deployed.end());
  std::ostringstream csv;
  al::write_trace_csv(csv, res.trace);
  s.trace_csv = csv.str();
  return s;
}

struct TrainingStageSpec {
  double mu;
  std::size_t n;
  std::size_t seeds;
  al::ConstraintMode mode;
};

inline TrainingStageSpec training_spec(const Registry& reg, std::string_view stage) {
  // S2 and S3 inherit shift, sample size and seeds from S1
  const toml::table& s1 = reg.stage("S1");
  TrainingStageSpec spec;
  spec.mu = get_required<double>(s1, "mu", "S1");
  spec.n = get_required<std::size_t>(s1, "n", "S1");
  spec.seeds = get_required<std::size_t>(s1, "seeds", "S1");
  spec.mode = al::parse_constraint_mode(get_required<std::string>(reg.stage(stage), "constraints", stage));
  return spec;
}

inline void log_line(std::ostream* log, const std::string& s) {
  if (log != nullptr) *log << s << '\n' << std::flush;
}

/// Shared body of S1-S3: one network per seed in the given mode.
inline std::vector<RunSummary> run_training_seeds(const Registry& reg, std::string_view stage, StageOutput& out,
                                                  std::ostream* log) {
  const TrainingStageSpec spec = training_spec(reg, stage);
  std::vector<RunSummary> runs;
  nlohmann::json per_seed = nlohmann::json::array();
  for (std::size_t i = 0; i < spec.seeds; ++i) {
    const std::uint64_t seed = replicate_seed(reg.base_seed(), "training", i);
    const al::TrainConfig cfg = training_config(reg, spec.mu, spec.n, seed, spec.mode, al::TailMode::raw());
    if (i == 0) out.report.config["training"] = toml_to_json(*reg.table["training"].as_table());
    RunSummary s = run_training(cfg);
    log_line(log, std::string(stage) + " seed " + std::to_string(i) + ": " + s.status + " l2q=" +
                      std::to_string(s.l2q) + " g0=" + std::to_string(s.g0));
    out.exports[std::string(stage) + "_seed" + std::to_string(i) + "_trace.csv"] = s.trace_csv;
    nlohmann::json j = to_json(s);
    j["seed"] = seed;
    per_seed.push_back(j);
    runs.push_back(std::move(s));
  }
  out.report.diagnostics["runs"] = per_seed;
  std::vector<double> g0s, l2qs;
  double failed = 0.0;
  for (const auto& s : runs) {
    g0s.push_back(std::abs(s.g0));
    l2qs.push_back(s.l2q);
    if (!s.completed) failed += 1.0;
  }
  out.report.summary["median_abs_g0"] = median_of(g0s);
  out.report.summary["median_l2q"] = median_of(l2qs);
  out.report.summary["failed_fraction"] = failed / static_cast<double>(runs.size());
  out.report.diagnostics["median_abs_g0"] = out.report.summary["median_abs_g0"];
  out.report.diagnostics["median_l2q"] = out.report.summary["median_l2q"];
  return runs;
}

inline OracleContext previous_context(const StageReport& prev) {
  OracleContext ctx;
  for (const auto& [k, v] : prev.summary) ctx["previous." + k] = v;
  return ctx;
}

inline void run_s0(const Registry& reg, StageOutput& out, CriterionSink& sink) {
  const toml::table& t = reg.stage("S0");
  const double mu = get_required<double>(t, "mu", "S0");
  const std::size_t n = get_required<std::size_t>(t, "n", "S0");
  const std::size_t seeds = get_required<std::size_t>(t, "seeds", "S0");
  const lab::IdentityTable id = lab::analytic_identities(mu);
  const lab::IdentitySigmas sig = lab::identity_sigmas(mu, n);
  OracleContext ctx{{"norm", id.norm},
                    {"second_moment", id.second_moment},
                    {"ess_fraction", id.ess_fraction},
                    {"first_moment_transport", id.first_moment_transport},
                    {"second_moment_transport", id.second_moment_transport},
                    {"noise_floor", 1.0 / std::sqrt(static_cast<double>(n))},
                    {"sigma_first_moment_transport", sig.first_moment_transport},
                    {"sigma_second_moment_transport", sig.second_moment_transport}};
  std::map<std::string, std::vector<Check>> checks;
  nlohmann::json per_seed = nlohmann::json::array();
  for (std::size_t i = 0; i < seeds; ++i) {
    const std::uint64_t seed = replicate_seed(reg.base_seed(), "S0", i);
    const lab::SampleBatch q = lab::sample(lab::ShiftConfig{mu, n, n, seed}, lab::Law::source);
    const std::vector<double> w = lab::true_ratio(q.view(), mu);
    const diag::DiagnosticsReport d = diag::diagnostics(w);
    CompensatedSum t1, t2;
    for (std::size_t k = 0; k < n; ++k) {
      t1 += w[k] * q.values[k];
      t2 += w[k] * q.values[k] * q.values[k];
    }
    const double nd = static_cast<double>(n);
    const std::map<std::string, double> measured{{"normalization", d.mean},
                                                 {"second_moment", d.second_moment},
                                                 {"ess_fraction", d.ess_fraction},
                                                 {"first_moment_transport", t1.value() / nd},
                                                 {"second_moment_transport", t2.value() / nd}};
    nlohmann::json j = measured;
    j["seed"] = seed;
    per_seed.push_back(j);
    const std::string label = "seed " + std::to_string(i);
    for (const auto& [name, v] : measured) checks[name].push_back(check_rule(v, sink.rule(name), ctx, label));
  }
  out.report.diagnostics["seeds"] = per_seed;
  out.report.diagnostics["oracle"] = ctx;
  for (auto& [name, c] : checks) sink.add(name, std::move(c));
}

inline double constant_model_l2q(double mu) { return std::sqrt(std::exp(mu * mu) - 1.0); }

inline void run_s1(const Registry& reg, StageOutput& out, CriterionSink& sink, std::ostream* log) {
  const std::vector<RunSummary> runs = run_training_seeds(reg, "S1", out, log);
  const TrainingStageSpec spec = training_spec(reg, "S1");
  const toml::table& t = reg.stage("S1");
  const auto centers = get_required<std::size_t>(t, "baseline_centers", "S1");
  const double ulsif_lambda = get_required<double>(t, "ulsif_lambda", "S1");
  const int kliep_iters = get_required<int>(t, "kliep_iters", "S1");
  const double disc_l2 = get_required<double>(t, "discriminator_l2", "S1");
  const int disc_iters = get_required<int>(t, "discriminator_iters", "S1");

  OracleContext ctx{{"constant_model_l2q", constant_model_l2q(spec.mu)}};
  out.report.diagnostics["constant_model_l2q"] = ctx["constant_model_l2q"];

  std::map<std::string, std::vector<double>> base_l2q;
  nlohmann::json per_seed = nlohmann::json::array();
  for (std::size_t i = 0; i < spec.seeds; ++i) {
    const std::uint64_t seed = replicate_seed(reg.base_seed(), "training", i);
    const lab::ShiftConfig shift{spec.mu, spec.n, spec.n, seed};
    const std::vector<double> q = lab::sample(shift, lab::Law::source).values;
    const std::vector<double> p = lab::sample(shift, lab::Law::target).values;
    const std::vector<double> eval = al::evaluation_batch(shift);
    std::vector<double> pooled = q;
    pooled.insert(pooled.end(), p.begin(), p.end());
    const baselines::Bandwidth bw = baselines::median_bandwidth(pooled);

    const auto ulsif = baselines::fit_ulsif(
        q, p, baselines::select_centers(q, centers, derive_seed(seed, {tag_hash("ulsif")})), bw.value, ulsif_lambda);
    const auto kliep = baselines::fit_kliep(
        q, p, baselines::select_centers(p, centers, derive_seed(seed, {tag_hash("kliep")})), bw.value, kliep_iters);
    const auto disc = baselines::fit_discriminator(q, p, disc_l2, disc_iters);

    const double l_ulsif = diag::l2q_error(ulsif.model.evaluate(eval), spec.mu, eval);
    const double l_kliep = diag::l2q_error(kliep.model.evaluate(eval), spec.mu, eval);
    const double l_disc = diag::l2q_error(baselines::ratio_from_discriminator(disc, eval), spec.mu, eval);
    base_l2q["ulsif"].push_back(l_ulsif);
    base_l2q["kliep"].push_back(l_kliep);
    base_l2q["discriminator"].push_back(l_disc);
    per_seed.push_back({{"seed", seed},
                        {"bandwidth", bw.value},
                        {"bandwidth_fallback", bw.fallback},
                        {"ulsif_l2q", l_ulsif},
                        {"ulsif_residual", ulsif.normal_equation_residual()},
                        {"kliep_l2q", l_kliep},
                        {"kliep_objective", kliep.objective},
                        {"kliep_restarted", kliep.restarted},
                        {"discriminator_l2q", l_disc},
                        {"discriminator_slope", disc.weights[0]},
                        {"discriminator_converged", disc.converged}});
    log_line(log, "S1 baselines seed " + std::to_string(i) + ": ulsif=" + std::to_string(l_ulsif) +
                      " kliep=" + std::to_string(l_kliep) + " disc=" + std::to_string(l_disc));
  }
  out.report.diagnostics["baselines"] = per_seed;

  sink.add_single("training_completed", out.report.summary["failed_fraction"], ctx, "diverged fraction");
  std::vector<double> l2qs;
  for (const auto& r : runs) l2qs.push_back(r.l2q);
  sink.add_single("beats_constant_model", median_of(l2qs), ctx, "median network l2q");
  std::vector<Check> bchecks;
  for (const auto& [name, v] : base_l2q)
    bchecks.push_back(check_rule(median_of(v), sink.rule("baselines_beat_constant_model"), ctx, name));
  sink.add("baselines_beat_constant_model", std::move(bchecks));
}

inline void run_s2_s3(const Registry& reg, std::string_view stage, const PriorReports& priors, StageOutput& out,
                      CriterionSink& sink, std::ostream* log) {
  const std::string prev_tag = stage == "S2" ? "S1" : "S2";
  const StageReport& prev = require_prior(priors, prev_tag, reg);
  out.report.config["inherits"] = {{"stage", prev_tag}, {"artifact_hash", prev.artifact_hash}};
  run_training_seeds(reg, stage, out, log);
  const OracleContext ctx = previous_context(prev);
  sink.add_single("training_completed", out.report.summary["failed_fraction"], ctx, "diverged fraction");
  if (sink.rules().count("normalization_tightening"))
    sink.add_single("normalization_tightening", out.report.summary["median_abs_g0"], ctx, "median |g0|");
  sink.add_single("l2q_ordering", out.report.summary["median_l2q"], ctx, "median l2q");
}

inline void run_s4(const Registry& reg, const PriorReports& priors, StageOutput& out, CriterionSink& sink,
                   std::ostream* log) {
  const StageReport& prev = require_prior(priors, "S3", reg);
  out.report.config["inherits"] = {{"stage", "S3"}, {"artifact_hash", prev.artifact_hash}};
  out.report.config["training"] = toml_to_json(*reg.table["training"].as_table());
  const toml::table& t = reg.stage("S4");
  const std::vector<double> mus = get_doubles(t, "mus", "S4");
  const std::vector<double> clips = get_doubles(t, "clips", "S4");
  require(mus.size() == clips.size(), "S4: mus and clips must pair up");
  const auto n = get_required<std::size_t>(t, "n", "S4");
  const auto seeds = get_required<std::size_t>(t, "seeds", "S4");
  const al::ConstraintMode mode = al::parse_constraint_mode(get_required<std::string>(reg.stage("S3"), "constraints", "S3"));

  std::vector<Check> improve, floor;
  nlohmann::json per_mu = nlohmann::json::array();
  for (std::size_t m = 0; m < mus.size(); ++m) {
    std::vector<double> raw_ess, clip_ess;
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t i = 0; i < seeds; ++i) {
      const std::uint64_t seed = replicate_seed(reg.base_seed(), "S4", i, m);
      for (const al::TailMode& tail : {al::TailMode::raw(), al::TailMode::clip(clips[m])}) {
        const al::TrainConfig cfg = training_config(reg, mus[m], n, seed, mode, tail);
        RunSummary s = run_training(cfg);
        const bool raw = tail.kind == al::TailMode::Kind::raw;
        (raw ? raw_ess : clip_ess).push_back(s.ess_fraction);
        log_line(log, "S4 mu=" + std::to_string(mus[m]) + " seed " + std::to_string(i) + " " + al::to_string(tail) +
                          ": " + s.status + " ess=" + std::to_string(s.ess_fraction));
        std::ostringstream name;
        name << "S4_mu" << mus[m] << "_seed" << i << "_" << al::to_string(tail) << "_trace.csv";
        out.exports[name.str()] = s.trace_csv;
        nlohmann::json j = to_json(s);
        j["seed"] = seed;
        j["tail"] = al::to_string(tail);
        runs.push_back(j);
      }
    }
    const double med_raw = median_of(raw_ess);
    const double med_clip = median_of(clip_ess);
    std::ostringstream label;
    label << "mu=" << mus[m] << " c=" << clips[m];
    OracleContext ctx{{"median_raw_ess", med_raw}, {"ess_fraction", lab::analytic_identities(mus[m]).ess_fraction}};
    improve.push_back(check_rule(med_clip, sink.rule("clip_improves_ess"), ctx, label.str()));
    floor.push_back(check_rule(med_raw, sink.rule("ess_floor"), ctx, label.str() + " raw"));
    floor.push_back(check_rule(med_clip, sink.rule("ess_floor"), ctx, label.str() + " clipped"));
    per_mu.push_back({{"mu", mus[m]},
                      {"clip", clips[m]},
                      {"median_raw_ess", med_raw},
                      {"median_clipped_ess", med_clip},
                      {"runs", runs}});
  }
  out.report.diagnostics["shifts"] = per_mu;
  sink.add("clip_improves_ess", std::move(improve));
  sink.add("ess_floor", std::move(floor));
}

inline void run_s5(const Registry& reg, StageOutput& out, CriterionSink& sink) {
  const toml::table& t = reg.stage("S5");
  const std::vector<double> mus = get_doubles(t, "mus", "S5");
  const std::vector<double> ks = get_doubles(t, "k", "S5");
  require(mus.size() == ks.size(), "S5: one k per shift");
  const auto n = get_required<std::size_t>(t, "n", "S5");
  const auto seeds = get_required<std::size_t>(t, "seeds", "S5");
  double failures = 0.0;
  std::size_t cells = 0;
  nlohmann::json grid = nlohmann::json::array();
  for (std::size_t m = 0; m < mus.size(); ++m) {
    ToleranceRule band;
    band.kind = RuleKind::mc_band;
    band.param = ks[m];
    band.reference = std::string("target_risk");
    band.sigma = "sigma_mc";
    for (std::size_t i = 0; i < seeds; ++i) {
      const std::uint64_t seed = replicate_seed(reg.base_seed(), "S5", i, m);
      const lab::SampleBatch q = lab::sample(lab::ShiftConfig{mus[m], n, n, seed}, lab::Law::source);
      const std::vector<double> w = lab::true_ratio(q.view(), mus[m]);
      for (double a : risk::kPredictorGrid) {
        const double r = risk::weighted_empirical_risk(w, a, q.view(), risk::Loss::squared);
        OracleContext ctx{{"target_risk", lab::target_risk(a, mus[m])}, {"sigma_mc", lab::sigma_mc(a, mus[m], n)}};
        const Check c = check_rule(r, band, ctx);
        ++cells;
        if (c.verdict != Verdict::pass) failures += 1.0;
        grid.push_back({{"mu", mus[m]},
                        {"seed", seed},
                        {"a", a},
                        {"risk", r},
                        {"target_risk", c.reference},
                        {"deviation", c.lhs},
                        {"band", c.limit},
                        {"verdict", std::string(to_string(c.verdict))}});
      }
    }
  }
  out.report.diagnostics["cells"] = grid;
  out.report.diagnostics["cell_count"] = cells;
  out.report.diagnostics["failures"] = failures;
  sink.add_single("grid_band_failures", failures, {}, "cells outside band");
}

inline void run_s6(const Registry& reg, StageOutput& out, CriterionSink& sink) {
  const toml::table& t = reg.stage("S6");
  const double mu = get_required<double>(t, "mu", "S6");
  const auto T = get_required<std::size_t>(t, "t", "S6");
  const auto N = get_required<std::size_t>(t, "replicates", "S6");
  const double delta = get_required<double>(t, "delta", "S6");
  const std::vector<double> rate_ts = get_doubles(t, "rate_ts", "S6");
  const double kl = cert::kl_gaussian(risk::kSanityPosterior, risk::kStandardPrior);
  const double target = risk::posterior_target_risk(risk::kSanityPosterior, mu);
  out.report.diagnostics["kl"] = kl;
  out.report.diagnostics["target_risk"] = target;

  // emp risks for N replicates at sample size t
  auto replicate_risks = [&](std::size_t tt) {
    std::vector<double> out_r(N);
    for (std::size_t i = 0; i < N; ++i) {
      const std::uint64_t seed = replicate_seed(reg.base_seed(), "S6", i, tt);
      const lab::SampleBatch q = lab::sample(lab::ShiftConfig{mu, tt, tt, seed}, lab::Law::source);
      const std::vector<double> w = lab::true_ratio(q.view(), mu);
      out_r[i] = risk::posterior_risk(risk::kSanityPosterior, w, q.view());
    }
    return out_r;
  };

  const std::vector<double> emp = replicate_risks(T);
  double cov_sqrt = 0.0, cov_bkl = 0.0, looser = 0.0;
  std::vector<double> ratio_bkl, ratio_sqrt;
  nlohmann::json reps = nlohmann::json::array();
  for (std::size_t i = 0; i < N; ++i) {
    const double bs = cert::sqrt_bound(emp[i], kl, T, delta);
    const double bk = cert::bernoulli_kl_bound(std::min(emp[i], 1.0), kl, T, delta);
    if (bs >= target) cov_sqrt += 1.0;
    if (bk >= target) cov_bkl += 1.0;
    if (bk > bs) looser += 1.0;
    ratio_bkl.push_back(bk / target);
    ratio_sqrt.push_back(bs / target);
    reps.push_back({{"emp_risk", emp[i]}, {"sqrt", bs}, {"bernoulli_kl", bk}});
  }
  const double nd = static_cast<double>(N);
  out.report.diagnostics["replicates"] = reps;
  out.report.diagnostics["median_ratio_sqrt"] = median_of(ratio_sqrt);
  out.report.diagnostics["median_ratio_bernoulli_kl"] = median_of(ratio_bkl);
  sink.add_single("coverage_sqrt", cov_sqrt / nd, {}, "sqrt coverage");
  sink.add_single("coverage_bernoulli_kl", cov_bkl / nd, {}, "bernoulli_kl coverage");
  sink.add_single("bernoulli_kl_not_looser", looser, {}, "replicates with bernoulli_kl > sqrt");
  sink.add_single("non_vacuity", median_of(ratio_bkl), {}, "median bernoulli_kl bound / R_P");

  // (bound - R_P) sqrt(t / ln t) at several t
  std::vector<double> scaled_sqrt, scaled_bkl;
  nlohmann::json rate = nlohmann::json::array();
  for (double tv : rate_ts) {
    const auto tt = static_cast<std::size_t>(tv);
    const std::vector<double> e = tt == T ? emp : replicate_risks(tt);
    std::vector<double> bs, bk;
    for (double r : e) {
      bs.push_back(cert::sqrt_bound(r, kl, tt, delta));
      bk.push_back(cert::bernoulli_kl_bound(std::min(r, 1.0), kl, tt, delta));
    }
    const double scale = std::sqrt(tv / std::log(tv));
    scaled_sqrt.push_back((median_of(bs) - target) * scale);
    scaled_bkl.push_back((median_of(bk) - target) * scale);
    rate.push_back({{"t", tt},
                    {"median_sqrt", median_of(bs)},
                    {"median_bernoulli_kl", median_of(bk)},
                    {"scaled_sqrt", scaled_sqrt.back()},
                    {"scaled_bernoulli_kl", scaled_bkl.back()}});
  }
  auto spread = [](const std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi / *lo;
  };
  out.report.diagnostics["rate"] = rate;
  out.report.diagnostics["rate_spread_bernoulli_kl"] = spread(scaled_bkl);
  sink.add_single("rate_stability", spread(scaled_sqrt), {}, "sqrt bound max/min");
}

inline void run_s7(const Registry& reg, StageOutput& out, CriterionSink& sink) {
  const toml::table& t = reg.stage("S7");
  const double mu = get_required<double>(t, "mu", "S7");
  cert::PeelingSchedule sched;
  sched.t_min = get_required<std::size_t>(t, "t_min", "S7");
  sched.base = get_required<double>(t, "base", "S7");
  sched.delta = get_required<double>(t, "delta", "S7");
  sched.validate();
  const auto horizon = get_required<std::size_t>(t, "horizon", "S7");
  const auto N = get_required<std::size_t>(t, "replicates", "S7");
  const auto stride = get_required<std::size_t>(t, "stride", "S7");
  require(horizon >= sched.t_min && stride >= 1, "S7: need horizon >= t_min and stride >= 1");
  const double kl = cert::kl_gaussian(risk::kSanityPosterior, risk::kStandardPrior);
  const double target = risk::posterior_target_risk(risk::kSanityPosterior, mu);

  double fail_sqrt = 0.0, fail_bkl = 0.0;
  std::vector<double> at_min, at_max, at_min_sqrt, at_max_sqrt;
  nlohmann::json reps = nlohmann::json::array();
  for (std::size_t i = 0; i < N; ++i) {
    const std::uint64_t seed = replicate_seed(reg.base_seed(), "S7", i);
    const lab::SampleBatch q = lab::sample(lab::ShiftConfig{mu, horizon, horizon, seed}, lab::Law::source);
    CompensatedSum s;
    bool violated_sqrt = false, violated_bkl = false;
    double min_margin_bkl = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < horizon; ++k) {
      const double z = q.values[k];
      s += lab::true_ratio(z, mu) * risk::posterior_point_loss(risk::kSanityPosterior, z);
      const std::size_t tt = k + 1;
      if (tt < sched.t_min || ((tt - sched.t_min) % stride != 0 && tt != horizon)) continue;
      const double emp = s.value() / static_cast<double>(tt);
      const auto bs = cert::anytime_bound(emp, kl, tt, sched, cert::BoundMode::anytime_sqrt);
      const auto bk = cert::anytime_bound(emp, kl, tt, sched, cert::BoundMode::anytime_bernoulli_kl);
      if (bs.bound < target) violated_sqrt = true;
      if (bk.bound < target) violated_bkl = true;
      min_margin_bkl = std::min(min_margin_bkl, bk.bound - target);
      if (tt == sched.t_min) {
        at_min.push_back(bk.bound);
        at_min_sqrt.push_back(bs.bound);
      }
      if (tt == horizon) {
        at_max.push_back(bk.bound);
        at_max_sqrt.push_back(bs.bound);
      }
    }
    if (violated_sqrt) fail_sqrt += 1.0;
    if (violated_bkl) fail_bkl += 1.0;
    reps.push_back({{"seed", seed},
                    {"violated_sqrt", violated_sqrt},
                    {"violated_bernoulli_kl", violated_bkl},
                    {"min_margin_bernoulli_kl", min_margin_bkl}});
  }
  const double nd = static_cast<double>(N);
  out.report.diagnostics["replicates"] = reps;
  out.report.diagnostics["target_risk"] = target;
  out.report.diagnostics["median_bernoulli_kl_at_t_min"] = median_of(at_min);
  out.report.diagnostics["median_bernoulli_kl_at_horizon"] = median_of(at_max);
  out.report.diagnostics["median_sqrt_at_t_min"] = median_of(at_min_sqrt);
  out.report.diagnostics["median_sqrt_at_horizon"] = median_of(at_max_sqrt);
  sink.add_single("failure_rate_sqrt", fail_sqrt / nd, {}, "time-uniform failure rate");
  sink.add_single("failure_rate_bernoulli_kl", fail_bkl / nd, {}, "time-uniform failure rate");
  sink.add_single("band_at_t_min", median_of(at_min), {}, "median anytime bernoulli_kl bound at t_min");
  sink.add_single("band_at_horizon", median_of(at_max), {}, "median anytime bernoulli_kl bound at horizon");
}

}  // namespace detail

/// Runs one stage against the registry. Inheriting stages look up their
/// predecessor in `priors`.
inline StageOutput run_stage(std::string_view stage, const Registry& reg, const PriorReports& priors = {},
                             std::ostream* log = nullptr) {
  if (!is_stage(stage)) throw std::invalid_argument("unknown stage: " + std::string(stage));
  StageOutput out;
  out.report = detail::new_report(stage, reg);
  detail::CriterionSink sink(out.report, reg.criteria(stage));
  if (stage == "S0") detail::run_s0(reg, out, sink);
  if (stage == "S1") detail::run_s1(reg, out, sink, log);
  if (stage == "S2" || stage == "S3") detail::run_s2_s3(reg, stage, priors, out, sink, log);
  if (stage == "S4") detail::run_s4(reg, priors, out, sink, log);
  if (stage == "S5") detail::run_s5(reg, out, sink);
  if (stage == "S6") detail::run_s6(reg, out, sink);
  if (stage == "S7") detail::run_s7(reg, out, sink);
  validate_report(out.report, sink.rules());
  out.report.artifact_hash = content_hash(out.report);
  return out;
}

}  // namespace covshift::harness

#endif  // COVSHIFT_HARNESS_STAGES_HPP
