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
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "covshift/harness/csv_mode.hpp"
#include "covshift/harness/registry.hpp"
#include "covshift/harness/report.hpp"
#include "covshift/harness/stages.hpp"

#ifndef COVSHIFT_SOURCE_DIR
#define COVSHIFT_SOURCE_DIR "."
#endif

namespace fs = std::filesystem;
using namespace covshift;
using namespace covshift::harness;

namespace {

ToleranceRule rule(RuleKind k, double param, Reference ref = {}, std::string sigma = {}, bool upper = false,
                   bool strict = false) {
  ToleranceRule r;
  r.kind = k;
  r.param = param;
  r.reference = std::move(ref);
  r.sigma = std::move(sigma);
  r.upper = upper;
  r.strict = strict;
  return r;
}

const char* kMiniRegistry = R"(version = 1
base_seed = 11

[S0]
mu = 0.5
n = 2000
seeds = 1

[S0.criteria.normalization]
kind = "mc_band"
k = 4
reference = 1.0
sigma = "noise_floor"

[S0.criteria.second_moment]
kind = "relative"
tau = 0.1
reference = "second_moment"

[S0.criteria.ess_fraction]
kind = "relative"
tau = 0.2
reference = "ess_fraction"

[S0.criteria.first_moment_transport]
kind = "mc_band"
k = 3
reference = "first_moment_transport"
sigma = "sigma_first_moment_transport"

[S0.criteria.second_moment_transport]
kind = "mc_band"
k = 3
reference = "second_moment_transport"
sigma = "sigma_second_moment_transport"
)";

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("covshift_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

StageReport tiny_report() {
  StageReport r;
  r.stage = "S0";
  r.registry_hash = "abc";
  r.diagnostics["x"] = 0.1;
  r.summary["y"] = 2.5;
  CriterionResult c;
  c.name = "normalization";
  c.rule = rule(RuleKind::absolute, 0.1, 1.0);
  c.checks.push_back(check_rule(1.05, c.rule, {}));
  c.verdict = combine(c.checks);
  r.criteria.push_back(c);
  return r;
}

}  // namespace

TEST(CheckRule, Oracles) {
  const OracleContext ctx = {{"sigma", 0.01}, {"ref", 2.0}};
  EXPECT_EQ(check_rule(1.03, rule(RuleKind::mc_band, 4, 1.0, "sigma"), ctx).verdict, Verdict::pass);
  EXPECT_EQ(check_rule(1.05, rule(RuleKind::mc_band, 4, 1.0, "sigma"), ctx).verdict, Verdict::fail);
  EXPECT_EQ(check_rule(2.1, rule(RuleKind::relative, 0.1, "ref"), ctx).verdict, Verdict::pass);
  EXPECT_EQ(check_rule(1.7, rule(RuleKind::relative, 0.1, "ref"), ctx).verdict, Verdict::fail);
  // one-sided: anything below the reference passes
  EXPECT_EQ(check_rule(0.1, rule(RuleKind::relative, 0.05, "ref", {}, true), ctx).verdict, Verdict::pass);
  EXPECT_EQ(check_rule(0.5, rule(RuleKind::absolute, 0.0, 0.5, {}, true, true), ctx).verdict, Verdict::fail);
  EXPECT_EQ(check_rule(0.93, rule(RuleKind::coverage_floor, 0.92), ctx).verdict, Verdict::pass);
  EXPECT_EQ(check_rule(0.91, rule(RuleKind::coverage_floor, 0.92), ctx).verdict, Verdict::fail);
  EXPECT_EQ(check_rule(2, rule(RuleKind::failure_cap, 2), ctx).verdict, Verdict::pass);
  EXPECT_EQ(check_rule(2, rule(RuleKind::failure_cap, 2, {}, {}, false, true), ctx).verdict, Verdict::fail);
}

TEST(CheckRule, NonFiniteIsFlagged) {
  EXPECT_EQ(check_rule(NAN, rule(RuleKind::failure_cap, 2), {}).verdict, Verdict::flagged);
  const std::vector<Check> mixed = {check_rule(1, rule(RuleKind::failure_cap, 2), {}),
                                    check_rule(NAN, rule(RuleKind::failure_cap, 2), {})};
  EXPECT_EQ(combine(mixed), Verdict::flagged);
  EXPECT_EQ(combine({}), Verdict::flagged);
}

TEST(CheckRule, MissingOracleThrows) {
  EXPECT_THROW(check_rule(1.0, rule(RuleKind::mc_band, 4, 1.0, "nope"), {}), std::invalid_argument);
  EXPECT_THROW(check_rule(1.0, rule(RuleKind::relative, 0.1, "nope"), {}), std::invalid_argument);
}

TEST(Registry, ParsesAndHashes) {
  const Registry r = parse_registry(kMiniRegistry);
  EXPECT_EQ(r.base_seed(), 11u);
  EXPECT_EQ(r.hash, sha256_hex(kMiniRegistry));
  EXPECT_EQ(r.hash.size(), 64u);
  const auto c = r.criteria("S0");
  ASSERT_EQ(c.count("normalization"), 1u);
  EXPECT_EQ(c.at("normalization").kind, RuleKind::mc_band);
  EXPECT_TRUE(r.criteria("S5").empty());
}

TEST(Registry, Sha256KnownAnswer) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Registry, RejectsMalformedFiles) {
  EXPECT_THROW(parse_registry("version = 2\nbase_seed = 1\n"), std::invalid_argument);
  EXPECT_THROW(parse_registry("version = 1\n"), std::invalid_argument);
  EXPECT_THROW(parse_registry("version = 1\nbase_seed = 1\n[S0.criteria.a]\nkind = \"mc_band\"\nk = 3\n"),
               std::invalid_argument);
  EXPECT_THROW(parse_registry("version = = 1"), std::invalid_argument);
}

TEST(Registry, ShippedConfigLoads) {
  const Registry r = load_registry(std::string(COVSHIFT_SOURCE_DIR) + "/config/patch_test.toml");
  for (auto s : kStages) EXPECT_FALSE(r.criteria(s).empty()) << s;
}

TEST(Artifacts, EmitIsIdempotentAndRefusesChanges) {
  const fs::path dir = temp_dir("emit");
  const auto registered = std::map<std::string, ToleranceRule>{{"normalization", rule(RuleKind::absolute, 0.1, 1.0)}};
  StageReport r = tiny_report();
  const std::string h1 = emit_artifact(r, artifact_path(dir, "S0"), registered);
  StageReport again = tiny_report();
  EXPECT_EQ(emit_artifact(again, artifact_path(dir, "S0"), registered), h1);
  StageReport changed = tiny_report();
  changed.summary["y"] = 2.6;
  EXPECT_THROW(emit_artifact(changed, artifact_path(dir, "S0"), registered), std::runtime_error);

  const StageReport back = load_artifact(artifact_path(dir, "S0"));
  EXPECT_EQ(back.artifact_hash, h1);
  EXPECT_EQ(artifact_text(back), artifact_text(r));
  fs::remove_all(dir);
}

TEST(Artifacts, MissingOrExtraCriterionIsRejected) {
  const fs::path dir = temp_dir("missing");
  StageReport r = tiny_report();
  auto registered = std::map<std::string, ToleranceRule>{{"normalization", rule(RuleKind::absolute, 0.1, 1.0)},
                                                         {"second_moment", rule(RuleKind::relative, 0.1, 1.0)}};
  EXPECT_THROW(emit_artifact(r, artifact_path(dir, "S0"), registered), std::invalid_argument);
  EXPECT_THROW(emit_artifact(r, artifact_path(dir, "S0"), {}), std::invalid_argument);
  EXPECT_FALSE(fs::exists(artifact_path(dir, "S0")));
  fs::remove_all(dir);
}

TEST(Artifacts, TamperedFileFailsHashCheck) {
  const fs::path dir = temp_dir("tamper");
  StageReport r = tiny_report();
  emit_artifact(r, artifact_path(dir, "S0"), {{"normalization", rule(RuleKind::absolute, 0.1, 1.0)}});
  std::ifstream in(artifact_path(dir, "S0"));
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  text.replace(text.find("2.5"), 3, "2.4");
  std::ofstream(artifact_path(dir, "S0")) << text;
  EXPECT_THROW(load_artifact(artifact_path(dir, "S0")), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Stages, S0RunsAndIsReproducible) {
  const Registry reg = parse_registry(kMiniRegistry);
  const auto a = run_stage("S0", reg);
  const auto b = run_stage("S0", reg);
  EXPECT_EQ(a.report.criterion("normalization").verdict, Verdict::pass);
  EXPECT_EQ(a.report.criteria.size(), 5u);
  EXPECT_EQ(artifact_text(a.report), artifact_text(b.report));
  EXPECT_EQ(a.report.registry_hash, reg.hash);
}

TEST(Stages, MissingPrerequisiteIsReported) {
  const Registry reg = load_registry(std::string(COVSHIFT_SOURCE_DIR) + "/config/patch_test.toml");
  try {
    run_stage("S2", reg);
    FAIL() << "expected a missing prerequisite";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("missing prerequisite artifact"), std::string::npos);
  }
  EXPECT_THROW(run_stage("S9", reg), std::invalid_argument);
}

TEST(Csv, ParseAndSchemaErrors) {
  std::istringstream in("z,loss\n0.5,0.1\nnan,0.2\n1e-3,0.3\n");
  const CsvTable t = parse_csv(in);
  EXPECT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rejected_rows, 1u);
  EXPECT_EQ(t.values("z"), (std::vector<double>{0.5, 1e-3}));
  try {
    t.column("x");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_EQ(std::string(e.what()), "schema error: missing column 'x'");
  }
}

TEST(Csv, LabExportRoundTripsBitForBit) {
  const auto q = lab::sample(lab::ShiftConfig{0.5, 1000, 1, 5}, lab::Law::source).values;
  const auto w = lab::true_ratio(q, 0.5);
  std::stringstream ss;
  write_csv(ss, {"z", "w"}, {q, w});
  const CsvTable t = parse_csv(ss);
  EXPECT_EQ(t.values("z"), q);
  EXPECT_EQ(t.values("w"), w);
}

TEST(Csv, ModeIsLabelledAndReportsBounds) {
  const lab::ShiftConfig c{0.5, 400, 400, 12};
  const auto q = lab::sample(c, lab::Law::source).values;
  const auto p = lab::sample(c, lab::Law::target).values;
  std::vector<double> loss(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) loss[i] = risk::clipped_scaled_loss(0.5, q[i]);
  std::stringstream src, tgt;
  write_csv(src, {"z", "loss"}, {q, loss});
  write_csv(tgt, {"z"}, {p});
  const CsvTable s = parse_csv(src), t = parse_csv(tgt);

  CsvModeConfig cfg;
  cfg.loss = "loss";
  cfg.train.steps = 50;
  cfg.train.layer_sizes = {1, 8, 8, 1};
  cfg.train.constraint_mode = al::ConstraintMode::norm;
  const StageReport r = run_csv_mode(s, t, cfg);
  EXPECT_EQ(r.label, "NO-ORACLE");
  EXPECT_EQ(r.stage, "CSV");
  const auto& b = r.diagnostics.at("bounds");
  EXPECT_GE(b.at("sqrt").at("bound").get<double>(), b.at("weighted_risk").get<double>());
  EXPECT_TRUE(b.contains("anytime_bernoulli_kl"));
  EXPECT_FALSE(r.diagnostics.contains("l2q"));

  cfg.feature = "x";
  EXPECT_THROW(run_csv_mode(s, t, cfg), std::invalid_argument);
}

TEST(Csv, ShippedConfigParses) {
  const Registry reg = load_registry(std::string(COVSHIFT_SOURCE_DIR) + "/config/csv_example.toml");
  const CsvModeConfig cfg = csv_config(reg);
  EXPECT_EQ(cfg.loss, "loss");
  EXPECT_EQ(cfg.train.constraint_mode, al::ConstraintMode::norm_moments);
}
