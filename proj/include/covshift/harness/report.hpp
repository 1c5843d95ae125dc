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

// Stage reports and their immutable JSON artifacts.

#ifndef COVSHIFT_HARNESS_REPORT_HPP
#define COVSHIFT_HARNESS_REPORT_HPP

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covshift/harness/registry.hpp"

namespace covshift::harness {

struct CriterionResult {
  std::string name;
  ToleranceRule rule;
  Verdict verdict = Verdict::flagged;
  std::vector<Check> checks;
};

struct StageReport {
  std::string stage;
  std::string registry_hash;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json diagnostics = nlohmann::json::object();  // per-seed and aggregate numbers
  nlohmann::json annotations = nlohmann::json::object();  // reference values, never thresholds
  std::map<std::string, double> summary;                   // values later stages inherit
  std::vector<CriterionResult> criteria;
  std::string label;  // "NO-ORACLE" for the CSV mode
  std::string artifact_hash;

  bool all_pass() const {
    for (const auto& c : criteria)
      if (c.verdict != Verdict::pass) return false;
    return true;
  }

  const CriterionResult& criterion(std::string_view name) const {
    for (const auto& c : criteria)
      if (c.name == name) return c;
    throw std::out_of_range("report has no criterion " + std::string(name));
  }
};

/// Every registered criterion must appear exactly once, and nothing else.
inline void validate_report(const StageReport& r, const std::map<std::string, ToleranceRule>& registered) {
  std::multiset<std::string> seen;
  for (const auto& c : r.criteria) seen.insert(c.name);
  for (const auto& [name, rule] : registered) {
    const auto n = seen.count(name);
    if (n == 0) throw std::invalid_argument(r.stage + ": registered criterion '" + name + "' is missing");
    if (n > 1) throw std::invalid_argument(r.stage + ": criterion '" + name + "' reported more than once");
  }
  for (const auto& name : seen)
    if (!registered.count(name)) throw std::invalid_argument(r.stage + ": unregistered criterion '" + name + "'");
}

/// The report body without its hash. nlohmann objects are ordered maps, so
/// keys come out sorted; doubles print as shortest round-trip decimals.
inline nlohmann::json report_body(const StageReport& r) {
  nlohmann::json j;
  j["stage"] = r.stage;
  j["registry_hash"] = r.registry_hash;
  j["config"] = r.config;
  j["diagnostics"] = r.diagnostics;
  j["annotations"] = r.annotations;
  j["summary"] = r.summary;
  if (!r.label.empty()) j["label"] = r.label;
  nlohmann::json crit = nlohmann::json::object();
  for (const auto& c : r.criteria) {
    nlohmann::json cj;
    cj["rule"] = to_json(c.rule);
    cj["verdict"] = std::string(to_string(c.verdict));
    cj["checks"] = nlohmann::json::array();
    for (const auto& k : c.checks) cj["checks"].push_back(to_json(k));
    crit[c.name] = cj;
  }
  j["criteria"] = crit;
  return j;
}

inline std::string canonical_dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline std::string content_hash(const StageReport& r) { return sha256_hex(canonical_dump(report_body(r))); }

inline std::string artifact_text(const StageReport& r) {
  nlohmann::json j = report_body(r);
  j["artifact_hash"] = content_hash(r);
  return canonical_dump(j);
}

/// Writes the artifact once. Re-emitting identical content is a no-op;
/// a different artifact at the same path is refused.
inline std::string emit_artifact(StageReport& r, const std::filesystem::path& path,
                                 const std::map<std::string, ToleranceRule>& registered) {
  validate_report(r, registered);
  r.artifact_hash = content_hash(r);
  const std::string text = artifact_text(r);
  if (std::filesystem::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (ss.str() == text) return r.artifact_hash;
    throw std::runtime_error("refusing to overwrite " + path.string() + " with different content");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  return r.artifact_hash;
}

inline StageReport report_from_json(const nlohmann::json& j) {
  StageReport r;
  r.stage = j.at("stage").get<std::string>();
  r.registry_hash = j.at("registry_hash").get<std::string>();
  r.config = j.at("config");
  r.diagnostics = j.at("diagnostics");
  r.annotations = j.at("annotations");
  r.summary = j.at("summary").get<std::map<std::string, double>>();
  r.label = j.value("label", std::string{});
  for (const auto& [name, cj] : j.at("criteria").items()) {
    CriterionResult c;
    c.name = name;
    const auto& rj = cj.at("rule");
    c.rule.kind = parse_rule_kind(rj.at("kind").get<std::string>());
    c.rule.param = rj.at("param").get<double>();
    if (rj.contains("reference")) {
      if (rj["reference"].is_string())
        c.rule.reference = rj["reference"].get<std::string>();
      else
        c.rule.reference = rj["reference"].get<double>();
    }
    c.rule.sigma = rj.value("sigma", std::string{});
    c.rule.upper = rj.value("upper", false);
    c.rule.strict = rj.value("strict", false);
    c.verdict = parse_verdict(cj.at("verdict").get<std::string>());
    for (const auto& k : cj.at("checks")) {
      Check ch;
      ch.label = k.at("label").get<std::string>();
      // non-finite numbers serialize as null
      auto num = [&](const char* key) {
        return k.at(key).is_null() ? std::numeric_limits<double>::quiet_NaN() : k.at(key).get<double>();
      };
      ch.value = num("value");
      ch.reference = num("reference");
      ch.lhs = num("lhs");
      ch.limit = num("limit");
      ch.verdict = parse_verdict(k.at("verdict").get<std::string>());
      c.checks.push_back(std::move(ch));
    }
    r.criteria.push_back(std::move(c));
  }
  r.artifact_hash = j.value("artifact_hash", std::string{});
  return r;
}

/// Loads an artifact and checks that its stored hash matches its content.
inline StageReport load_artifact(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing artifact " + path.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  StageReport r = report_from_json(j);
  if (r.artifact_hash != content_hash(r)) throw std::runtime_error("artifact hash mismatch in " + path.string());
  return r;
}

inline std::filesystem::path artifact_path(const std::filesystem::path& dir, std::string_view stage) {
  return dir / (std::string(stage) + ".json");
}

}  // namespace covshift::harness

#endif  // COVSHIFT_HARNESS_REPORT_HPP
