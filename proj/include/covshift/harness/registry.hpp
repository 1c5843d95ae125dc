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

// Tolerance registry: one TOML file holding every stage configuration and
// every acceptance rule. The file bytes are hashed and the hash travels
// with each artifact.

#ifndef COVSHIFT_HARNESS_REGISTRY_HPP
#define COVSHIFT_HARNESS_REGISTRY_HPP

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <toml.hpp>

#include "covshift/numeric.hpp"

namespace covshift::harness {

inline constexpr std::array<std::string_view, 8> kStages = {"S0", "S1", "S2", "S3", "S4", "S5", "S6", "S7"};

inline bool is_stage(std::string_view s) {
  for (auto t : kStages)
    if (t == s) return true;
  return false;
}

inline std::size_t stage_index(std::string_view s) {
  for (std::size_t i = 0; i < kStages.size(); ++i)
    if (kStages[i] == s) return i;
  throw std::invalid_argument("unknown stage: " + std::string(s));
}

/// Lowercase hex SHA-256 of a byte string.
inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rules

enum class RuleKind { mc_band, relative, absolute, coverage_floor, failure_cap };

constexpr std::string_view to_string(RuleKind k) noexcept {
  switch (k) {
    case RuleKind::mc_band: return "mc_band";
    case RuleKind::relative: return "relative";
    case RuleKind::absolute: return "absolute";
    case RuleKind::coverage_floor: return "coverage_floor";
    case RuleKind::failure_cap: return "failure_cap";
  }
  return "?";
}

inline RuleKind parse_rule_kind(std::string_view s) {
  for (RuleKind k : {RuleKind::mc_band, RuleKind::relative, RuleKind::absolute, RuleKind::coverage_floor,
                     RuleKind::failure_cap})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown rule kind: " + std::string(s));
}

/// A reference is either a literal number or the name of an oracle value
/// the stage places in its context.
using Reference = std::variant<std::monostate, double, std::string>;

/// mc_band:        |v - ref| <= k sigma
/// relative:       |v - ref| / |ref| <= tau      (upper: (v - ref) / |ref| <= tau)
/// absolute:       |v - ref| <= threshold        (upper: v - ref <= threshold)
/// coverage_floor: v >= threshold * ref          (ref defaults to 1)
/// failure_cap:    v <= threshold
/// `strict` turns the closing inequality into a strict one.
struct ToleranceRule {
  RuleKind kind = RuleKind::absolute;
  double param = 0.0;  // k, tau or threshold depending on kind
  Reference reference;
  std::string sigma;  // oracle name of the standard error for mc_band
  bool upper = false;
  bool strict = false;

  void validate() const {
    require(std::isfinite(param), "ToleranceRule: parameter must be finite");
    if (kind == RuleKind::mc_band || kind == RuleKind::relative)
      require(param > 0.0, "ToleranceRule: k and tau must be positive");
    if (kind == RuleKind::coverage_floor || kind == RuleKind::failure_cap)
      require(param >= 0.0, "ToleranceRule: thresholds must be nonnegative");
    if (kind == RuleKind::mc_band) {
      require(!std::holds_alternative<std::monostate>(reference), "ToleranceRule: mc_band needs a reference");
      require(!sigma.empty(), "ToleranceRule: mc_band needs a sigma oracle");
    }
    if (kind == RuleKind::relative)
      require(!std::holds_alternative<std::monostate>(reference), "ToleranceRule: relative needs a reference");
  }
};

inline nlohmann::json to_json(const ToleranceRule& r) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(r.kind));
  j["param"] = r.param;
  if (std::holds_alternative<double>(r.reference)) j["reference"] = std::get<double>(r.reference);
  if (std::holds_alternative<std::string>(r.reference)) j["reference"] = std::get<std::string>(r.reference);
  if (!r.sigma.empty()) j["sigma"] = r.sigma;
  j["upper"] = r.upper;
  j["strict"] = r.strict;
  return j;
}

using OracleContext = std::map<std::string, double>;

enum class Verdict { pass, fail, flagged };

constexpr std::string_view to_string(Verdict v) noexcept {
  switch (v) {
    case Verdict::pass: return "PASS";
    case Verdict::fail: return "FAIL";
    case Verdict::flagged: return "FLAGGED";
  }
  return "?";
}

inline Verdict parse_verdict(std::string_view s) {
  if (s == "PASS") return Verdict::pass;
  if (s == "FAIL") return Verdict::fail;
  if (s == "FLAGGED") return Verdict::flagged;
  throw std::invalid_argument("unknown verdict: " + std::string(s));
}

/// One evaluated inequality: lhs compared against limit.
struct Check {
  std::string label;
  double value = 0.0;
  double reference = 0.0;
  double lhs = 0.0;    // the quantity the rule bounds
  double limit = 0.0;  // what it is compared with
  Verdict verdict = Verdict::fail;
};

inline nlohmann::json to_json(const Check& c) {
  return nlohmann::json{{"label", c.label},  {"value", c.value}, {"reference", c.reference},
                        {"lhs", c.lhs},      {"limit", c.limit}, {"verdict", std::string(to_string(c.verdict))}};
}

inline double resolve(const Reference& ref, const OracleContext& ctx, double fallback) {
  if (std::holds_alternative<double>(ref)) return std::get<double>(ref);
  if (std::holds_alternative<std::string>(ref)) {
    auto it = ctx.find(std::get<std::string>(ref));
    if (it == ctx.end()) throw std::invalid_argument("missing oracle: " + std::get<std::string>(ref));
    return it->second;
  }
  return fallback;
}

/// PASS iff the rule's inequality holds; a non-finite value is FLAGGED.
inline Check check_rule(double value, const ToleranceRule& rule, const OracleContext& ctx, std::string label = {}) {
  rule.validate();
  Check c;
  c.label = std::move(label);
  c.value = value;
  const double neutral = rule.kind == RuleKind::coverage_floor ? 1.0 : 0.0;
  c.reference = resolve(rule.reference, ctx, neutral);
  switch (rule.kind) {
    case RuleKind::mc_band: {
      auto it = ctx.find(rule.sigma);
      if (it == ctx.end()) throw std::invalid_argument("missing oracle: " + rule.sigma);
      c.lhs = std::abs(value - c.reference);
      c.limit = rule.param * it->second;
      break;
    }
    case RuleKind::relative:
      require(c.reference != 0.0, "check_rule: relative tolerance against a zero reference");
      c.lhs = (rule.upper ? value - c.reference : std::abs(value - c.reference)) / std::abs(c.reference);
      c.limit = rule.param;
      break;
    case RuleKind::absolute:
      c.lhs = rule.upper ? value - c.reference : std::abs(value - c.reference);
      c.limit = rule.param;
      break;
    case RuleKind::coverage_floor:
      // stored as -v <= -floor so every kind closes with lhs <= limit
      c.lhs = -value;
      c.limit = -rule.param * c.reference;
      break;
    case RuleKind::failure_cap:
      c.lhs = value;
      c.limit = rule.param;
      break;
  }
  if (!std::isfinite(c.lhs) || !std::isfinite(c.limit))
    c.verdict = Verdict::flagged;
  else
    c.verdict = (rule.strict ? c.lhs < c.limit : c.lhs <= c.limit) ? Verdict::pass : Verdict::fail;
  return c;
}

/// A criterion passes when every one of its checks passes; any flagged
/// check flags it.
inline Verdict combine(const std::vector<Check>& checks) {
  if (checks.empty()) return Verdict::flagged;
  bool flagged = false;
  for (const Check& c : checks) {
    if (c.verdict == Verdict::fail) return Verdict::fail;
    if (c.verdict == Verdict::flagged) flagged = true;
  }
  return flagged ? Verdict::flagged : Verdict::pass;
}

// ---------------------------------------------------------------------------
// Registry file

struct Registry {
  std::string text;  // raw file bytes
  std::string hash;  // sha256 of `text`
  toml::table table;

  const toml::table& stage(std::string_view name) const {
    const toml::table* t = table[name].as_table();
    if (t == nullptr) throw std::invalid_argument("registry has no table for stage " + std::string(name));
    return *t;
  }

  /// Criteria registered for a stage, by name.
  std::map<std::string, ToleranceRule> criteria(std::string_view name) const;

  std::uint64_t base_seed() const {
    const auto v = table["base_seed"].value<int64_t>();
    if (!v || *v < 0) throw std::invalid_argument("registry: base_seed must be a nonnegative integer");
    return static_cast<std::uint64_t>(*v);
  }
};

inline ToleranceRule parse_rule(const toml::table& t, std::string_view where) {
  const auto kind = t["kind"].value<std::string>();
  if (!kind) throw std::invalid_argument(std::string(where) + ": missing rule kind");
  ToleranceRule r;
  r.kind = parse_rule_kind(*kind);
  const char* key = "threshold";
  if (r.kind == RuleKind::mc_band) key = "k";
  if (r.kind == RuleKind::relative) key = "tau";
  const auto p = t[key].value<double>();
  if (!p) throw std::invalid_argument(std::string(where) + ": missing " + key);
  r.param = *p;
  if (auto s = t["reference"].value<std::string>())
    r.reference = *s;
  else if (auto d = t["reference"].value<double>())
    r.reference = *d;
  r.sigma = t["sigma"].value_or(std::string{});
  r.upper = t["upper"].value_or(false);
  r.strict = t["strict"].value_or(false);
  try {
    r.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string(where) + ": " + e.what());
  }
  return r;
}

inline std::map<std::string, ToleranceRule> Registry::criteria(std::string_view name) const {
  std::map<std::string, ToleranceRule> out;
  if (table[name].as_table() == nullptr) return out;
  const toml::table* c = stage(name)["criteria"].as_table();
  if (c == nullptr) return out;
  for (const auto& [key, node] : *c) {
    const toml::table* t = node.as_table();
    const std::string where = std::string(name) + ".criteria." + std::string(key.str());
    if (t == nullptr) throw std::invalid_argument(where + " must be a table");
    out.emplace(std::string(key.str()), parse_rule(*t, where));
  }
  return out;
}

inline Registry parse_registry(std::string text) {
  Registry r;
  try {
    r.table = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "registry parse error: " << e.description() << " at line " << e.source().begin.line;
    throw std::invalid_argument(msg.str());
  }
  r.text = std::move(text);
  r.hash = sha256_hex(r.text);
  const auto version = r.table["version"].value<int64_t>();
  if (!version || *version != 1) throw std::invalid_argument("registry: unsupported or missing version");
  r.base_seed();
  for (auto s : kStages) (void)r.criteria(s);  // validates every rule up front
  return r;
}

inline Registry load_registry(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open registry " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_registry(ss.str());
}

// Typed accessors with a uniform error message.

template <typename T>
T get_required(const toml::table& t, std::string_view key, std::string_view where) {
  if constexpr (std::is_same_v<T, double>) {
    if (auto v = t[key].value<double>()) return *v;
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (auto v = t[key].value<std::string>()) return *v;
  } else {
    if (auto v = t[key].value<int64_t>()) return static_cast<T>(*v);
  }
  throw std::invalid_argument(std::string(where) + ": missing or mistyped key '" + std::string(key) + "'");
}

inline std::vector<double> get_doubles(const toml::table& t, std::string_view key, std::string_view where) {
  const toml::array* a = t[key].as_array();
  if (a == nullptr) throw std::invalid_argument(std::string(where) + ": missing array '" + std::string(key) + "'");
  std::vector<double> out;
  for (const auto& e : *a) {
    auto v = e.value<double>();
    if (!v) throw std::invalid_argument(std::string(where) + ": non-numeric entry in '" + std::string(key) + "'");
    out.push_back(*v);
  }
  return out;
}

/// TOML to JSON for config snapshots; keys come out sorted.
inline nlohmann::json toml_to_json(const toml::node& n) {
  if (auto t = n.as_table()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (auto a = n.as_array()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (auto v = n.value_exact<int64_t>()) return *v;
  if (auto v = n.value_exact<double>()) return *v;
  if (auto v = n.value_exact<bool>()) return *v;
  if (auto v = n.value_exact<std::string>()) return *v;
  return nullptr;
}

}  // namespace covshift::harness

#endif  // COVSHIFT_HARNESS_REGISTRY_HPP
