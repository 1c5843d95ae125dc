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

// Two-sample CSV mode: fit the ratio network on a source and a target file,
// report weight diagnostics and certificates for a bounded loss column of
// the source file. No analytic reference exists, so no criteria are
// evaluated and the report is labeled NO-ORACLE.

#ifndef COVSHIFT_HARNESS_CSV_MODE_HPP
#define COVSHIFT_HARNESS_CSV_MODE_HPP

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "covshift/certificates.hpp"
#include "covshift/constraints.hpp"
#include "covshift/diagnostics.hpp"
#include "covshift/harness/registry.hpp"
#include "covshift/harness/report.hpp"

namespace covshift::harness {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::size_t rejected_rows = 0;  // rows with a non-finite or unparsable entry

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::invalid_argument("schema error: missing column '" + name + "'");
  }

  std::vector<double> values(const std::string& name) const {
    const std::size_t c = column(name);
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }
  return out;
}

inline bool parse_number(const std::string& s, double& v) {
  if (s.empty()) return false;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace detail

/// Reads a numeric CSV with a header line. Rows whose arity differs from
/// the header raise; rows with non-finite entries are dropped and counted.
inline CsvTable parse_csv(std::istream& in, const std::string& name = "csv") {
  CsvTable t;
  std::string line;
  while (std::getline(in, line) && line.find_first_not_of(" \t\r") == std::string::npos) {
  }
  if (line.find_first_not_of(" \t\r") == std::string::npos) throw std::invalid_argument(name + ": empty file");
  t.header = detail::split_csv_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != t.header.size())
      throw std::invalid_argument(name + ": schema error at line " + std::to_string(lineno) + ": expected " +
                                  std::to_string(t.header.size()) + " fields, got " + std::to_string(fields.size()));
    std::vector<double> row(fields.size());
    bool ok = true;
    for (std::size_t i = 0; i < fields.size(); ++i)
      if (!detail::parse_number(fields[i], row[i]) || !std::isfinite(row[i])) ok = false;
    if (ok)
      t.rows.push_back(std::move(row));
    else
      ++t.rejected_rows;
  }
  if (t.rows.empty()) throw std::invalid_argument(name + ": no usable rows");
  return t;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_csv(in, path);
}

/// Shortest round-trip decimal, so exported columns read back bit for bit.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_csv(std::ostream& out, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& columns) {
  require(header.size() == columns.size() && !columns.empty(), "write_csv: one header per column");
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << '\n';
  for (std::size_t r = 0; r < columns[0].size(); ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << format_double(columns[c][r]);
    out << '\n';
  }
}

struct CsvModeConfig {
  std::string feature = "z";
  std::string loss;  // optional bounded loss column of the source file
  al::TrainConfig train;
  double delta = 0.05;
  double kl = 0.0;  // complexity of the declared loss; zero for a single fixed predictor
  std::uint64_t t_min = 100;
  double base = 2.0;
};

/// Reads the [csv] table of a TOML config. Training settings come from the
/// [training] table when present.
inline CsvModeConfig csv_config(const Registry& reg) {
  CsvModeConfig c;
  c.train.shift = lab::ShiftConfig{0.0, 1, 1, reg.base_seed()};
  if (const toml::table* t = reg.table["training"].as_table()) {
    c.train.steps = get_required<std::size_t>(*t, "steps", "training");
    c.train.layer_sizes.clear();
    for (double v : get_doubles(*t, "layers", "training")) c.train.layer_sizes.push_back(static_cast<int>(v));
    c.train.floor = t->get("floor") ? get_required<double>(*t, "floor", "training") : c.train.floor;
    c.train.lr = t->get("lr") ? get_required<double>(*t, "lr", "training") : c.train.lr;
    c.train.eta_norm = t->get("eta_norm") ? get_required<double>(*t, "eta_norm", "training") : c.train.eta_norm;
    c.train.eta_mm = t->get("eta_mm") ? get_required<double>(*t, "eta_mm", "training") : c.train.eta_mm;
    c.train.rho0 = t->get("rho0") ? get_required<double>(*t, "rho0", "training") : c.train.rho0;
    c.train.rhos = t->get("rhos") ? get_required<double>(*t, "rhos", "training") : c.train.rhos;
    if (auto p = (*t)["precision"].value<std::string>())
      c.train.precision = *p == "float64" ? al::Precision::float64 : al::Precision::float32;
  }
  c.train.l2q_every = 0;  // no oracle
  if (const toml::table* t = reg.table["csv"].as_table()) {
    c.feature = (*t)["feature"].value_or(c.feature);
    c.loss = (*t)["loss"].value_or(c.loss);
    c.delta = (*t)["delta"].value_or(c.delta);
    c.kl = (*t)["kl"].value_or(c.kl);
    if (auto m = (*t)["constraints"].value<std::string>()) c.train.constraint_mode = al::parse_constraint_mode(*m);
    if (auto v = (*t)["t_min"].value<int64_t>()) c.t_min = static_cast<std::uint64_t>(*v);
    c.base = (*t)["base"].value_or(c.base);
  }
  return c;
}

inline StageReport run_csv_mode(const CsvTable& source, const CsvTable& target, const CsvModeConfig& cfg,
                                const std::string& registry_hash = {}) {
  const std::vector<double> q = source.values(cfg.feature);
  const std::vector<double> p = target.values(cfg.feature);
  std::vector<double> loss;
  if (!cfg.loss.empty()) {
    loss = source.values(cfg.loss);
    for (double l : loss)
      if (l < 0.0 || l > 1.0) throw std::invalid_argument("loss column '" + cfg.loss + "' must lie in [0, 1]");
  }

  const al::FitData data(q, p);
  const al::TrainResult res = al::train(cfg.train, data);
  const std::vector<double> w = net::evaluate(res.model, q);
  const diag::DiagnosticsReport d = diag::diagnostics(w);
  const al::ConstraintResiduals g = al::residuals(res.model, data);

  StageReport r;
  r.stage = "CSV";
  r.label = "NO-ORACLE";
  r.registry_hash = registry_hash;
  r.config = {{"feature", cfg.feature},
              {"loss", cfg.loss},
              {"delta", cfg.delta},
              {"kl", cfg.kl},
              {"steps", cfg.train.steps},
              {"constraints", std::string(al::to_string(cfg.train.constraint_mode))}};
  r.diagnostics["source_rows"] = q.size();
  r.diagnostics["target_rows"] = p.size();
  r.diagnostics["rejected_source_rows"] = source.rejected_rows;
  r.diagnostics["rejected_target_rows"] = target.rejected_rows;
  r.diagnostics["status"] = res.status == al::TrainStatus::ok ? "ok" : "diverged";
  r.diagnostics["mean_weight"] = d.mean;
  r.diagnostics["second_moment"] = d.second_moment;
  r.diagnostics["ess_abs"] = d.ess_abs;
  r.diagnostics["ess_fraction"] = d.ess_fraction;
  r.diagnostics["g0"] = g.g0;
  r.diagnostics["g"] = g.g;

  if (!loss.empty()) {
    CompensatedSum s;
    for (std::size_t i = 0; i < q.size(); ++i) s += w[i] * loss[i];
    const auto t = static_cast<std::uint64_t>(q.size());
    const double emp = s.value() / static_cast<double>(t);
    nlohmann::json b;
    b["weighted_risk"] = emp;
    b["sqrt"] = cert::to_json(cert::fixed_time_bound(emp, cfg.kl, t, cfg.delta, cert::BoundMode::sqrt));
    b["bernoulli_kl"] = cert::to_json(cert::fixed_time_bound(emp, cfg.kl, t, cfg.delta, cert::BoundMode::bernoulli_kl));
    cert::PeelingSchedule sched{cfg.t_min, cfg.base, cfg.delta};
    if (t >= sched.t_min) {
      b["anytime_sqrt"] = cert::to_json(cert::anytime_bound(emp, cfg.kl, t, sched, cert::BoundMode::anytime_sqrt));
      b["anytime_bernoulli_kl"] =
          cert::to_json(cert::anytime_bound(emp, cfg.kl, t, sched, cert::BoundMode::anytime_bernoulli_kl));
    }
    r.diagnostics["bounds"] = b;
  }
  r.artifact_hash = content_hash(r);
  return r;
}

}  // namespace covshift::harness

#endif  // COVSHIFT_HARNESS_CSV_MODE_HPP
