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

// covshift: run the patch-test stages, render artifact summaries, and fit
// the two-sample CSV mode.
//
//   covshift run --stage S3 --config config/patch_test.toml --out artifacts
//   covshift sweep --stages S0:S7 --config config/patch_test.toml --out artifacts
//   covshift report --dir artifacts [--csv]
//   covshift csv --source a.csv --target b.csv --config csv.toml
//
// Exit status is 0 iff every registered criterion passes.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "covshift/harness/csv_mode.hpp"
#include "covshift/harness/registry.hpp"
#include "covshift/harness/report.hpp"
#include "covshift/harness/stages.hpp"

namespace fs = std::filesystem;
using namespace covshift::harness;

namespace {

void write_once(const fs::path& path, const std::string& text) {
  if (fs::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (ss.str() == text) return;
    throw std::runtime_error("refusing to overwrite " + path.string());
  }
  fs::create_directories(path.parent_path());
  std::ofstream(path, std::ios::binary) << text;
}

void print_verdicts(const StageReport& r, std::ostream& os) {
  for (const auto& c : r.criteria) {
    os << "  " << std::left << std::setw(32) << c.name << to_string(c.verdict);
    for (const auto& k : c.checks) {
      os << "  [" << (k.label.empty() ? "" : k.label + ": ") << "value=" << k.value;
      os << " lhs=" << k.lhs << " limit=" << k.limit << "]";
    }
    os << '\n';
  }
}

std::vector<std::string> parse_stage_range(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string a = spec.substr(0, colon);
  const std::string b = colon == std::string::npos ? a : spec.substr(colon + 1);
  const std::size_t lo = stage_index(a), hi = stage_index(b);
  if (lo > hi) throw std::invalid_argument("empty stage range " + spec);
  std::vector<std::string> out;
  for (std::size_t i = lo; i <= hi; ++i) out.emplace_back(kStages[i]);
  return out;
}

// Prior artifacts on disk are used when the needed stage is not in memory.
void load_priors(const fs::path& dir, PriorReports& priors) {
  for (auto s : kStages) {
    const fs::path p = artifact_path(dir, s);
    if (!priors.count(std::string(s)) && fs::exists(p)) priors[std::string(s)] = load_artifact(p);
  }
}

bool run_stages(const std::vector<std::string>& stages, const std::string& config, const fs::path& out) {
  const Registry reg = load_registry(config);
  PriorReports priors;
  load_priors(out, priors);
  bool ok = true;
  for (const auto& s : stages) {
    const auto t0 = std::chrono::steady_clock::now();
    StageOutput so = run_stage(s, reg, priors, &std::cerr);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    emit_artifact(so.report, artifact_path(out, s), reg.criteria(s));
    for (const auto& [name, text] : so.exports) write_once(out / "traces" / name, text);
    std::cout << s << " (" << std::fixed << std::setprecision(1) << secs << " s) hash "
              << so.report.artifact_hash.substr(0, 16) << '\n';
    std::cout.unsetf(std::ios::fixed);
    std::cout << std::setprecision(6);
    print_verdicts(so.report, std::cout);
    ok = ok && so.report.all_pass();
    priors[s] = std::move(so.report);
  }
  return ok;
}

bool report_dir(const fs::path& dir, bool csv) {
  std::vector<StageReport> reports;
  for (auto s : kStages) {
    const fs::path p = artifact_path(dir, s);
    if (fs::exists(p)) reports.push_back(load_artifact(p));
  }
  if (reports.empty()) throw std::runtime_error("no artifacts in " + dir.string());
  bool ok = true;
  if (csv) std::cout << "stage,criterion,verdict,checks\n";
  for (const auto& r : reports) {
    for (const auto& c : r.criteria) {
      if (csv)
        std::cout << r.stage << ',' << c.name << ',' << to_string(c.verdict) << ',' << c.checks.size() << '\n';
      else
        std::cout << std::left << std::setw(4) << r.stage << std::setw(32) << c.name << to_string(c.verdict) << '\n';
      ok = ok && c.verdict == Verdict::pass;
    }
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Covariate-shift patch test and certificates"};
  app.require_subcommand(1);

  std::string stage, stages = "S0:S7", config = "config/patch_test.toml", out = "artifacts", dir = "artifacts";
  std::string source, target;
  bool csv_table = false;

  auto* run = app.add_subcommand("run", "run one stage");
  run->add_option("--stage", stage, "S0..S7")->required();
  run->add_option("--config", config, "tolerance registry (TOML)")->required();
  run->add_option("--out", out, "artifact directory");

  auto* sweep = app.add_subcommand("sweep", "run a range of stages in order");
  sweep->add_option("--stages", stages, "range such as S0:S7");
  sweep->add_option("--config", config, "tolerance registry (TOML)");
  sweep->add_option("--out", out, "artifact directory");

  auto* report = app.add_subcommand("report", "summarize artifacts");
  report->add_option("--dir", dir, "artifact directory");
  report->add_flag("--csv", csv_table, "CSV instead of a text table");

  auto* csv = app.add_subcommand("csv", "two-sample CSV mode (no oracle)");
  csv->add_option("--source", source, "source sample CSV")->required();
  csv->add_option("--target", target, "target sample CSV")->required();
  csv->add_option("--config", config, "TOML with [csv] and [training] tables")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return run_stages(parse_stage_range(stage), config, out) ? 0 : 1;
    if (*sweep) return run_stages(parse_stage_range(stages), config, out) ? 0 : 1;
    if (*report) return report_dir(dir, csv_table) ? 0 : 1;
    if (*csv) {
      const Registry reg = load_registry(config);
      const StageReport r = run_csv_mode(read_csv(source), read_csv(target), csv_config(reg), reg.hash);
      std::cout << artifact_text(r);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
