/* Copyright 2026 The FlashRec Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// flashrec: run scenarios, scale sweeps and the checkpoint overhead model.
//
//   flashrec run --config scenarios/dp32.json --mode checkpoint --out run.csv
//   flashrec analyze --d 86400 --m 6 --s0 600 --k0 20 --step-time 10
//   flashrec sweep --config scenarios/dp32.json --sizes 32,256,2048 --out sweep.csv
//
// Exit status: 0 on success, 1 on a configuration error, 2 when a scenario
// could not be recovered.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flashrec/error.h"
#include "flashrec/harness.h"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitUnrecoverable = 2;

struct RunArgs {
  std::string config;
  std::string mode;
  std::optional<uint64_t> seed;
  std::string out;
  std::string event_log;
};

struct AnalyzeArgs {
  flashrec::OverheadParams p;
  std::optional<double> s0_flash;
  std::optional<double> s1_flash;
};

struct SweepArgs {
  std::string config;
  std::vector<int> sizes;
  std::string out;
  std::string plot_data;
};

// Writes through `fn` to `path`, or to stdout when `path` is empty.
template <typename Fn>
void Emit(const std::string& path, Fn fn) {
  if (path.empty()) {
    fn(std::cout);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw flashrec::Error(flashrec::ErrorCode::kNotFound, "cannot write " + path);
  fn(out);
}

int Run(const RunArgs& a) {
  flashrec::Scenario sc = flashrec::LoadScenarioFile(a.config);
  if (a.mode == "flash") sc.mode = flashrec::RecoveryMode::kFlash;
  if (a.mode == "checkpoint") sc.mode = flashrec::RecoveryMode::kCheckpoint;
  if (a.seed) {
    sc.seed = *a.seed;
    sc.workload.seed = *a.seed;
  }
  flashrec::ValidateScenario(sc);
  const flashrec::ScenarioResult r = flashrec::RunScenario(sc);
  Emit(a.out, [&](std::ostream& os) { flashrec::WriteMetricsCsv(r.rows, os); });
  if (!a.event_log.empty()) {
    Emit(a.event_log, [&](std::ostream& os) { os << r.event_log; });
  }
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  if (r.status == flashrec::ScenarioStatus::kUnrecoverable) {
    std::cerr << "unrecoverable: " << r.failure_reason << "\n";
    return kExitUnrecoverable;
  }
  return 0;
}

int Analyze(const AnalyzeArgs& a) {
  const double s0f = a.s0_flash.value_or(a.p.s0);
  const double s1f = a.s1_flash.value_or(a.p.step_time);
  std::cout << flashrec::FormatAnalyzeReport(flashrec::Analyze(a.p, s0f, s1f));
  return 0;
}

int Sweep(const SweepArgs& a) {
  const flashrec::Scenario base = flashrec::LoadScenarioFile(a.config);
  const auto rows = flashrec::SweepScale(base, a.sizes);
  Emit(a.out, [&](std::ostream& os) { flashrec::WriteSweepCsv(rows, os); });
  if (!a.plot_data.empty()) {
    Emit(a.plot_data, [&](std::ostream& os) { flashrec::WriteSweepPlotData(rows, os); });
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Checkpoint-free failure recovery simulator"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run one scenario and write per-recovery metrics");
  run_cmd->add_option("--config", run.config, "Scenario JSON")->required()->check(
      CLI::ExistingFile);
  run_cmd->add_option("--mode", run.mode, "Override the recovery mode")
      ->check(CLI::IsMember({"flash", "checkpoint"}));
  run_cmd->add_option("--seed", run.seed, "Override the scenario seed");
  run_cmd->add_option("--out", run.out, "CSV path (default stdout)");
  run_cmd->add_option("--event-log", run.event_log, "Write the replay log here");

  AnalyzeArgs an;
  auto* an_cmd = app.add_subcommand("analyze", "Optimal checkpoint interval and flash break-even");
  an_cmd->add_option("--d", an.p.d, "Training period, seconds")->required();
  an_cmd->add_option("--m", an.p.m, "Failures during the period")->required();
  an_cmd->add_option("--s0", an.p.s0, "Per-failure restart overhead, seconds")->required();
  an_cmd->add_option("--k0", an.p.k0, "Snapshot stall per checkpoint, seconds")->required();
  an_cmd->add_option("--step-time", an.p.step_time, "Seconds per training step")->required();
  an_cmd->add_option("--s0-flash", an.s0_flash, "Flash restart overhead (default: s0)");
  an_cmd->add_option("--s1-flash", an.s1_flash, "Flash recompute per failure (default: one step)");

  SweepArgs sw;
  auto* sw_cmd = app.add_subcommand("sweep", "Repeat a scenario's faults across cluster sizes");
  sw_cmd->add_option("--config", sw.config, "Base scenario JSON")->required()->check(
      CLI::ExistingFile);
  sw_cmd->add_option("--sizes", sw.sizes, "Device counts")->required()->delimiter(',');
  sw_cmd->add_option("--out", sw.out, "CSV path (default stdout)");
  sw_cmd->add_option("--emit-plot-data", sw.plot_data, "Per-mode series for plotting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run_cmd) return Run(run);
    if (*an_cmd) return Analyze(an);
    return Sweep(sw);
  } catch (const flashrec::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == flashrec::ErrorCode::kNotRecoverable ? kExitUnrecoverable : kExitConfig;
  }
}
