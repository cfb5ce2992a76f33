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

// Scenario configuration, fault injection, flash and checkpoint-baseline
// execution, CSV metrics, scale sweeps and the overhead-model front-end.

#ifndef FLASHREC_HARNESS_H_
#define FLASHREC_HARNESS_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "flashrec/controller.h"
#include "flashrec/overhead_model.h"
#include "flashrec/protocol.h"
#include "flashrec/worker.h"

namespace flashrec {

enum class RecoveryMode { kFlash, kCheckpoint };
enum class RankTableMode { kSharedFile, kNegotiate };
enum class FaultPhase { kForwardBackward, kOptimizer, kRandom };
enum class DetectionPath { kAuto, kPlugin, kHeartbeat };

std::string_view RecoveryModeName(RecoveryMode m);

struct FaultSpec {
  int64_t at_step = 0;
  FaultPhase phase = FaultPhase::kForwardBackward;
  std::optional<std::string> target_node;      // nullopt: seeded random pick
  std::optional<FailureClass> failure_class;   // nullopt: sampled from the taxonomy
  // kAuto: hardware classes surface through the device plugin, software
  // classes through heartbeat silence.
  DetectionPath detection = DetectionPath::kAuto;
  // The first spare brought up for this node dies as soon as it is created.
  bool replacement_fails = false;
};

// Every duration in ticks.
struct ScenarioTiming {
  StepTiming step;
  Tick latency = 1;
  Tick heartbeat_period = 1;
  int miss_threshold = 3;
  Tick optimizer_wait_timeout = 20;
  Tick stop = 2;
  Tick recreate = 20;
  Tick agent = 5;
  Tick store_connect = 1;
  Tick ranktable_file = 1;
  Tick negotiate_message = 1;
  Tick link = 1;
  Tick copy = 2;
  Tick k0 = 2;
  Tick k1 = 4;
  Tick hang_timeout = 60;
  Tick checkpoint_load = 10;
};

struct Scenario {
  std::string id = "scenario";
  uint64_t seed = 0;
  int dp = 1;
  int tp = 1;
  int pp = 1;
  int zero = 1;
  int n_nodes = 1;
  int devices_per_node = 1;
  int64_t horizon_steps = 20;
  RecoveryMode mode = RecoveryMode::kFlash;
  int64_t checkpoint_interval = 0;  // steps; 0 disables checkpoints
  ClockMode clock_mode = ClockMode::kSimulated;
  int store_parallelism = 16;
  // Defaults to shared file for flash and negotiation for the baseline.
  std::optional<RankTableMode> ranktable_mode;
  int spares = 4;
  WorkloadConfig workload;
  ScenarioTiming timing;
  std::vector<FaultSpec> faults;

  int world_size() const { return dp * tp * pp * zero; }
  RankTableMode effective_ranktable_mode() const;
};

// Throws kInvalidArgument naming the offending field.
void ValidateScenario(const Scenario& sc);
// JSON mirroring Scenario field by field; throws kParse or
// kInvalidArgument. Missing fields keep their defaults.
Scenario ParseScenario(std::string_view json);
Scenario LoadScenarioFile(const std::filesystem::path& path);
std::string ScenarioToJson(const Scenario& sc);

// Resizes a scenario to n_devices, growing the data-parallel degree.
Scenario ResizeScenario(const Scenario& base, int n_devices);

struct MetricsRow {
  std::string scenario_id;
  int n_devices = 0;
  int64_t failure_step = -1;
  std::string failure_phase;
  std::string failure_class;
  Tick detection_ticks = 0;
  Tick restart_ticks = 0;
  int64_t redone_steps = 0;
  Tick total_ticks = 0;
  std::string mode;
  std::string loss_digest;
};

std::string MetricsHeader();
std::string MetricsToCsv(const MetricsRow& row);
void WriteMetricsCsv(const std::vector<MetricsRow>& rows, std::ostream& out);

enum class ScenarioStatus { kCompleted, kUnrecoverable };

struct ScenarioResult {
  ScenarioStatus status = ScenarioStatus::kCompleted;
  std::string failure_reason;
  // One row per recovery, then the summary row.
  std::vector<MetricsRow> rows;
  std::vector<RecoveryReport> reports;
  // Per-step loss (sum over shards of the replica-mean loss).
  std::vector<double> losses;
  std::string loss_digest;
  Tick finished_at = 0;
  // Sum over recoveries.
  uint64_t recreated_nodes = 0;
  uint64_t store_rounds = 0;
  uint64_t ranktable_messages = 0;
  uint64_t ranktable_loads = 0;
  std::vector<std::string> warnings;
  std::string event_log;
};

// Test and tooling hooks into a simulated run.
struct RunObserver {
  // At each stop authorization: the controller's view of healthy tags and
  // the tags the same workers actually hold.
  std::function<void(const StopDecision&, const std::vector<int64_t>& reported,
                     const std::vector<int64_t>& actual)>
      on_authorized;
  bool capture_event_log = true;
};

// Simulated mode is a pure function of the scenario. Real mode runs workers
// and the controller on threads with millisecond ticks.
ScenarioResult RunScenario(const Scenario& sc, const RunObserver& observer = {});

// Digest over the bit patterns of a loss trajectory.
std::string LossDigest(const std::vector<double>& losses);

struct SweepRow {
  int n_devices = 0;
  RecoveryMode mode = RecoveryMode::kFlash;
  Tick detection_ticks = 0;
  Tick restart_ticks = 0;
  Tick total_ticks = 0;
  uint64_t store_rounds = 0;
  uint64_t ranktable_messages = 0;
  uint64_t recreated_nodes = 0;
  std::string loss_digest;
};

// Runs the base scenario's faults at each size in both modes. Needs at least
// two sizes.
std::vector<SweepRow> SweepScale(const Scenario& base, const std::vector<int>& n_devices);
void WriteSweepCsv(const std::vector<SweepRow>& rows, std::ostream& out);
// One series per mode: n_devices,restart_ticks pairs for plotting.
void WriteSweepPlotData(const std::vector<SweepRow>& rows, std::ostream& out);

struct AnalyzeReport {
  OverheadParams params;
  double s0_flash = 0;
  double s1_flash = 0;
  std::optional<double> t_star_seconds;  // nullopt without an interior optimum
  std::optional<double> t_star_steps;
  std::optional<double> f_min;  // likewise
  int64_t brute_force_steps = 0;
  double f_brute_force = 0;
  double f_flash = 0;
  int64_t break_even_m = 0;
};

// `params.interval_steps` is ignored; the brute-force scan covers up to
// d / step_time steps.
AnalyzeReport Analyze(const OverheadParams& params, double s0_flash, double s1_flash);
std::string FormatAnalyzeReport(const AnalyzeReport& r);

}  // namespace flashrec

#endif  // FLASHREC_HARNESS_H_
