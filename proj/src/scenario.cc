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

#include <algorithm>
#include <bit>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "flashrec/error.h"
#include "flashrec/harness.h"
#include "flashrec/random.h"
#include "json.hpp"

namespace flashrec {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void Bad(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::kInvalidArgument, field + ": " + why);
}

[[noreturn]] void ParseFail(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::kParse, field + ": " + why);
}

// Reads object members with type checking; rejects unknown keys.
class Fields {
 public:
  Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) ParseFail(path_.empty() ? "document" : path_, "expected object");
  }

  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.contains(key)) ParseFail(Path(key), "unknown field");
    }
  }

  template <typename T>
  void Int(const char* key, T& out) {
    if (const json* v = Find(key)) {
      if (!v->is_number_integer()) ParseFail(Path(key), "expected integer");
      out = static_cast<T>(v->get<int64_t>());
    }
  }

  void Double(const char* key, double& out) {
    if (const json* v = Find(key)) {
      if (!v->is_number()) ParseFail(Path(key), "expected number");
      out = v->get<double>();
    }
  }

  void Bool(const char* key, bool& out) {
    if (const json* v = Find(key)) {
      if (!v->is_boolean()) ParseFail(Path(key), "expected boolean");
      out = v->get<bool>();
    }
  }

  std::optional<std::string> String(const char* key) {
    const json* v = Find(key);
    if (!v) return std::nullopt;
    if (!v->is_string()) ParseFail(Path(key), "expected string");
    return v->get<std::string>();
  }

  const json* Find(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string Path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E>
E Lookup(const std::map<std::string, E>& table, const std::string& value,
         const std::string& field) {
  auto it = table.find(value);
  if (it == table.end()) ParseFail(field, "unknown value '" + value + "'");
  return it->second;
}

const std::map<std::string, RecoveryMode> kModes = {
    {"flash", RecoveryMode::kFlash}, {"checkpoint", RecoveryMode::kCheckpoint}};
const std::map<std::string, ClockMode> kClocks = {
    {"simulated", ClockMode::kSimulated}, {"real", ClockMode::kReal}};
const std::map<std::string, RankTableMode> kRankTableModes = {
    {"shared_file", RankTableMode::kSharedFile}, {"negotiate", RankTableMode::kNegotiate}};
const std::map<std::string, FaultPhase> kPhases = {
    {"ForwardBackward", FaultPhase::kForwardBackward},
    {"Optimizer", FaultPhase::kOptimizer},
    {"Random", FaultPhase::kRandom}};
const std::map<std::string, DetectionPath> kDetections = {
    {"auto", DetectionPath::kAuto},
    {"plugin", DetectionPath::kPlugin},
    {"heartbeat", DetectionPath::kHeartbeat}};

template <typename E>
std::string NameOf(const std::map<std::string, E>& table, E value) {
  for (const auto& [name, v] : table) {
    if (v == value) return name;
  }
  return "?";
}

void ParseTiming(const json& j, ScenarioTiming& t) {
  Fields f(j, "timing");
  f.Int("forward", t.step.forward);
  f.Int("backward", t.step.backward);
  f.Int("optimizer", t.step.optimizer);
  f.Int("latency", t.latency);
  f.Int("heartbeat_period", t.heartbeat_period);
  f.Int("miss_threshold", t.miss_threshold);
  f.Int("optimizer_wait_timeout", t.optimizer_wait_timeout);
  f.Int("stop", t.stop);
  f.Int("recreate", t.recreate);
  f.Int("agent", t.agent);
  f.Int("store_connect", t.store_connect);
  f.Int("ranktable_file", t.ranktable_file);
  f.Int("negotiate_message", t.negotiate_message);
  f.Int("link", t.link);
  f.Int("copy", t.copy);
  f.Int("k0", t.k0);
  f.Int("k1", t.k1);
  f.Int("hang_timeout", t.hang_timeout);
  f.Int("checkpoint_load", t.checkpoint_load);
}

FaultSpec ParseFault(const json& j, const std::string& path) {
  FaultSpec fs;
  Fields f(j, path);
  f.Int("at_step", fs.at_step);
  if (auto v = f.String("phase")) fs.phase = Lookup(kPhases, *v, f.Path("phase"));
  if (auto v = f.String("target_node"); v && *v != "random") fs.target_node = *v;
  if (auto v = f.String("failure_class"); v && *v != "sampled") {
    fs.failure_class = ParseFailureClass(*v);
    if (!fs.failure_class) ParseFail(f.Path("failure_class"), "unknown value '" + *v + "'");
  }
  if (auto v = f.String("detection")) fs.detection = Lookup(kDetections, *v, f.Path("detection"));
  f.Bool("replacement_fails", fs.replacement_fails);
  return fs;
}

std::string Hex(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

}  // namespace

std::string_view RecoveryModeName(RecoveryMode m) {
  return m == RecoveryMode::kFlash ? "flash" : "checkpoint";
}

RankTableMode Scenario::effective_ranktable_mode() const {
  if (ranktable_mode) return *ranktable_mode;
  return mode == RecoveryMode::kFlash ? RankTableMode::kSharedFile : RankTableMode::kNegotiate;
}

void ValidateScenario(const Scenario& sc) {
  for (auto [name, v] : {std::pair{"topology.dp", sc.dp}, {"topology.tp", sc.tp},
                         {"topology.pp", sc.pp}, {"topology.zero", sc.zero},
                         {"n_nodes", sc.n_nodes}, {"devices_per_node", sc.devices_per_node},
                         {"store_parallelism", sc.store_parallelism}}) {
    if (v < 1) Bad(name, "must be >= 1");
  }
  if (static_cast<int64_t>(sc.n_nodes) * sc.devices_per_node != sc.world_size()) {
    Bad("n_nodes", std::to_string(sc.n_nodes) + " nodes x " +
                       std::to_string(sc.devices_per_node) + " devices != world size " +
                       std::to_string(sc.world_size()));
  }
  if (sc.horizon_steps < 1) Bad("horizon_steps", "must be >= 1");
  if (sc.checkpoint_interval < 0) Bad("checkpoint_interval", "must be >= 0");
  if (sc.mode == RecoveryMode::kCheckpoint && sc.checkpoint_interval < 1) {
    Bad("checkpoint_interval", "checkpoint mode needs an interval >= 1");
  }
  if (sc.spares < 0) Bad("spares", "must be >= 0");
  const int shards = sc.tp * sc.pp * sc.zero;
  if (sc.workload.param_len < shards) {
    Bad("workload.param_len", "fewer parameters than shards");
  }
  if (sc.workload.batch_size < 1) Bad("workload.batch_size", "must be >= 1");
  const ScenarioTiming& t = sc.timing;
  for (auto [name, v] : {std::pair{"timing.forward", t.step.forward},
                         {"timing.backward", t.step.backward},
                         {"timing.optimizer", t.step.optimizer},
                         {"timing.latency", t.latency},
                         {"timing.heartbeat_period", t.heartbeat_period},
                         {"timing.hang_timeout", t.hang_timeout}}) {
    if (v < 1) Bad(name, "must be >= 1");
  }
  for (auto [name, v] : {std::pair{"timing.stop", t.stop}, {"timing.recreate", t.recreate},
                         {"timing.agent", t.agent}, {"timing.store_connect", t.store_connect},
                         {"timing.ranktable_file", t.ranktable_file},
                         {"timing.negotiate_message", t.negotiate_message},
                         {"timing.link", t.link}, {"timing.copy", t.copy},
                         {"timing.k0", t.k0}, {"timing.k1", t.k1},
                         {"timing.optimizer_wait_timeout", t.optimizer_wait_timeout},
                         {"timing.checkpoint_load", t.checkpoint_load}}) {
    if (v < 0) Bad(name, "must be >= 0");
  }
  if (t.miss_threshold < 1) Bad("timing.miss_threshold", "must be >= 1");
  // A healthy rank's beats arrive up to latency + period apart.
  if (t.miss_threshold * t.heartbeat_period <= t.latency + t.heartbeat_period) {
    Bad("timing.miss_threshold", "miss window must exceed latency + heartbeat period");
  }
  for (size_t k = 0; k < sc.faults.size(); ++k) {
    const FaultSpec& f = sc.faults[k];
    const std::string path = "faults[" + std::to_string(k) + "]";
    if (f.at_step < 0 || f.at_step >= sc.horizon_steps) {
      Bad(path + ".at_step", "must lie in [0, horizon_steps)");
    }
    if (f.target_node) {
      bool found = false;
      for (int n = 0; n < sc.n_nodes && !found; ++n) found = NodeName(n) == *f.target_node;
      if (!found) Bad(path + ".target_node", "no node named '" + *f.target_node + "'");
    }
  }
}

Scenario ParseScenario(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    ParseFail("document", e.what());
  }
  Scenario sc;
  {
    Fields f(j, "");
    if (auto v = f.String("id")) sc.id = *v;
    f.Int("seed", sc.seed);
    if (const json* topo = f.Find("topology")) {
      Fields t(*topo, "topology");
      t.Int("dp", sc.dp);
      t.Int("tp", sc.tp);
      t.Int("pp", sc.pp);
      t.Int("zero", sc.zero);
    }
    f.Int("n_nodes", sc.n_nodes);
    f.Int("devices_per_node", sc.devices_per_node);
    f.Int("horizon_steps", sc.horizon_steps);
    if (auto v = f.String("mode")) sc.mode = Lookup(kModes, *v, "mode");
    f.Int("checkpoint_interval", sc.checkpoint_interval);
    if (auto v = f.String("clock_mode")) sc.clock_mode = Lookup(kClocks, *v, "clock_mode");
    f.Int("store_parallelism", sc.store_parallelism);
    if (auto v = f.String("ranktable_mode")) {
      sc.ranktable_mode = Lookup(kRankTableModes, *v, "ranktable_mode");
    }
    f.Int("spares", sc.spares);
    if (const json* w = f.Find("workload")) {
      Fields wf(*w, "workload");
      wf.Int("param_len", sc.workload.param_len);
      wf.Int("batch_size", sc.workload.batch_size);
      wf.Double("learning_rate", sc.workload.learning_rate);
      wf.Double("momentum", sc.workload.momentum);
    }
    if (const json* t = f.Find("timing")) ParseTiming(*t, sc.timing);
    if (const json* faults = f.Find("faults")) {
      if (!faults->is_array()) ParseFail("faults", "expected array");
      for (size_t k = 0; k < faults->size(); ++k) {
        sc.faults.push_back(ParseFault((*faults)[k], "faults[" + std::to_string(k) + "]"));
      }
    }
  }
  sc.workload.seed = sc.seed;
  ValidateScenario(sc);
  return sc;
}

Scenario LoadScenarioFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ParseScenario(ss.str());
}

std::string ScenarioToJson(const Scenario& sc) {
  ordered_json j;
  j["id"] = sc.id;
  j["seed"] = sc.seed;
  j["topology"] = {{"dp", sc.dp}, {"tp", sc.tp}, {"pp", sc.pp}, {"zero", sc.zero}};
  j["n_nodes"] = sc.n_nodes;
  j["devices_per_node"] = sc.devices_per_node;
  j["horizon_steps"] = sc.horizon_steps;
  j["mode"] = NameOf(kModes, sc.mode);
  j["checkpoint_interval"] = sc.checkpoint_interval;
  j["clock_mode"] = NameOf(kClocks, sc.clock_mode);
  j["store_parallelism"] = sc.store_parallelism;
  if (sc.ranktable_mode) j["ranktable_mode"] = NameOf(kRankTableModes, *sc.ranktable_mode);
  j["spares"] = sc.spares;
  j["workload"] = {{"param_len", sc.workload.param_len},
                   {"batch_size", sc.workload.batch_size},
                   {"learning_rate", sc.workload.learning_rate},
                   {"momentum", sc.workload.momentum}};
  const ScenarioTiming& t = sc.timing;
  j["timing"] = {{"forward", t.step.forward},
                 {"backward", t.step.backward},
                 {"optimizer", t.step.optimizer},
                 {"latency", t.latency},
                 {"heartbeat_period", t.heartbeat_period},
                 {"miss_threshold", t.miss_threshold},
                 {"optimizer_wait_timeout", t.optimizer_wait_timeout},
                 {"stop", t.stop},
                 {"recreate", t.recreate},
                 {"agent", t.agent},
                 {"store_connect", t.store_connect},
                 {"ranktable_file", t.ranktable_file},
                 {"negotiate_message", t.negotiate_message},
                 {"link", t.link},
                 {"copy", t.copy},
                 {"k0", t.k0},
                 {"k1", t.k1},
                 {"hang_timeout", t.hang_timeout},
                 {"checkpoint_load", t.checkpoint_load}};
  j["faults"] = ordered_json::array();
  for (const auto& f : sc.faults) {
    ordered_json fj;
    fj["at_step"] = f.at_step;
    fj["phase"] = NameOf(kPhases, f.phase);
    fj["target_node"] = f.target_node.value_or("random");
    fj["failure_class"] =
        f.failure_class ? std::string(FailureClassName(*f.failure_class)) : "sampled";
    fj["detection"] = NameOf(kDetections, f.detection);
    fj["replacement_fails"] = f.replacement_fails;
    j["faults"].push_back(fj);
  }
  return j.dump(2);
}

Scenario ResizeScenario(const Scenario& base, int n_devices) {
  const int per_replica = base.tp * base.pp * base.zero;
  if (n_devices < 1 || n_devices % per_replica != 0 ||
      n_devices % base.devices_per_node != 0) {
    Bad("sizes", std::to_string(n_devices) + " devices is not a multiple of the replica size (" +
                     std::to_string(per_replica) + ") and devices per node (" +
                     std::to_string(base.devices_per_node) + ")");
  }
  Scenario sc = base;
  sc.dp = n_devices / per_replica;
  sc.n_nodes = n_devices / base.devices_per_node;
  sc.id = base.id + "-n" + std::to_string(n_devices);
  ValidateScenario(sc);
  return sc;
}

std::string MetricsHeader() {
  return "scenario_id,n_devices,failure_step,failure_phase,failure_class,detection_ticks,"
         "restart_ticks,redone_steps,total_ticks,mode,loss_digest";
}

std::string MetricsToCsv(const MetricsRow& r) {
  std::ostringstream out;
  out << r.scenario_id << ',' << r.n_devices << ',' << r.failure_step << ',' << r.failure_phase
      << ',' << r.failure_class << ',' << r.detection_ticks << ',' << r.restart_ticks << ','
      << r.redone_steps << ',' << r.total_ticks << ',' << r.mode << ',' << r.loss_digest;
  return out.str();
}

void WriteMetricsCsv(const std::vector<MetricsRow>& rows, std::ostream& out) {
  out << MetricsHeader() << '\n';
  for (const auto& r : rows) out << MetricsToCsv(r) << '\n';
}

std::string LossDigest(const std::vector<double>& losses) {
  uint64_t h = HashCombine({losses.size()});
  for (double v : losses) h = SplitMix64(h ^ std::bit_cast<uint64_t>(v));
  return Hex(h);
}

std::vector<SweepRow> SweepScale(const Scenario& base, const std::vector<int>& n_devices) {
  if (n_devices.size() < 2) Bad("sizes", "a sweep needs at least two sizes");
  RunObserver quiet;
  quiet.capture_event_log = false;
  std::vector<SweepRow> rows;
  for (int n : n_devices) {
    for (RecoveryMode mode : {RecoveryMode::kFlash, RecoveryMode::kCheckpoint}) {
      Scenario sc = ResizeScenario(base, n);
      sc.mode = mode;
      sc.ranktable_mode.reset();
      if (mode == RecoveryMode::kCheckpoint && sc.checkpoint_interval < 1) {
        sc.checkpoint_interval = std::max<int64_t>(1, sc.horizon_steps / 2);
      }
      if (mode == RecoveryMode::kFlash) sc.checkpoint_interval = 0;
      const ScenarioResult res = RunScenario(sc, quiet);
      SweepRow row;
      row.n_devices = n;
      row.mode = mode;
      for (const auto& m : res.rows) {
        if (m.failure_phase == "summary") continue;
        row.detection_ticks += m.detection_ticks;
        row.restart_ticks += m.restart_ticks;
      }
      row.total_ticks = res.finished_at;
      row.store_rounds = res.store_rounds;
      row.ranktable_messages = res.ranktable_messages;
      row.recreated_nodes = res.recreated_nodes;
      row.loss_digest = res.loss_digest;
      rows.push_back(row);
    }
  }
  return rows;
}

void WriteSweepCsv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "n_devices,mode,detection_ticks,restart_ticks,total_ticks,store_rounds,"
         "ranktable_messages,recreated_nodes,loss_digest\n";
  for (const auto& r : rows) {
    out << r.n_devices << ',' << RecoveryModeName(r.mode) << ',' << r.detection_ticks << ','
        << r.restart_ticks << ',' << r.total_ticks << ',' << r.store_rounds << ','
        << r.ranktable_messages << ',' << r.recreated_nodes << ',' << r.loss_digest << '\n';
  }
}

void WriteSweepPlotData(const std::vector<SweepRow>& rows, std::ostream& out) {
  for (RecoveryMode mode : {RecoveryMode::kFlash, RecoveryMode::kCheckpoint}) {
    out << "# series " << RecoveryModeName(mode) << ": n_devices restart_ticks\n";
    for (const auto& r : rows) {
      if (r.mode == mode) out << r.n_devices << ' ' << r.restart_ticks << '\n';
    }
  }
}

AnalyzeReport Analyze(const OverheadParams& params, double s0_flash, double s1_flash) {
  AnalyzeReport r;
  r.params = params;
  r.params.interval_steps = 1;
  Validate(r.params);
  r.s0_flash = s0_flash;
  r.s1_flash = s1_flash;
  try {
    r.t_star_seconds = OptimalInterval(r.params);
    r.t_star_steps = *r.t_star_seconds / r.params.step_time;
    r.f_min = FMin(r.params);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNoInteriorOptimum) throw;
  }
  const auto t_max = std::max<int64_t>(
      1, static_cast<int64_t>(std::floor(r.params.d / r.params.step_time)));
  r.brute_force_steps = BruteForceOptimal(r.params, t_max);
  OverheadParams at = r.params;
  at.interval_steps = r.brute_force_steps;
  r.f_brute_force = FTotal(at);
  r.f_flash = FFlash(r.params.m, s0_flash, s1_flash);
  r.break_even_m = BreakEvenFailures(r.params.d, r.params.k0, r.params.s0, s0_flash, s1_flash);
  return r;
}

std::string FormatAnalyzeReport(const AnalyzeReport& r) {
  std::ostringstream out;
  out.precision(10);
  const OverheadParams& p = r.params;
  out << "inputs: d=" << p.d << " s m=" << p.m << " s0=" << p.s0 << " s k0=" << p.k0
      << " s step_time=" << p.step_time << " s\n";
  if (r.t_star_seconds) {
    out << "t*: " << *r.t_star_seconds << " s (" << *r.t_star_steps << " steps)\n";
  } else {
    out << "t*: none (cost is monotone in the interval)\n";
  }
  if (r.f_min) out << "F_min: " << *r.f_min << " s\n";
  out << "brute force: " << r.brute_force_steps << " steps, F_total=" << r.f_brute_force
      << " s\n";
  if (r.t_star_steps) {
    const double gap = std::abs(static_cast<double>(r.brute_force_steps) -
                                std::round(*r.t_star_steps));
    out << "cross-check: |brute force - round(t*)| = " << gap << " steps ("
        << (gap <= 1 ? "ok" : "MISMATCH") << ")\n";
  }
  out << "F_flash: " << r.f_flash << " s (s0'=" << r.s0_flash << " s, s1'=" << r.s1_flash
      << " s)\n";
  out << "break-even m: ";
  if (r.break_even_m == std::numeric_limits<int64_t>::max()) {
    out << "flash cheaper for every m\n";
  } else {
    out << r.break_even_m << " (flash cheaper for m <= " << r.break_even_m << ")\n";
  }
  return out.str();
}

}  // namespace flashrec
