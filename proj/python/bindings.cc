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

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flashrec/error.h"
#include "flashrec/harness.h"
#include "flashrec/overhead_model.h"
#include "flashrec/transport.h"

namespace py = pybind11;

namespace flashrec {
namespace {

py::dict RowToDict(const MetricsRow& r) {
  py::dict d;
  d["scenario_id"] = r.scenario_id;
  d["n_devices"] = r.n_devices;
  d["failure_step"] = r.failure_step;
  d["failure_phase"] = r.failure_phase;
  d["failure_class"] = r.failure_class;
  d["detection_ticks"] = r.detection_ticks;
  d["restart_ticks"] = r.restart_ticks;
  d["redone_steps"] = r.redone_steps;
  d["total_ticks"] = r.total_ticks;
  d["mode"] = r.mode;
  d["loss_digest"] = r.loss_digest;
  return d;
}

py::dict RunScenarioJson(const std::string& text, bool capture_event_log) {
  const Scenario sc = ParseScenario(text);
  RunObserver obs;
  obs.capture_event_log = capture_event_log;
  ScenarioResult r;
  {
    py::gil_scoped_release release;
    r = RunScenario(sc, obs);
  }
  py::list rows;
  for (const auto& row : r.rows) rows.append(RowToDict(row));
  py::dict d;
  d["completed"] = r.status == ScenarioStatus::kCompleted;
  d["failure_reason"] = r.failure_reason;
  d["rows"] = rows;
  d["losses"] = r.losses;
  d["loss_digest"] = r.loss_digest;
  d["finished_at"] = r.finished_at;
  d["store_rounds"] = r.store_rounds;
  d["ranktable_messages"] = r.ranktable_messages;
  d["recreated_nodes"] = r.recreated_nodes;
  d["warnings"] = r.warnings;
  d["event_log"] = r.event_log;
  std::vector<MetricsRow> copy = r.rows;
  std::ostringstream csv;
  WriteMetricsCsv(copy, csv);
  d["csv"] = csv.str();
  return d;
}

py::list SweepJson(const std::string& text, const std::vector<int>& sizes) {
  const Scenario base = ParseScenario(text);
  std::vector<SweepRow> rows;
  {
    py::gil_scoped_release release;
    rows = SweepScale(base, sizes);
  }
  py::list out;
  for (const auto& r : rows) {
    py::dict d;
    d["n_devices"] = r.n_devices;
    d["mode"] = std::string(RecoveryModeName(r.mode));
    d["detection_ticks"] = r.detection_ticks;
    d["restart_ticks"] = r.restart_ticks;
    d["total_ticks"] = r.total_ticks;
    d["store_rounds"] = r.store_rounds;
    d["ranktable_messages"] = r.ranktable_messages;
    d["recreated_nodes"] = r.recreated_nodes;
    d["loss_digest"] = r.loss_digest;
    out.append(d);
  }
  return out;
}

OverheadParams Params(double d, int64_t m, double s0, double k0, double step_time,
                      int64_t interval_steps = 1) {
  OverheadParams p;
  p.d = d;
  p.m = m;
  p.s0 = s0;
  p.k0 = k0;
  p.step_time = step_time;
  p.interval_steps = interval_steps;
  return p;
}

}  // namespace
}  // namespace flashrec

PYBIND11_MODULE(_flashrec, m) {
  using namespace flashrec;
  m.doc() = "Checkpoint-free failure recovery simulator";

  static py::exception<Error> error(m, "FlashrecError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  m.def("run_scenario", &RunScenarioJson, py::arg("scenario_json"),
        py::arg("capture_event_log") = true,
        "Runs a scenario given as JSON text and returns its metrics.");
  m.def("sweep", &SweepJson, py::arg("scenario_json"), py::arg("sizes"));
  m.def("validate_scenario", [](const std::string& text) { ParseScenario(text); },
        py::arg("scenario_json"));
  m.def("metrics_header", &MetricsHeader);

  m.def(
      "optimal_interval",
      [](double d, int64_t mm, double k0) { return OptimalInterval(Params(d, mm, 0, k0, 1)); },
      py::arg("d"), py::arg("m"), py::arg("k0"));
  m.def(
      "f_min",
      [](double d, int64_t mm, double s0, double k0) { return FMin(Params(d, mm, s0, k0, 1)); },
      py::arg("d"), py::arg("m"), py::arg("s0"), py::arg("k0"));
  m.def(
      "f_total",
      [](double d, int64_t mm, double s0, double k0, double step_time, int64_t interval) {
        return FTotal(Params(d, mm, s0, k0, step_time, interval));
      },
      py::arg("d"), py::arg("m"), py::arg("s0"), py::arg("k0"), py::arg("step_time"),
      py::arg("interval_steps"));
  m.def(
      "brute_force_optimal",
      [](double d, int64_t mm, double s0, double k0, double step_time, int64_t t_max) {
        return BruteForceOptimal(Params(d, mm, s0, k0, step_time), t_max);
      },
      py::arg("d"), py::arg("m"), py::arg("s0"), py::arg("k0"), py::arg("step_time"),
      py::arg("t_max"));
  m.def("f_flash", &FFlash, py::arg("m"), py::arg("s0_flash"), py::arg("s1_flash"));
  m.def("cluster_success_prob", &ClusterSuccessProb, py::arg("p_fault"), py::arg("n"));
  m.def("dp_group_loss_prob", &DpGroupLossProb, py::arg("p_fault"), py::arg("dp_degree"));
  m.def("store_rounds", &StoreRounds, py::arg("n"), py::arg("p"));
  m.def(
      "analyze",
      [](double d, int64_t mm, double s0, double k0, double step_time,
         std::optional<double> s0_flash, std::optional<double> s1_flash) {
        return FormatAnalyzeReport(Analyze(Params(d, mm, s0, k0, step_time),
                                           s0_flash.value_or(s0),
                                           s1_flash.value_or(step_time)));
      },
      py::arg("d"), py::arg("m"), py::arg("s0"), py::arg("k0"), py::arg("step_time"),
      py::arg("s0_flash") = py::none(), py::arg("s1_flash") = py::none());
}
