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

// Global recovery service: failure detection from heartbeats and device
// plugin reports, the step-tag stop decision, recovery planning, plan
// execution and ranktable publication.

#ifndef FLASHREC_CONTROLLER_H_
#define FLASHREC_CONTROLLER_H_

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "flashrec/clock.h"
#include "flashrec/protocol.h"
#include "flashrec/topology.h"
#include "flashrec/transport.h"

namespace flashrec {

struct ControllerConfig {
  Tick heartbeat_period = 1;
  int miss_threshold = 3;
  // How long to wait for healthy ranks stuck at tag -1 before treating them
  // as failed too.
  Tick optimizer_wait_timeout = 20;
};

struct FailureEvent {
  std::string node_id;
  int device_id = 0;
  int rank = -1;
  FailureKind kind = FailureKind::kHeartbeatMiss;
  FailureClass failure_class = FailureClass::kUnclassified;
  Tick evidence_at = 0;
  Tick detected_at = 0;
};

enum class FailurePhase { kForwardBackward, kOptimizerStep };
std::string_view FailurePhaseName(FailurePhase p);

// What the controller last heard from one rank.
struct RankRecord {
  std::string node_id;
  int device_id = 0;
  int64_t last_tag = 0;
  int64_t last_step = 0;  // last non-negative tag
  HeartbeatPhase phase = HeartbeatPhase::kIdle;
  Tick last_sent_at = 0;
  bool failed = false;
  bool seen = false;  // the first beat may carry any tag
};

// Legal per-rank tag moves: repeat, i -> -1, -1 -> i+1, and i -> i+1 when
// the -1 beat was not sampled.
bool TagTransitionAllowed(const RankRecord& prev, int64_t next);

struct StopDecision {
  bool authorized = false;  // false: keep waiting
  FailurePhase phase = FailurePhase::kForwardBackward;
  int64_t failure_step = 0;  // i
  int64_t resume_step = 0;
};

// `healthy` are the latest tags of surviving ranks; `faulty` the records of
// failed ones. Waits while any healthy rank is mid-optimizer (-1) or, when
// a failed rank died inside the optimizer, until healthy ranks reach i+1.
// Throws kProtocolViolation on mixed {i, i+1} tags with no -1 present, or on
// tags inconsistent with the failed ranks' step.
StopDecision DecideStopMoment(const std::vector<int64_t>& healthy,
                              const std::vector<RankRecord>& faulty);

// Heartbeat registry and failure detector. Pure state; no I/O.
class Controller {
 public:
  Controller(ControllerConfig cfg, const RankTable& rt);

  // Throws kNotFound for an unregistered rank. An illegal tag move marks the
  // rank failed with kind kProtocolViolation. Beats from a node other than
  // the registered one (a stale or not-yet-registered process) are ignored.
  void IngestHeartbeat(const HeartbeatRecord& hb, Tick now);
  // Faulty devices are declared immediately.
  void IngestPluginReport(const PluginReport& r, Tick now);
  void ReportProcessExit(int rank, Tick now);
  // Declares rank failed by an external decision (e.g. optimizer-wait
  // timeout) with the given kind.
  void DeclareFailed(int rank, FailureKind kind, Tick now);

  // Adds heartbeat misses as of `now` and returns every failure declared
  // since the previous call.
  std::vector<FailureEvent> DetectFailures(Tick now);
  // Failures declared since the previous call, without a miss scan.
  std::vector<FailureEvent> TakeDeclared();

  // Marks rank failed without raising an event; used for ranks already
  // covered by a plan.
  void MarkFailed(int rank) { records_.at(rank).failed = true; }

  // Point `rank` at a replacement process, clearing the failed flag.
  void Reregister(int rank, const std::string& node_id, int64_t tag, Tick now);
  // Opens the miss window of every rank not heard from yet at `now`.
  void StartWatching(Tick now);

  const RankRecord& record(int rank) const;
  std::set<int> FailedRanks() const;
  int world_size() const { return static_cast<int>(records_.size()); }
  const ControllerConfig& config() const { return cfg_; }

 private:
  void Declare(int rank, FailureKind kind, FailureClass cls, int device, Tick evidence,
               Tick now);

  ControllerConfig cfg_;
  std::vector<RankRecord> records_;
  std::map<std::pair<std::string, int>, int> rank_of_device_;
  std::vector<FailureEvent> pending_;
};

// ---------------------------------------------------------------------------
// Planning

enum class RecoveryActionKind { kStop, kClean, kReset, kRecreate, kRestore, kRollback, kContinue };
std::string_view RecoveryActionName(RecoveryActionKind k);

struct RecoveryAction {
  RecoveryActionKind kind;
  std::string target;  // node id the action is sent to
  int rank = -1;       // kRestore: recipient; kRollback: the rank
  int donor = -1;      // kRestore only
  int64_t arg = 0;     // kRollback/kContinue: resume step
  std::string detail;  // kRecreate: spare node id

  bool operator==(const RecoveryAction&) const = default;
};

class SparePool {
 public:
  explicit SparePool(std::vector<std::string> spares) : spares_(spares.begin(), spares.end()) {}
  static SparePool Named(int count);  // "spare-0000", ...

  // Throws kResourceExhausted when empty.
  std::string Acquire();
  void Release(const std::string& node) { spares_.push_front(node); }
  size_t available() const { return spares_.size(); }

 private:
  std::deque<std::string> spares_;
};

struct RecoveryPlan {
  int64_t failure_step = 0;
  int64_t resume_step = 0;
  FailurePhase failure_phase = FailurePhase::kForwardBackward;
  std::set<int> faulty_ranks;  // every rank on a faulty node
  std::set<std::string> faulty_nodes;
  std::map<std::string, std::string> replacements;  // faulty node -> spare
  std::set<std::string> replacement_nodes;
  std::map<int, int> donor_map;
  std::vector<RecoveryAction> actions;
  RankTable ranktable_after;
  int64_t ranktable_version_after = 0;

  std::vector<RecoveryAction> ActionsOf(RecoveryActionKind k) const;
};

// Expands `failed_ranks` to whole nodes, checks recoverability and maps each
// faulty node to a spare. Throws kNotRecoverable when a shard has no
// surviving replica (the caller falls back to checkpoints) and
// kResourceExhausted when spares run out; no spare is consumed on error.
RecoveryPlan PlanRecovery(const StopDecision& decision, const std::set<int>& failed_ranks,
                          const ParallelTopology& topo, const RankTable& rt,
                          SparePool& spares);

// ---------------------------------------------------------------------------
// Ranktable distribution

// Atomically replaces the file. Throws kStaleVersion unless rt is newer than
// the table currently in the file.
void PublishRankTable(const RankTable& rt, const std::filesystem::path& shared_path);

// Shared-file distribution: one write by the controller, direct reads by
// workers, no messages. With no path the "file" lives in memory.
class SharedRankTable {
 public:
  explicit SharedRankTable(std::optional<std::filesystem::path> path = std::nullopt)
      : path_(std::move(path)) {}

  void Publish(const RankTable& rt);
  RankTable Load();
  int64_t version() const { return current_ ? current_->version() : 0; }
  uint64_t loads() const { return loads_; }
  // Messages exchanged with workers; always zero, exposed for assertions.
  uint64_t messages() const { return 0; }

 private:
  std::optional<std::filesystem::path> path_;
  std::optional<RankTable> current_;
  uint64_t loads_ = 0;
};

// Legacy negotiation: every worker sends its entry to the master, which
// answers each with the merged table, one message at a time. Calls `done`
// after all 2n messages were processed, `per_message` ticks apiece.
void NegotiateRankTable(SimCluster& cluster, const EndpointId& master,
                        const std::vector<EndpointId>& workers, Tick per_message,
                        std::function<void()> done);

// ---------------------------------------------------------------------------
// Execution

// Cluster side of plan execution. Each step calls done when finished;
// `failed` names nodes (spares or donors) that died during the step.
class RecoveryBackend {
 public:
  using Done = std::function<void()>;
  using Failed = std::function<void(const std::set<std::string>& nodes)>;

  virtual ~RecoveryBackend() = default;
  // Stop, Clean, Reset on every healthy node.
  virtual void Suspend(const RecoveryPlan& plan, Done done) = 0;
  // Faulty nodes onto spares, including their agents.
  virtual void Recreate(const RecoveryPlan& plan, Done done, Failed failed) = 0;
  virtual void EstablishStore(const RecoveryPlan& plan, Done done) = 0;
  virtual void DistributeRankTable(const RecoveryPlan& plan, Done done) = 0;
  virtual void FormGroups(const RecoveryPlan& plan, Done done) = 0;
  // Replica copies onto recreated ranks plus iterator rollback everywhere.
  virtual void Restore(const RecoveryPlan& plan, Done done, Failed failed) = 0;
  virtual void Continue(const RecoveryPlan& plan, Done done) = 0;
};

struct PhaseTicks {
  Tick wait = 0;  // detection until stop authorization
  Tick suspend_recreate = 0;
  Tick store = 0;
  Tick ranktable = 0;
  Tick groups = 0;
  Tick restore = 0;
  Tick resume = 0;
};

struct RecoveryReport {
  int64_t failure_step = 0;
  FailurePhase failure_phase = FailurePhase::kForwardBackward;
  FailureClass failure_class = FailureClass::kUnclassified;
  FailureKind detected_by = FailureKind::kHeartbeatMiss;
  Tick evidence_at = 0;
  Tick detected_at = 0;
  Tick authorized_at = 0;
  Tick continued_at = 0;
  int64_t resume_step = 0;
  int64_t redone_steps = 0;
  int plans_issued = 0;
  size_t recreated_nodes = 0;
  PhaseTicks phases;
  RecoveryPlan plan;

  Tick restart_ticks() const { return continued_at - detected_at; }
};

struct SimControllerHooks {
  // Fires at the moment a stop is authorized with the tags it was based on.
  std::function<void(const StopDecision&, const std::vector<int64_t>& healthy_tags)>
      on_authorized;
  std::function<void(const RecoveryReport&)> on_recovered;
  // Flash recovery impossible (lost shard or no spares).
  std::function<void(const Error&, const std::set<int>& faulty_ranks, int64_t failure_step)>
      on_unrecoverable;
};

// The controller as an actor on the simulated cluster: one endpoint, one
// queue, a detection sweep every tick, plans executed through a backend.
class SimController {
 public:
  SimController(EventLoop& loop, SimCluster& cluster, EndpointId self, ControllerConfig cfg,
                ParallelTopology topo, RankTable rt, SparePool spares,
                RecoveryBackend& backend, SimControllerHooks hooks = {});
  SimController(const SimController&) = delete;
  SimController& operator=(const SimController&) = delete;

  void Start();
  // Ends the detection sweep so the event loop can drain.
  void Stop() { ++sweep_epoch_; }

  const Controller& registry() const { return controller_; }
  const RankTable& ranktable() const { return rt_; }
  const EndpointId& endpoint() const { return self_; }
  bool recovering() const { return !batch_.empty(); }
  const std::vector<RecoveryReport>& reports() const { return reports_; }
  SparePool& spares() { return spares_; }

 private:
  void OnMessage(const Message& m);
  void Sweep(uint64_t epoch);
  void Absorb(std::vector<FailureEvent> events);
  void ScheduleEvaluate();
  void Evaluate();
  void Execute(RecoveryPlan plan);
  void Replan(const std::set<std::string>& extra_nodes);
  void Finish(uint64_t gen);
  bool Live(uint64_t gen) const { return gen == exec_gen_; }

  EventLoop& loop_;
  SimCluster& cluster_;
  EndpointId self_;
  Controller controller_;
  ParallelTopology topo_;
  RankTable rt_;
  SparePool spares_;
  RecoveryBackend& backend_;
  SimControllerHooks hooks_;

  uint64_t sweep_epoch_ = 0;
  // Failures of the recovery in progress; empty when idle.
  std::vector<FailureEvent> batch_;
  bool evaluate_scheduled_ = false;
  std::optional<Tick> wait_deadline_;
  std::optional<StopDecision> decision_;
  std::optional<RecoveryPlan> plan_;
  uint64_t exec_gen_ = 0;
  int64_t version_floor_ = 0;
  int plans_issued_ = 0;
  Tick authorized_at_ = 0;
  PhaseTicks phases_;
  std::vector<RecoveryReport> reports_;
};

}  // namespace flashrec

#endif  // FLASHREC_CONTROLLER_H_
