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

#include "flashrec/controller.h"

#include <algorithm>
#include <memory>

#include "flashrec/error.h"

namespace flashrec {
namespace {

std::string Join(const std::set<int64_t>& values) {
  std::string out;
  for (int64_t v : values) {
    if (!out.empty()) out += ", ";
    out += std::to_string(v);
  }
  return out;
}

}  // namespace

std::string_view FailurePhaseName(FailurePhase p) {
  return p == FailurePhase::kForwardBackward ? "ForwardBackward" : "OptimizerStep";
}

bool TagTransitionAllowed(const RankRecord& prev, int64_t next) {
  if (next == prev.last_tag) return true;
  if (prev.last_tag == kOptimizerTag) return next == prev.last_step + 1;
  return next == kOptimizerTag || next == prev.last_tag + 1;
}

StopDecision DecideStopMoment(const std::vector<int64_t>& healthy,
                              const std::vector<RankRecord>& faulty) {
  StopDecision d;
  int64_t i = -1;
  bool mid_optimizer = false;
  for (const auto& f : faulty) {
    i = std::max(i, f.last_step);
    mid_optimizer |= f.last_tag == kOptimizerTag;
  }
  if (healthy.empty()) {
    d.authorized = true;
    d.failure_step = d.resume_step = std::max<int64_t>(i, 0);
    return d;
  }
  std::set<int64_t> distinct;
  for (int64_t t : healthy) {
    if (t == kOptimizerTag) return d;
    distinct.insert(t);
  }
  if (distinct.size() > 1) {
    throw Error(ErrorCode::kProtocolViolation,
                "healthy step tags {" + Join(distinct) + "} are mixed with no rank at -1");
  }
  const int64_t j = *distinct.begin();
  if (i < 0) i = j;
  if (j == i && mid_optimizer) return d;  // healthy ranks still have to pass the optimizer
  if (j != i && j != i + 1) {
    throw Error(ErrorCode::kProtocolViolation,
                "healthy ranks at step " + std::to_string(j) + " but failed ranks were at " +
                    std::to_string(i));
  }
  d.authorized = true;
  d.failure_step = i;
  d.resume_step = j;
  d.phase = j == i ? FailurePhase::kForwardBackward : FailurePhase::kOptimizerStep;
  return d;
}

Controller::Controller(ControllerConfig cfg, const RankTable& rt) : cfg_(cfg) {
  if (cfg_.heartbeat_period < 1 || cfg_.miss_threshold < 1) {
    throw Error(ErrorCode::kInvalidArgument, "heartbeat period and miss threshold must be >= 1");
  }
  for (const auto& e : rt.entries()) {
    RankRecord r;
    r.node_id = e.node_id;
    r.device_id = e.device_id;
    records_.push_back(r);
    rank_of_device_[{e.node_id, e.device_id}] = e.rank;
  }
}

const RankRecord& Controller::record(int rank) const {
  if (rank < 0 || rank >= world_size()) {
    throw Error(ErrorCode::kNotFound, "rank " + std::to_string(rank) + " is not registered");
  }
  return records_[rank];
}

void Controller::IngestHeartbeat(const HeartbeatRecord& hb, Tick now) {
  record(hb.rank);
  RankRecord& r = records_[hb.rank];
  if (r.failed || r.node_id != hb.node_id) return;
  if (r.seen && !TagTransitionAllowed(r, hb.step_tag)) {
    Declare(hb.rank, FailureKind::kProtocolViolation, FailureClass::kUnclassified, r.device_id,
            hb.sent_at, now);
    return;
  }
  r.seen = true;
  r.last_tag = hb.step_tag;
  if (hb.step_tag >= 0) r.last_step = hb.step_tag;
  r.phase = hb.phase;
  r.last_sent_at = std::max(r.last_sent_at, hb.sent_at);
}

void Controller::IngestPluginReport(const PluginReport& report, Tick now) {
  for (const auto& d : report.devices) {
    if (d.ok) continue;
    auto it = rank_of_device_.find({report.node_id, d.device_id});
    if (it == rank_of_device_.end() || records_[it->second].failed) continue;
    Declare(it->second, FailureKind::kPluginReport, d.failure_class, d.device_id,
            report.reported_at, now);
  }
}

void Controller::ReportProcessExit(int rank, Tick now) {
  DeclareFailed(rank, FailureKind::kProcessExit, now);
}

void Controller::DeclareFailed(int rank, FailureKind kind, Tick now) {
  const RankRecord& r = record(rank);
  if (r.failed) return;
  Declare(rank, kind, FailureClass::kUnclassified, r.device_id, now, now);
}

void Controller::Declare(int rank, FailureKind kind, FailureClass cls, int device,
                         Tick evidence, Tick now) {
  RankRecord& r = records_[rank];
  r.failed = true;
  FailureEvent e;
  e.node_id = r.node_id;
  e.device_id = device;
  e.rank = rank;
  e.kind = kind;
  e.failure_class = cls;
  e.evidence_at = evidence;
  e.detected_at = now;
  pending_.push_back(std::move(e));
}

std::vector<FailureEvent> Controller::DetectFailures(Tick now) {
  const Tick limit = cfg_.heartbeat_period * cfg_.miss_threshold;
  for (int rank = 0; rank < world_size(); ++rank) {
    RankRecord& r = records_[rank];
    if (!r.failed && now - r.last_sent_at >= limit) {
      Declare(rank, FailureKind::kHeartbeatMiss, FailureClass::kUnclassified, r.device_id,
              r.last_sent_at, now);
    }
  }
  return TakeDeclared();
}

std::vector<FailureEvent> Controller::TakeDeclared() {
  std::vector<FailureEvent> out;
  out.swap(pending_);
  return out;
}

void Controller::StartWatching(Tick now) {
  for (auto& r : records_) {
    if (!r.seen) r.last_sent_at = now;
  }
}

void Controller::Reregister(int rank, const std::string& node_id, int64_t tag, Tick now) {
  record(rank);
  RankRecord& r = records_[rank];
  rank_of_device_.erase({r.node_id, r.device_id});
  r.node_id = node_id;
  r.last_tag = tag;
  r.last_step = tag;
  r.phase = HeartbeatPhase::kIdle;
  r.last_sent_at = now;
  r.failed = false;
  r.seen = true;
  rank_of_device_[{r.node_id, r.device_id}] = rank;
}

std::set<int> Controller::FailedRanks() const {
  std::set<int> out;
  for (int rank = 0; rank < world_size(); ++rank) {
    if (records_[rank].failed) out.insert(rank);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string_view RecoveryActionName(RecoveryActionKind k) {
  switch (k) {
    case RecoveryActionKind::kStop:
      return "Stop";
    case RecoveryActionKind::kClean:
      return "Clean";
    case RecoveryActionKind::kReset:
      return "Reset";
    case RecoveryActionKind::kRecreate:
      return "Recreate";
    case RecoveryActionKind::kRestore:
      return "Restore";
    case RecoveryActionKind::kRollback:
      return "Rollback";
    case RecoveryActionKind::kContinue:
      return "Continue";
  }
  return "?";
}

SparePool SparePool::Named(int count) {
  std::vector<std::string> names;
  for (int i = 0; i < count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "spare-%04d", i);
    names.emplace_back(buf);
  }
  return SparePool(std::move(names));
}

std::string SparePool::Acquire() {
  if (spares_.empty()) throw Error(ErrorCode::kResourceExhausted, "spare pool is empty");
  std::string s = std::move(spares_.front());
  spares_.pop_front();
  return s;
}

std::vector<RecoveryAction> RecoveryPlan::ActionsOf(RecoveryActionKind k) const {
  std::vector<RecoveryAction> out;
  for (const auto& a : actions) {
    if (a.kind == k) out.push_back(a);
  }
  return out;
}

RecoveryPlan PlanRecovery(const StopDecision& decision, const std::set<int>& failed_ranks,
                          const ParallelTopology& topo, const RankTable& rt,
                          SparePool& spares) {
  if (topo.world_size() != rt.world_size()) {
    throw Error(ErrorCode::kInvalidArgument, "topology and ranktable disagree on world size");
  }
  RecoveryPlan plan;
  plan.failure_step = decision.failure_step;
  plan.resume_step = decision.resume_step;
  plan.failure_phase = decision.phase;
  for (int r : failed_ranks) plan.faulty_nodes.insert(rt.entry(r).node_id);
  for (const auto& node : plan.faulty_nodes) {
    for (int r : rt.RanksOnNode(node)) plan.faulty_ranks.insert(r);
  }

  const RecoverabilityVerdict verdict = CheckRecoverability(topo, plan.faulty_ranks);
  if (!verdict.recoverable) {
    std::string lost;
    for (const auto& s : verdict.lost_shards) lost += (lost.empty() ? "" : " ") + s.ToString();
    throw Error(ErrorCode::kNotRecoverable, "no surviving replica of " + lost);
  }
  if (spares.available() < plan.faulty_nodes.size()) {
    throw Error(ErrorCode::kResourceExhausted,
                std::to_string(plan.faulty_nodes.size()) + " faulty nodes but " +
                    std::to_string(spares.available()) + " spares");
  }
  plan.donor_map = verdict.donor_map;
  for (const auto& node : plan.faulty_nodes) {
    const std::string spare = spares.Acquire();
    plan.replacements[node] = spare;
    plan.replacement_nodes.insert(spare);
  }
  plan.ranktable_after = ReplaceNodes(rt, plan.replacements);
  plan.ranktable_version_after = plan.ranktable_after.version();

  for (const auto& node : rt.Nodes()) {
    if (plan.faulty_nodes.contains(node)) continue;
    for (auto k : {RecoveryActionKind::kStop, RecoveryActionKind::kClean,
                   RecoveryActionKind::kReset}) {
      plan.actions.push_back({k, node, -1, -1, 0, ""});
    }
  }
  for (const auto& [node, spare] : plan.replacements) {
    plan.actions.push_back({RecoveryActionKind::kRecreate, node, -1, -1, 0, spare});
  }
  for (const auto& [rank, donor] : plan.donor_map) {
    plan.actions.push_back({RecoveryActionKind::kRestore,
                            plan.ranktable_after.entry(rank).node_id, rank, donor,
                            plan.resume_step, ""});
  }
  for (const auto& e : plan.ranktable_after.entries()) {
    plan.actions.push_back(
        {RecoveryActionKind::kRollback, e.node_id, e.rank, -1, plan.resume_step, ""});
  }
  for (const auto& node : plan.ranktable_after.Nodes()) {
    plan.actions.push_back(
        {RecoveryActionKind::kContinue, node, -1, -1, plan.resume_step, ""});
  }
  return plan;
}

// ---------------------------------------------------------------------------

void PublishRankTable(const RankTable& rt, const std::filesystem::path& shared_path) {
  if (std::filesystem::exists(shared_path)) {
    const RankTable current = ReadRankTableFile(shared_path);
    if (rt.version() <= current.version()) {
      throw Error(ErrorCode::kStaleVersion,
                  "ranktable v" + std::to_string(rt.version()) + " is not newer than v" +
                      std::to_string(current.version()) + " in " + shared_path.string());
    }
  }
  WriteRankTableFile(rt, shared_path);
}

void SharedRankTable::Publish(const RankTable& rt) {
  if (current_ && rt.version() <= current_->version()) {
    throw Error(ErrorCode::kStaleVersion,
                "ranktable v" + std::to_string(rt.version()) + " is not newer than v" +
                    std::to_string(current_->version()));
  }
  if (path_) PublishRankTable(rt, *path_);
  current_ = rt;
}

RankTable SharedRankTable::Load() {
  if (!current_) throw Error(ErrorCode::kNotFound, "no ranktable published");
  ++loads_;
  return path_ ? ReadRankTableFile(*path_) : *current_;
}

void NegotiateRankTable(SimCluster& cluster, const EndpointId& master,
                        const std::vector<EndpointId>& workers, Tick per_message,
                        std::function<void()> done) {
  EventLoop& loop = cluster.loop();
  const Tick start = loop.now();
  const auto n = static_cast<Tick>(workers.size());
  Message collect;
  collect.type = "rt-collect";
  for (const auto& w : workers) cluster.Send(w, master, collect);
  loop.Schedule(start + n * per_message, [&cluster, master, workers] {
    Message distribute;
    distribute.type = "rt-distribute";
    for (const auto& w : workers) cluster.Send(master, w, distribute);
  });
  loop.Schedule(start + 2 * n * per_message, std::move(done));
}

// ---------------------------------------------------------------------------

SimController::SimController(EventLoop& loop, SimCluster& cluster, EndpointId self,
                             ControllerConfig cfg, ParallelTopology topo, RankTable rt,
                             SparePool spares, RecoveryBackend& backend,
                             SimControllerHooks hooks)
    : loop_(loop),
      cluster_(cluster),
      self_(std::move(self)),
      controller_(cfg, rt),
      topo_(topo),
      rt_(std::move(rt)),
      spares_(std::move(spares)),
      backend_(backend),
      hooks_(std::move(hooks)) {}

void SimController::Start() {
  cluster_.Register(self_, [this](const Message& m) { OnMessage(m); });
  controller_.StartWatching(loop_.now());
  const uint64_t e = ++sweep_epoch_;
  loop_.ScheduleAfter(1, [this, e] { Sweep(e); });
}

void SimController::OnMessage(const Message& m) {
  if (m.type == "heartbeat") {
    controller_.IngestHeartbeat(DecodeHeartbeat(m), loop_.now());
  } else if (m.type == "plugin") {
    controller_.IngestPluginReport(DecodePluginReport(m), loop_.now());
  } else {
    return;
  }
  Absorb(controller_.TakeDeclared());
  if (!batch_.empty() && !decision_) ScheduleEvaluate();
}

void SimController::Sweep(uint64_t epoch) {
  if (epoch != sweep_epoch_) return;
  Absorb(controller_.DetectFailures(loop_.now()));
  if (wait_deadline_ && !decision_ && loop_.now() >= *wait_deadline_) {
    // Healthy ranks that never left the optimizer are treated as failed.
    wait_deadline_.reset();
    const std::set<int> failed = controller_.FailedRanks();
    std::set<std::string> nodes;
    for (int r : failed) nodes.insert(rt_.entry(r).node_id);
    for (int r = 0; r < controller_.world_size(); ++r) {
      if (!nodes.contains(rt_.entry(r).node_id) &&
          controller_.record(r).last_tag == kOptimizerTag) {
        controller_.DeclareFailed(r, FailureKind::kProtocolViolation, loop_.now());
      }
    }
    Absorb(controller_.TakeDeclared());
  }
  loop_.ScheduleAfter(1, [this, epoch] { Sweep(epoch); });
}

void SimController::Absorb(std::vector<FailureEvent> events) {
  if (plan_) {
    std::erase_if(events, [this](const FailureEvent& e) {
      return plan_->faulty_ranks.contains(e.rank);
    });
  }
  if (events.empty()) return;
  const bool executing = decision_.has_value();
  for (auto& e : events) {
    if (cluster_.log()) {
      cluster_.log()->Record(loop_.now(), "failure-detected", e.node_id, self_.ToString(),
                             std::string(FailureKindName(e.kind)) + " rank=" +
                                 std::to_string(e.rank));
    }
    batch_.push_back(std::move(e));
  }
  if (executing) {
    Replan({});
  } else {
    ScheduleEvaluate();
  }
}

void SimController::ScheduleEvaluate() {
  if (evaluate_scheduled_) return;
  evaluate_scheduled_ = true;
  // Same tick, after anything already queued for it.
  loop_.Schedule(loop_.now(), [this] {
    evaluate_scheduled_ = false;
    Evaluate();
  });
}

void SimController::Evaluate() {
  if (decision_ || batch_.empty()) return;
  std::set<std::string> faulty_nodes;
  for (int r : controller_.FailedRanks()) faulty_nodes.insert(rt_.entry(r).node_id);
  std::vector<int64_t> healthy;
  std::vector<RankRecord> faulty;
  for (int r = 0; r < controller_.world_size(); ++r) {
    if (faulty_nodes.contains(rt_.entry(r).node_id)) {
      faulty.push_back(controller_.record(r));
    } else {
      healthy.push_back(controller_.record(r).last_tag);
    }
  }
  const StopDecision d = DecideStopMoment(healthy, faulty);
  if (!d.authorized) {
    if (!wait_deadline_) wait_deadline_ = loop_.now() + controller_.config().optimizer_wait_timeout;
    return;
  }
  wait_deadline_.reset();
  decision_ = d;
  authorized_at_ = loop_.now();
  if (cluster_.log()) {
    cluster_.log()->Record(loop_.now(), "stop-authorized", self_.ToString(), "-",
                           std::string(FailurePhaseName(d.phase)) +
                               " resume=" + std::to_string(d.resume_step));
  }
  if (hooks_.on_authorized) hooks_.on_authorized(d, healthy);
  Replan({});
}

void SimController::Replan(const std::set<std::string>& extra_nodes) {
  const Tick now = loop_.now();
  for (const auto& node : extra_nodes) {
    if (!rt_.HasNode(node)) continue;  // a spare: simply not returned to the pool
    for (int r : rt_.RanksOnNode(node)) {
      controller_.DeclareFailed(r, FailureKind::kProcessExit, now);
    }
  }
  for (auto& e : controller_.TakeDeclared()) batch_.push_back(std::move(e));
  if (plan_) {
    for (const auto& [node, spare] : plan_->replacements) {
      if (!extra_nodes.contains(spare)) spares_.Release(spare);
    }
    plan_.reset();
  }
  ++exec_gen_;
  try {
    // An abandoned plan may already have published its version.
    const RankTable base =
        version_floor_ > rt_.version() ? RankTable(version_floor_, rt_.entries()) : rt_;
    RecoveryPlan plan = PlanRecovery(*decision_, controller_.FailedRanks(), topo_, base, spares_);
    version_floor_ = plan.ranktable_version_after;
    // Node-mates of a declared rank are covered by the plan already.
    for (int r : plan.faulty_ranks) controller_.MarkFailed(r);
    Execute(std::move(plan));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNotRecoverable && e.code() != ErrorCode::kResourceExhausted) {
      throw;
    }
    const std::set<int> failed = controller_.FailedRanks();
    const int64_t step = decision_->failure_step;
    Stop();
    if (cluster_.log()) {
      cluster_.log()->Record(now, "unrecoverable", self_.ToString(), "-", e.what());
    }
    if (hooks_.on_unrecoverable) hooks_.on_unrecoverable(e, failed, step);
  }
}

void SimController::Execute(RecoveryPlan plan) {
  ++plans_issued_;
  const uint64_t gen = ++exec_gen_;
  plan_ = std::move(plan);
  if (cluster_.log()) {
    cluster_.log()->Record(loop_.now(), "plan", self_.ToString(), "-",
                           "v" + std::to_string(plan_->ranktable_version_after) +
                               " recreate=" + std::to_string(plan_->faulty_nodes.size()));
  }
  const Tick t0 = loop_.now();
  auto failed = [this, gen](const std::set<std::string>& nodes) {
    if (Live(gen)) Replan(nodes);
  };
  auto restore = [this, gen, failed] {
    const Tick t = loop_.now();
    backend_.Restore(*plan_, [this, gen, t] {
      if (!Live(gen)) return;
      phases_.restore = loop_.now() - t;
      const Tick t2 = loop_.now();
      backend_.Continue(*plan_, [this, gen, t2] {
        if (!Live(gen)) return;
        phases_.resume = loop_.now() - t2;
        Finish(gen);
      });
    }, failed);
  };
  auto after_join = [this, gen, t0, restore] {
    phases_.suspend_recreate = loop_.now() - t0;
    const Tick t1 = loop_.now();
    backend_.EstablishStore(*plan_, [this, gen, t1, restore] {
      if (!Live(gen)) return;
      phases_.store = loop_.now() - t1;
      const Tick t2 = loop_.now();
      backend_.DistributeRankTable(*plan_, [this, gen, t2, restore] {
        if (!Live(gen)) return;
        phases_.ranktable = loop_.now() - t2;
        const Tick t3 = loop_.now();
        backend_.FormGroups(*plan_, [this, gen, t3, restore] {
          if (!Live(gen)) return;
          phases_.groups = loop_.now() - t3;
          restore();
        });
      });
    });
  };
  // Healthy suspension and faulty recreation run concurrently.
  auto pending = std::make_shared<int>(2);
  auto joined = [this, gen, pending, after_join] {
    if (Live(gen) && --*pending == 0) after_join();
  };
  backend_.Suspend(*plan_, joined);
  if (Live(gen)) backend_.Recreate(*plan_, joined, failed);
}

void SimController::Finish(uint64_t gen) {
  RecoveryReport r;
  r.plan = std::move(*plan_);
  r.failure_step = decision_->failure_step;
  r.failure_phase = decision_->phase;
  r.resume_step = decision_->resume_step;
  r.redone_steps = decision_->phase == FailurePhase::kForwardBackward ? 1 : 0;
  const auto first = std::min_element(
      batch_.begin(), batch_.end(),
      [](const FailureEvent& a, const FailureEvent& b) { return a.detected_at < b.detected_at; });
  r.failure_class = first->failure_class;
  r.detected_by = first->kind;
  r.detected_at = first->detected_at;
  r.evidence_at = first->evidence_at;
  for (const auto& e : batch_) r.evidence_at = std::min(r.evidence_at, e.evidence_at);
  r.authorized_at = authorized_at_;
  r.continued_at = loop_.now();
  r.plans_issued = plans_issued_;
  r.recreated_nodes = r.plan.faulty_nodes.size();
  phases_.wait = authorized_at_ - r.detected_at;
  r.phases = phases_;

  rt_ = r.plan.ranktable_after;
  for (int rank : r.plan.faulty_ranks) {
    controller_.Reregister(rank, rt_.entry(rank).node_id, r.resume_step, loop_.now());
  }
  batch_.clear();
  decision_.reset();
  plan_.reset();
  wait_deadline_.reset();
  plans_issued_ = 0;
  phases_ = {};
  ++exec_gen_;
  (void)gen;
  if (cluster_.log()) {
    cluster_.log()->Record(loop_.now(), "recovered", self_.ToString(), "-",
                           "resume=" + std::to_string(r.resume_step));
  }
  reports_.push_back(r);
  if (hooks_.on_recovered) hooks_.on_recovered(reports_.back());
}

}  // namespace flashrec
