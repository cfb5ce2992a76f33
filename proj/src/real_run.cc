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

// Wall-clock execution: one thread per worker plus a heartbeat thread each,
// the controller on the calling thread, one tick per millisecond. Control
// actions are direct calls; heartbeats and plugin reports travel through a
// ThreadedHub. Timing-dependent, so there is no reproducibility guarantee.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <thread>

#include "flashrec/error.h"
#include "flashrec/random.h"
#include "flashrec/threaded.h"
#include "src/run_internal.h"

namespace flashrec {
namespace {

using Ms = std::chrono::milliseconds;

class RealRun;

class RealWorker {
 public:
  // An idle worker reports `tag` until resumed.
  RealWorker(RealRun& run, int rank, EndpointId ep, ModelState state, bool idle, int64_t tag = 0);
  ~RealWorker();

  void Kill();
  // Parks the worker at its next phase boundary.
  void RequestStop();
  bool WaitIdle(Ms timeout);
  void Resume(ModelState state, ThreadedCollective* group);

  int rank() const { return rank_; }
  const EndpointId& endpoint() const { return ep_; }
  bool alive() const { return !dead_; }
  bool finished() const { return finished_; }
  ModelState Snapshot();
  TrainPhase phase() const { return phase_; }

 private:
  void Loop();
  void Beats();
  void SetTag(int64_t tag);
  void SendBeat();
  // Sleeps unless killed or stopped first; true if the phase may go on.
  bool Hold(Tick ticks);

  RealRun& run_;
  const int rank_;
  const EndpointId ep_;
  std::mutex mu_;
  std::condition_variable cv_;
  ModelState state_;
  ThreadedCollective* group_ = nullptr;
  bool running_ = false;
  bool idle_ = true;
  std::atomic<bool> dead_{false};
  std::atomic<bool> finished_{false};
  std::atomic<int64_t> tag_{0};
  std::atomic<TrainPhase> phase_{TrainPhase::kForward};
  std::atomic<HeartbeatPhase> hb_phase_{HeartbeatPhase::kIdle};
  std::thread loop_;
  std::thread beats_;
};

struct PendingKill {
  Tick at;
  size_t fault;
};

class RealRun {
 public:
  explicit RealRun(const Scenario& sc);
  ~RealRun();
  ScenarioResult Run();

  // Called from worker threads.
  Tick Now() const { return clock_.Now(); }
  const Scenario& scenario() const { return sc_; }
  ThreadedHub& hub() { return hub_; }
  const EndpointId& controller() const { return controller_ep_; }
  void OnPhase(int rank, int64_t step, TrainPhase phase);
  void OnStepDone(int rank, int64_t step, double loss);
  void OnFinished();

  ParamRange RangeOf(int rank) const;
  int ShardOf(int rank) const;
  int DpOf(int rank) const { return topo_.CoordsOf(rank).dp; }
  int replicas() const { return topo_.dp_degree(); }

 private:
  struct Fault {
    FaultSpec spec;
    std::string node;
    bool optimizer = false;
    FailureClass cls = FailureClass::kUnclassified;
    bool plugin = false;
    Tick offset = 0;
    bool triggered = false;
    Tick killed_at = -1;
  };

  void Log(std::string_view type, std::string_view src, std::string_view detail);
  void FireDue();
  void Recover(const StopDecision& decision, Tick detected_at);
  void Stop();

  Scenario sc_;
  Clock clock_ = Clock::Real();
  ParallelTopology topo_;
  RankTable rt_;
  ThreadedHub hub_;
  const EndpointId controller_ep_{"controller", 0};
  Controller registry_;
  SparePool spares_;
  std::unique_ptr<ThreadedCollective> group_;
  std::vector<std::unique_ptr<RealWorker>> workers_;
  std::vector<std::unique_ptr<RealWorker>> graveyard_;
  std::filesystem::path ranktable_path_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Fault> faults_;
  std::vector<PendingKill> kills_;
  std::map<int64_t, std::map<int, double>> losses_;
  std::vector<std::string> log_;
  int finished_ = 0;
  ScenarioResult result_;
};

// ---------------------------------------------------------------------------

RealWorker::RealWorker(RealRun& run, int rank, EndpointId ep, ModelState state, bool idle,
                       int64_t tag)
    : run_(run), rank_(rank), ep_(std::move(ep)), state_(std::move(state)), running_(!idle) {
  run_.hub().Register(ep_);
  tag_ = idle ? tag : state_.step;
  hb_phase_ = idle ? HeartbeatPhase::kRestoring : HeartbeatPhase::kForwardBackward;
  loop_ = std::thread([this] { Loop(); });
  beats_ = std::thread([this] { Beats(); });
}

RealWorker::~RealWorker() {
  Kill();
  if (loop_.joinable()) loop_.join();
  if (beats_.joinable()) beats_.join();
}

void RealWorker::Kill() {
  {
    std::lock_guard lock(mu_);
    if (dead_) return;
    dead_ = true;
  }
  cv_.notify_all();
  run_.hub().Deregister(ep_);
}

void RealWorker::RequestStop() {
  {
    std::lock_guard lock(mu_);
    running_ = false;
  }
  cv_.notify_all();
}

bool RealWorker::WaitIdle(Ms timeout) {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [this] { return idle_ || dead_; });
}

void RealWorker::Resume(ModelState state, ThreadedCollective* group) {
  {
    std::lock_guard lock(mu_);
    state_ = std::move(state);
    group_ = group;
    running_ = true;
    tag_ = state_.step;
    hb_phase_ = HeartbeatPhase::kForwardBackward;
  }
  cv_.notify_all();
}

ModelState RealWorker::Snapshot() {
  std::lock_guard lock(mu_);
  return state_;
}

bool RealWorker::Hold(Tick ticks) {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, Ms(ticks), [this] { return dead_ || !running_; });
  return !dead_ && running_;
}

void RealWorker::SendBeat() {
  if (dead_) return;
  HeartbeatRecord hb;
  hb.rank = rank_;
  hb.node_id = ep_.node_id;
  hb.step_tag = tag_;
  hb.phase = hb_phase_;
  hb.sent_at = run_.Now();
  run_.hub().Send(ep_, run_.controller(), EncodeHeartbeat(hb));
}

void RealWorker::SetTag(int64_t tag) {
  if (tag_.exchange(tag) != tag) SendBeat();
}

void RealWorker::Beats() {
  const Ms period(run_.scenario().timing.heartbeat_period);
  std::unique_lock lock(mu_);
  while (!dead_) {
    lock.unlock();
    SendBeat();
    lock.lock();
    cv_.wait_for(lock, period, [this] { return dead_.load(); });
  }
}

void RealWorker::Loop() {
  const Scenario& sc = run_.scenario();
  const WorkloadConfig& cfg = sc.workload;
  const ParamRange range = run_.RangeOf(rank_);
  const int key = run_.ShardOf(rank_);
  const int dp = run_.DpOf(rank_);
  while (true) {
    ModelState state;
    ThreadedCollective* group = nullptr;
    {
      std::unique_lock lock(mu_);
      if (!running_) {
        idle_ = true;
        cv_.notify_all();
        cv_.wait(lock, [this] { return dead_ || running_; });
      }
      if (dead_) return;
      idle_ = false;
      state = state_;
      group = group_;
    }
    if (state.step >= sc.horizon_steps) {
      finished_ = true;
      hb_phase_ = HeartbeatPhase::kIdle;
      SendBeat();
      cv_.notify_all();
      run_.OnFinished();
      std::unique_lock lock(mu_);
      running_ = false;
      idle_ = true;
      cv_.notify_all();
      cv_.wait(lock, [this] { return dead_.load(); });
      return;
    }
    phase_ = TrainPhase::kForward;
    SetTag(state.step);
    run_.OnPhase(rank_, state.step, TrainPhase::kForward);
    if (!Hold(sc.timing.step.forward)) continue;
    phase_ = TrainPhase::kBackward;
    const Gradient g = ComputeGradient(cfg, state, range, dp);
    if (!Hold(sc.timing.step.backward)) continue;
    phase_ = TrainPhase::kGradSync;
    if (dead_ || group == nullptr) continue;
    auto summed = group->Arrive(rank_, key, PackGradient(g));
    if (!summed || dead_) continue;
    phase_ = TrainPhase::kOptimizer;
    hb_phase_ = HeartbeatPhase::kOptimizerStep;
    SetTag(kOptimizerTag);
    run_.OnPhase(rank_, state.step, TrainPhase::kOptimizer);
    const Gradient mean = UnpackMean(*summed, run_.replicas());
    // The optimizer runs to completion once started; only a kill stops it.
    {
      std::unique_lock lock(mu_);
      cv_.wait_for(lock, Ms(sc.timing.step.optimizer), [this] { return dead_.load(); });
      if (dead_) return;
      ApplyUpdate(cfg, mean, state_);
      state = state_;
    }
    hb_phase_ = HeartbeatPhase::kForwardBackward;
    SetTag(state.step);
    run_.OnStepDone(rank_, state.step - 1, mean.loss);
  }
}

// ---------------------------------------------------------------------------

RealRun::RealRun(const Scenario& sc)
    : sc_(sc),
      topo_(BuildTopology(sc.dp, sc.tp, sc.pp, sc.zero)),
      rt_(MakeRankTable(sc.world_size(), sc.devices_per_node)),
      registry_(ControllerConfig{sc.timing.heartbeat_period, sc.timing.miss_threshold,
                                 sc.timing.optimizer_wait_timeout},
                rt_),
      spares_(SparePool::Named(sc.spares)) {
  ranktable_path_ = std::filesystem::temp_directory_path() /
                    ("flashrec-rt-" + std::to_string(sc.seed) + "-" +
                     std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) +
                     ".json");
}

RealRun::~RealRun() {
  Stop();
  std::error_code ec;
  std::filesystem::remove(ranktable_path_, ec);
}

int RealRun::ShardOf(int rank) const {
  const RankCoords c = topo_.CoordsOf(rank);
  return (c.pp * topo_.tp_degree() + c.tp) * topo_.zero_degree() + c.zero;
}

ParamRange RealRun::RangeOf(int rank) const {
  return ShardRange(sc_.workload.param_len, topo_.shard_count(), ShardOf(rank));
}

void RealRun::Log(std::string_view type, std::string_view src, std::string_view detail) {
  std::lock_guard lock(mu_);
  log_.push_back(std::to_string(Now()) + "," + std::string(type) + "," + std::string(src) +
                 ",-," + std::string(detail));
}

void RealRun::OnPhase(int rank, int64_t step, TrainPhase phase) {
  std::lock_guard lock(mu_);
  const std::string& node = rt_.entry(rank).node_id;
  if (rt_.RanksOnNode(node).front() != rank) return;
  for (size_t k = 0; k < faults_.size(); ++k) {
    Fault& f = faults_[k];
    if (f.triggered || f.spec.at_step != step || f.node != node) continue;
    if (f.optimizer != (phase == TrainPhase::kOptimizer)) continue;
    f.triggered = true;
    kills_.push_back({Now() + f.offset, k});
  }
  cv_.notify_all();
}

void RealRun::OnStepDone(int rank, int64_t step, double loss) {
  std::lock_guard lock(mu_);
  losses_[step][ShardOf(rank)] = loss;
}

void RealRun::OnFinished() {
  std::lock_guard lock(mu_);
  ++finished_;
  cv_.notify_all();
}

void RealRun::FireDue() {
  std::vector<size_t> due;
  {
    std::lock_guard lock(mu_);
    const Tick now = Now();
    for (auto it = kills_.begin(); it != kills_.end();) {
      if (it->at <= now) {
        due.push_back(it->fault);
        it = kills_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (size_t k : due) {
    Fault& f = faults_[k];
    const std::vector<int> ranks = rt_.RanksOnNode(f.node);
    f.killed_at = Now();
    for (int r : ranks) workers_[r]->Kill();
    Log("fault", f.node, FailureClassName(f.cls));
    if (f.plugin) {
      DevicePlugin plugin(f.node, sc_.devices_per_node);
      plugin.InjectFault(0, f.cls);
      hub_.Send(EndpointId{f.node, -1}, controller_ep_, EncodePluginReport(plugin.Report(Now())));
    }
  }
}

void RealRun::Stop() {
  for (auto& w : workers_) {
    if (w) w->Kill();
  }
  if (group_) group_->Reset();
  workers_.clear();
  graveyard_.clear();
}

void RealRun::Recover(const StopDecision& decision, Tick detected_at) {
  const Tick t = sc_.timing.latency;
  RecoveryPlan plan;
  try {
    plan = PlanRecovery(decision, registry_.FailedRanks(), topo_, rt_, spares_);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNotRecoverable && e.code() != ErrorCode::kResourceExhausted) {
      throw;
    }
    result_.status = ScenarioStatus::kUnrecoverable;
    result_.failure_reason = e.what();
    return;
  }
  for (int r : plan.faulty_ranks) registry_.MarkFailed(r);
  Log("plan", "controller", "v" + std::to_string(plan.ranktable_version_after));

  // Suspend healthy ranks; recreate faulty nodes.
  for (int r = 0; r < sc_.world_size(); ++r) {
    if (!plan.faulty_ranks.contains(r)) workers_[r]->RequestStop();
  }
  group_->Reset();
  for (int r = 0; r < sc_.world_size(); ++r) {
    if (plan.faulty_ranks.contains(r)) continue;
    if (!workers_[r]->WaitIdle(Ms(10000))) {
      throw Error(ErrorCode::kTimeout, "rank " + std::to_string(r) + " did not stop");
    }
  }
  std::this_thread::sleep_for(Ms(t + sc_.timing.stop));
  for (int r : plan.faulty_ranks) {
    workers_[r]->Kill();
    graveyard_.push_back(std::move(workers_[r]));
  }
  std::this_thread::sleep_for(Ms(sc_.timing.recreate + sc_.timing.agent));
  for (int r : plan.faulty_ranks) {
    const RankEntry& e = plan.ranktable_after.entry(r);
    workers_[r] = std::make_unique<RealWorker>(*this, r, EndpointId{e.node_id, e.device_id},
                                               ModelState{}, true, plan.resume_step);
  }

  // Store, ranktable, groups.
  const auto store = EstablishStore(static_cast<int>(plan.faulty_ranks.size()),
                                    sc_.store_parallelism, clock_, sc_.timing.store_connect);
  result_.store_rounds += static_cast<uint64_t>(store.rounds);
  if (sc_.effective_ranktable_mode() == RankTableMode::kSharedFile) {
    WriteRankTableFile(plan.ranktable_after, ranktable_path_);
    for (const auto& node : plan.ranktable_after.Nodes()) {
      if (ReadRankTableFile(ranktable_path_).version() != plan.ranktable_version_after) {
        throw Error(ErrorCode::kStaleVersion, node + " read a stale ranktable");
      }
      ++result_.ranktable_loads;
    }
  } else {
    for (const auto& w : workers_) {
      Message m;
      m.type = "rt-collect";
      hub_.Send(w->endpoint(), controller_ep_, std::move(m));
    }
    result_.ranktable_messages += 2 * workers_.size();
    std::this_thread::sleep_for(Ms(2 * workers_.size() * sc_.timing.negotiate_message));
  }
  std::vector<int> members(sc_.world_size());
  for (int r = 0; r < sc_.world_size(); ++r) members[r] = r;
  const CommGroup group = FormGroup(members, plan.ranktable_after, clock_, sc_.timing.link);
  std::this_thread::sleep_for(Ms(group.MaxNeighbors() * sc_.timing.link));
  group_->Regroup(group);

  // Restore and roll back.
  std::vector<ModelState> states(sc_.world_size());
  for (int r = 0; r < sc_.world_size(); ++r) {
    if (plan.faulty_ranks.contains(r)) continue;
    states[r] = RollbackIterator(workers_[r]->Snapshot(), plan.resume_step,
                                 sc_.workload.batch_size);
  }
  for (const auto& [rank, donor] : plan.donor_map) {
    states[rank] = RestoreFromReplica(SerializeState(states[donor]), plan.resume_step);
  }
  std::this_thread::sleep_for(Ms(sc_.timing.copy));

  // Continue.
  rt_ = plan.ranktable_after;
  for (int r : plan.faulty_ranks) {
    registry_.Reregister(r, rt_.entry(r).node_id, plan.resume_step, Now());
  }
  for (int r = 0; r < sc_.world_size(); ++r) workers_[r]->Resume(states[r], group_.get());
  const Tick continued = Now();
  Log("recovered", "controller", "resume=" + std::to_string(plan.resume_step));

  MetricsRow row;
  row.scenario_id = sc_.id;
  row.n_devices = sc_.world_size();
  row.failure_step = decision.failure_step;
  row.failure_phase = std::string(FailurePhaseName(decision.phase));
  row.failure_class = "Unclassified";
  Tick struck = detected_at;
  for (auto& f : faults_) {
    if (f.killed_at >= 0 && plan.faulty_nodes.contains(f.node)) {
      struck = std::min(struck, f.killed_at);
      row.failure_class = std::string(FailureClassName(f.cls));
    }
  }
  row.detection_ticks = detected_at - struck;
  row.restart_ticks = continued - detected_at;
  row.redone_steps = decision.phase == FailurePhase::kForwardBackward ? 1 : 0;
  row.total_ticks =
      row.detection_ticks + row.restart_ticks + row.redone_steps * sc_.timing.step.total();
  row.mode = "flash";
  result_.rows.push_back(row);
  result_.recreated_nodes += plan.faulty_nodes.size();
}

ScenarioResult RealRun::Run() {
  if (sc_.mode != RecoveryMode::kFlash) {
    throw Error(ErrorCode::kInvalidArgument, "mode: real clock runs support flash only");
  }
  for (size_t k = 0; k < sc_.faults.size(); ++k) {
    Rng rng(HashCombine({sc_.seed, 0xfa17ULL, k}));
    Fault f;
    f.spec = sc_.faults[k];
    f.node = f.spec.target_node.value_or(
        NodeName(static_cast<int>(rng.Below(static_cast<uint64_t>(sc_.n_nodes)))));
    f.optimizer = f.spec.phase == FaultPhase::kOptimizer ||
                  (f.spec.phase == FaultPhase::kRandom && rng.Below(2) == 1);
    const SampledFailure sampled = SampleFailureClass(rng);
    f.cls = f.spec.failure_class.value_or(sampled.failure_class);
    const bool hardware =
        f.spec.failure_class ? IsHardwareClass(*f.spec.failure_class) : sampled.hardware;
    f.plugin = f.spec.detection == DetectionPath::kPlugin ||
               (f.spec.detection == DetectionPath::kAuto && hardware);
    const Tick window = f.optimizer ? sc_.timing.step.optimizer
                                    : sc_.timing.step.forward + sc_.timing.step.backward;
    f.offset = static_cast<Tick>(rng.Below(static_cast<uint64_t>(window)));
    faults_.push_back(f);
  }

  hub_.Register(controller_ep_);
  std::vector<int> members(sc_.world_size());
  for (int r = 0; r < sc_.world_size(); ++r) members[r] = r;
  group_ = std::make_unique<ThreadedCollective>(PlanGroup(members, rt_));
  for (int r = 0; r < sc_.world_size(); ++r) {
    workers_.push_back(std::make_unique<RealWorker>(
        *this, r, EndpointId{rt_.entry(r).node_id, rt_.entry(r).device_id},
        InitialState(sc_.workload, RangeOf(r)), true));
  }
  for (int r = 0; r < sc_.world_size(); ++r) {
    workers_[r]->Resume(InitialState(sc_.workload, RangeOf(r)), group_.get());
  }
  registry_.StartWatching(Now());

  const Tick budget = 20 * (sc_.horizon_steps * sc_.timing.step.total() +
                            static_cast<Tick>(sc_.faults.size() + 1) *
                                (sc_.timing.recreate + sc_.timing.agent + 200));
  Tick detected_at = -1;
  Tick wait_deadline = -1;
  while (result_.status == ScenarioStatus::kCompleted) {
    {
      std::lock_guard lock(mu_);
      if (finished_ == sc_.world_size()) break;
    }
    if (Now() > budget) throw Error(ErrorCode::kTimeout, "real run exceeded its time budget");
    FireDue();
    Ms wait(1);
    while (auto m = hub_.Receive(controller_ep_, wait)) {
      wait = Ms(0);
      if (m->type == "heartbeat") {
        registry_.IngestHeartbeat(DecodeHeartbeat(*m), Now());
      } else if (m->type == "plugin") {
        registry_.IngestPluginReport(DecodePluginReport(*m), Now());
      }
    }
    const auto declared = registry_.DetectFailures(Now());
    if (!declared.empty() && detected_at < 0) detected_at = Now();
    if (detected_at < 0) continue;

    const std::set<int> failed = registry_.FailedRanks();
    std::set<std::string> faulty_nodes;
    for (int r : failed) faulty_nodes.insert(rt_.entry(r).node_id);
    std::vector<int64_t> healthy;
    std::vector<RankRecord> faulty;
    for (int r = 0; r < sc_.world_size(); ++r) {
      if (faulty_nodes.contains(rt_.entry(r).node_id)) {
        if (failed.contains(r)) faulty.push_back(registry_.record(r));
      } else {
        healthy.push_back(registry_.record(r).last_tag);
      }
    }
    const StopDecision d = DecideStopMoment(healthy, faulty);
    if (!d.authorized) {
      if (wait_deadline < 0) wait_deadline = Now() + sc_.timing.optimizer_wait_timeout;
      if (Now() < wait_deadline) continue;
      // Still inside the optimizer after the timeout: treat as failed.
      for (int r = 0; r < sc_.world_size(); ++r) {
        if (!faulty_nodes.contains(rt_.entry(r).node_id) &&
            registry_.record(r).last_tag == kOptimizerTag) {
          registry_.DeclareFailed(r, FailureKind::kProtocolViolation, Now());
        }
      }
      wait_deadline = -1;
      continue;
    }
    Recover(d, detected_at);
    detected_at = -1;
    wait_deadline = -1;
  }
  Stop();

  if (result_.status == ScenarioStatus::kCompleted) {
    result_.finished_at = Now();
    for (int64_t s = 0; s < sc_.horizon_steps; ++s) {
      double sum = 0;
      for (const auto& [shard, loss] : losses_.at(s)) sum += loss;
      result_.losses.push_back(sum);
    }
  }
  result_.loss_digest = LossDigest(result_.losses);
  MetricsRow summary;
  summary.scenario_id = sc_.id;
  summary.n_devices = sc_.world_size();
  summary.failure_phase = "summary";
  summary.failure_class = "-";
  for (const auto& r : result_.rows) {
    summary.detection_ticks += r.detection_ticks;
    summary.restart_ticks += r.restart_ticks;
    summary.redone_steps += r.redone_steps;
  }
  summary.total_ticks = result_.status == ScenarioStatus::kCompleted ? result_.finished_at : -1;
  summary.mode = "flash";
  result_.rows.push_back(summary);
  for (auto& r : result_.rows) r.loss_digest = result_.loss_digest;
  for (const auto& line : log_) result_.event_log += line + "\n";
  return std::move(result_);
}

}  // namespace

ScenarioResult RunReal(const Scenario& sc) {
  RealRun run(sc);
  return run.Run();
}

}  // namespace flashrec
