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

// Discrete-event execution of a scenario: workers, controller, device
// plugins and the checkpoint baseline on one EventLoop.

#include <algorithm>
#include <cstdio>
#include <map>
#include <memory>
#include <set>

#include "flashrec/error.h"
#include "flashrec/harness.h"
#include "flashrec/random.h"
#include "src/run_internal.h"

namespace flashrec {
namespace {

constexpr int kPluginProcess = -1;

std::string SpareName(int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "spare-%04d", k);
  return buf;
}

struct ArmedFault {
  FaultSpec spec;
  std::string node;
  bool optimizer = false;
  FailureClass cls = FailureClass::kUnclassified;
  bool hardware = false;
  bool plugin = false;
  int device = 0;
  Tick offset = 0;
  bool triggered = false;
  bool replacement_failed = false;
};

struct FiredFault {
  std::string node;
  Tick killed_at = 0;
  int64_t step = 0;
  FailurePhase phase = FailurePhase::kForwardBackward;
  FailureClass cls = FailureClass::kUnclassified;
  bool consumed = false;
};

ControlAction ToControl(RecoveryActionKind k) {
  switch (k) {
    case RecoveryActionKind::kStop:
      return ControlAction::kStop;
    case RecoveryActionKind::kClean:
      return ControlAction::kClean;
    default:
      return ControlAction::kReset;
  }
}

class SimRun : public RecoveryBackend {
 public:
  SimRun(const Scenario& sc, const RunObserver& obs)
      : sc_(sc),
        obs_(obs),
        log_(obs.capture_event_log),
        cluster_(loop_, LatencyModel{sc.timing.latency, 0, sc.seed},
                 obs.capture_event_log ? &log_ : nullptr),
        topo_(BuildTopology(sc.dp, sc.tp, sc.pp, sc.zero)),
        rt_(MakeRankTable(sc.world_size(), sc.devices_per_node)) {}

  ScenarioResult Run();

  void Suspend(const RecoveryPlan& plan, Done done) override;
  void Recreate(const RecoveryPlan& plan, Done done, Failed failed) override;
  void EstablishStore(const RecoveryPlan& plan, Done done) override;
  void DistributeRankTable(const RecoveryPlan& plan, Done done) override;
  void FormGroups(const RecoveryPlan& plan, Done done) override;
  void Restore(const RecoveryPlan& plan, Done done, Failed failed) override;
  void Continue(const RecoveryPlan& plan, Done done) override;

 private:
  bool flash() const { return sc_.mode == RecoveryMode::kFlash; }
  EventLog* log() { return obs_.capture_event_log ? &log_ : nullptr; }
  void Log(std::string_view type, std::string_view src, std::string_view dst,
           std::string_view detail) {
    if (log()) log_.Record(loop_.now(), type, src, dst, detail);
  }
  void Warn(std::string msg) {
    Log("warning", "harness", "-", msg);
    result_.warnings.push_back(std::move(msg));
  }
  // Runs `fn` later unless a newer recovery has started in between.
  void After(Tick delay, std::function<void()> fn) {
    loop_.ScheduleAfter(delay, [this, gen = backend_gen_, fn = std::move(fn)] {
      if (gen == backend_gen_) fn();
    });
  }

  void ArmFaults();
  std::unique_ptr<SimWorker> MakeWorker(int rank, const std::string& node, ModelState init);
  ParamRange RangeOf(int rank) const;
  int ShardOf(int rank) const;
  void InstallCollective(const RankTable& rt);
  void StartController();

  void OnPhase(int rank, int64_t step, TrainPhase phase);
  void Fire(size_t k);
  void OnFinished();
  void OnRecovered(const RecoveryReport& report);
  void OnUnrecoverable(const Error& err, int64_t failure_step);
  void BaselineRecover(std::string mode_label, std::optional<Tick> detected_at);
  void Unrecoverable(const std::string& reason, int64_t failure_step);
  FiredFault* EarliestUnconsumed(const std::set<std::string>& nodes);
  void Retire(int rank);

  Scenario sc_;
  RunObserver obs_;
  EventLog log_;
  EventLoop loop_;
  SimCluster cluster_;
  ParallelTopology topo_;
  RankTable rt_;
  const EndpointId controller_ep_{"controller", 0};

  std::vector<std::unique_ptr<SimWorker>> workers_;
  std::vector<std::unique_ptr<SimWorker>> graveyard_;
  std::unique_ptr<SimCollective> collective_;
  std::vector<std::unique_ptr<SimCollective>> retired_collectives_;
  std::unique_ptr<SimController> controller_;
  std::vector<std::unique_ptr<SimController>> retired_controllers_;
  std::map<std::string, DevicePlugin> plugins_;
  SharedRankTable shared_;

  std::vector<ArmedFault> faults_;
  std::vector<FiredFault> fired_;
  std::map<int64_t, std::map<int, double>> losses_;
  std::map<int, std::map<int64_t, std::string>> checkpoints_;
  std::set<std::string> used_spares_;
  bool baseline_pending_ = false;
  uint64_t backend_gen_ = 0;
  bool done_ = false;
  ScenarioResult result_;
};

int SimRun::ShardOf(int rank) const {
  const RankCoords c = topo_.CoordsOf(rank);
  return (c.pp * topo_.tp_degree() + c.tp) * topo_.zero_degree() + c.zero;
}

ParamRange SimRun::RangeOf(int rank) const {
  return ShardRange(sc_.workload.param_len, topo_.shard_count(), ShardOf(rank));
}

std::unique_ptr<SimWorker> SimRun::MakeWorker(int rank, const std::string& node,
                                              ModelState init) {
  SimWorkerOptions o;
  o.rank = rank;
  o.endpoint = EndpointId{node, rt_.entry(rank).device_id};
  o.controller = controller_ep_;
  o.range = RangeOf(rank);
  o.shard_key = ShardOf(rank);
  o.dp_index = topo_.CoordsOf(rank).dp;
  o.replicas = topo_.dp_degree();
  o.workload = sc_.workload;
  o.timing = sc_.timing.step;
  o.heartbeat_period = flash() ? sc_.timing.heartbeat_period : 0;
  o.horizon_steps = sc_.horizon_steps;
  o.checkpoint_interval = sc_.checkpoint_interval;
  o.checkpoint_costs = CheckpointCosts{sc_.timing.k0, sc_.timing.k1};
  SimWorkerHooks h;
  h.on_phase = [this](int r, int64_t step, TrainPhase p) { OnPhase(r, step, p); };
  h.on_step_done = [this](int r, int64_t step, double loss) {
    losses_[step][ShardOf(r)] = loss;
  };
  h.on_checkpoint_durable = [this](int r, const Checkpoint& c) {
    checkpoints_[r][c.saved_at_step] = c.bytes;
  };
  h.on_finished = [this](int) { OnFinished(); };
  return std::make_unique<SimWorker>(loop_, cluster_, std::move(o), std::move(init), h);
}

void SimRun::InstallCollective(const RankTable& rt) {
  std::vector<int> members(rt.world_size());
  for (int r = 0; r < rt.world_size(); ++r) members[r] = r;
  if (collective_) {
    collective_->Reset();
    retired_collectives_.push_back(std::move(collective_));
  }
  collective_ = std::make_unique<SimCollective>(loop_, PlanGroup(members, rt), 0, log(),
                                                "grad-sync");
  for (auto& w : workers_) w->SetCollective(collective_.get());
}

void SimRun::StartController() {
  if (controller_) {
    controller_->Stop();
    retired_controllers_.push_back(std::move(controller_));
  }
  if (cluster_.IsAlive(controller_ep_)) cluster_.Deregister(controller_ep_);
  ControllerConfig cfg;
  cfg.heartbeat_period = sc_.timing.heartbeat_period;
  cfg.miss_threshold = sc_.timing.miss_threshold;
  cfg.optimizer_wait_timeout = sc_.timing.optimizer_wait_timeout;
  // Spares already in service or dead stay out of the pool.
  std::vector<std::string> free;
  for (int k = 0; k < sc_.spares; ++k) {
    if (!used_spares_.contains(SpareName(k))) free.push_back(SpareName(k));
  }
  SparePool pool(std::move(free));
  SimControllerHooks hooks;
  hooks.on_authorized = [this](const StopDecision& d, const std::vector<int64_t>& reported) {
    if (!obs_.on_authorized) return;
    const std::set<int> failed = controller_->registry().FailedRanks();
    std::set<std::string> faulty_nodes;
    for (int r : failed) faulty_nodes.insert(rt_.entry(r).node_id);
    std::vector<int64_t> actual;
    for (int r = 0; r < rt_.world_size(); ++r) {
      if (!faulty_nodes.contains(rt_.entry(r).node_id)) actual.push_back(workers_[r]->step_tag());
    }
    obs_.on_authorized(d, reported, actual);
  };
  hooks.on_recovered = [this](const RecoveryReport& r) { OnRecovered(r); };
  hooks.on_unrecoverable = [this](const Error& e, const std::set<int>&, int64_t step) {
    OnUnrecoverable(e, step);
  };
  controller_ = std::make_unique<SimController>(loop_, cluster_, controller_ep_, cfg, topo_, rt_,
                                                std::move(pool), *this, hooks);
  controller_->Start();
}

void SimRun::ArmFaults() {
  for (size_t k = 0; k < sc_.faults.size(); ++k) {
    const FaultSpec& spec = sc_.faults[k];
    Rng rng(HashCombine({sc_.seed, 0xfa17ULL, k}));
    ArmedFault f;
    f.spec = spec;
    const uint64_t node_draw = rng.Below(static_cast<uint64_t>(sc_.n_nodes));
    f.node = spec.target_node.value_or(NodeName(static_cast<int>(node_draw)));
    const bool coin = rng.Below(2) == 1;
    f.optimizer = spec.phase == FaultPhase::kOptimizer ||
                  (spec.phase == FaultPhase::kRandom && coin);
    const SampledFailure sampled = SampleFailureClass(rng);
    f.cls = spec.failure_class.value_or(sampled.failure_class);
    f.hardware = spec.failure_class ? IsHardwareClass(*spec.failure_class) : sampled.hardware;
    f.plugin = spec.detection == DetectionPath::kPlugin ||
               (spec.detection == DetectionPath::kAuto && f.hardware);
    f.device = static_cast<int>(rng.Below(static_cast<uint64_t>(sc_.devices_per_node)));
    // Faults sharing a step and phase strike at the same tick.
    Rng when(HashCombine({sc_.seed, 0x7153ULL, static_cast<uint64_t>(spec.at_step),
                          f.optimizer ? 1ULL : 0ULL}));
    const Tick window = f.optimizer ? sc_.timing.step.optimizer
                                    : sc_.timing.step.forward + sc_.timing.step.backward;
    f.offset = static_cast<Tick>(when.Below(static_cast<uint64_t>(window)));
    faults_.push_back(std::move(f));
  }
}

void SimRun::OnPhase(int rank, int64_t step, TrainPhase phase) {
  if (phase != TrainPhase::kForward && phase != TrainPhase::kOptimizer) return;
  const std::string& node = rt_.entry(rank).node_id;
  for (size_t k = 0; k < faults_.size(); ++k) {
    ArmedFault& f = faults_[k];
    if (f.triggered || f.spec.at_step != step || f.node != node) continue;
    if (f.optimizer != (phase == TrainPhase::kOptimizer)) continue;
    if (rt_.RanksOnNode(node).front() != rank) continue;
    f.triggered = true;
    loop_.ScheduleAfter(f.offset, [this, k] { Fire(k); });
  }
}

void SimRun::Fire(size_t k) {
  ArmedFault& f = faults_[k];
  const std::vector<int> ranks = rt_.RanksOnNode(f.node);
  const bool any_alive =
      std::any_of(ranks.begin(), ranks.end(), [&](int r) { return workers_[r]->alive(); });
  if (!any_alive) {
    Warn("fault " + std::to_string(k) + " on " + f.node + " found no live process");
    return;
  }
  const SimWorker& first = *workers_[ranks.front()];
  FiredFault fired;
  fired.node = f.node;
  fired.killed_at = loop_.now();
  fired.step = first.state().step;
  fired.phase = first.train_phase() == TrainPhase::kOptimizer ? FailurePhase::kOptimizerStep
                                                              : FailurePhase::kForwardBackward;
  fired.cls = f.cls;
  for (int r : ranks) workers_[r]->Kill();
  Log("fault", f.node, "-",
      std::string(FailureClassName(f.cls)) + " step=" + std::to_string(fired.step) + " " +
          std::string(FailurePhaseName(fired.phase)));
  fired_.push_back(fired);

  if (flash()) {
    if (f.plugin) {
      auto [it, inserted] = plugins_.try_emplace(f.node, f.node, sc_.devices_per_node);
      it->second.InjectFault(f.device, f.cls);
      cluster_.Send(EndpointId{f.node, kPluginProcess}, controller_ep_,
                    EncodePluginReport(it->second.Report(loop_.now())));
    }
    return;
  }
  if (!baseline_pending_) {
    baseline_pending_ = true;
    loop_.ScheduleAfter(sc_.timing.hang_timeout, [this] {
      BaselineRecover(std::string(RecoveryModeName(RecoveryMode::kCheckpoint)), std::nullopt);
    });
  }
}

FiredFault* SimRun::EarliestUnconsumed(const std::set<std::string>& nodes) {
  FiredFault* best = nullptr;
  for (auto& f : fired_) {
    if (f.consumed || (!nodes.empty() && !nodes.contains(f.node))) continue;
    if (!best || f.killed_at < best->killed_at) best = &f;
  }
  return best;
}

void SimRun::OnFinished() {
  if (done_) return;
  for (const auto& w : workers_) {
    if (!w->finished()) return;
  }
  done_ = true;
  result_.finished_at = loop_.now();
  if (controller_) controller_->Stop();
  loop_.Halt();
}

void SimRun::Retire(int rank) {
  if (!workers_[rank]) return;
  workers_[rank]->Kill();
  graveyard_.push_back(std::move(workers_[rank]));
}

// ---------------------------------------------------------------------------
// Flash backend

void SimRun::Suspend(const RecoveryPlan& plan, Done done) {
  ++backend_gen_;
  collective_->Reset();
  for (const auto& a : plan.actions) {
    if (a.kind != RecoveryActionKind::kStop && a.kind != RecoveryActionKind::kClean &&
        a.kind != RecoveryActionKind::kReset) {
      continue;
    }
    for (int r : rt_.RanksOnNode(a.target)) {
      if (!workers_[r]->alive()) continue;
      cluster_.Send(controller_ep_, workers_[r]->endpoint(), EncodeControl(ToControl(a.kind)));
    }
  }
  After(sc_.timing.latency + sc_.timing.stop, std::move(done));
}

void SimRun::Recreate(const RecoveryPlan& plan, Done done, Failed failed) {
  std::map<std::string, std::vector<int>> ranks_of;
  for (const auto& [node, spare] : plan.replacements) {
    ranks_of[spare] = plan.ranktable_after.RanksOnNode(spare);
    for (int r : ranks_of[spare]) workers_[r]->Kill();
  }
  After(sc_.timing.recreate + sc_.timing.agent, [this, ranks_of, replacements = plan.replacements,
                                                  done = std::move(done),
                                                  failed = std::move(failed)] {
    std::set<std::string> dead;
    for (const auto& [node, spare] : replacements) {
      for (int r : ranks_of.at(spare)) {
        Retire(r);
        workers_[r] = MakeWorker(r, spare, ModelState{});
        workers_[r]->SetCollective(collective_.get());
        workers_[r]->StartIdle();
      }
      Log("recreate", node, spare, std::to_string(ranks_of.at(spare).size()) + " ranks");
      for (auto& f : faults_) {
        if (f.node == node && f.spec.replacement_fails && !f.replacement_failed) {
          f.replacement_failed = true;
          for (int r : ranks_of.at(spare)) workers_[r]->Kill();
          Log("fault", spare, "-", "replacement died");
          used_spares_.insert(spare);
          dead.insert(spare);
        }
      }
    }
    if (dead.empty()) {
      done();
    } else {
      failed(dead);
    }
  });
}

void SimRun::EstablishStore(const RecoveryPlan& plan, Done done) {
  Clock clock = Clock::Simulated();
  const int clients = static_cast<int>(plan.faulty_ranks.size());
  const auto report = flashrec::EstablishStore(clients, sc_.store_parallelism, clock,
                                               sc_.timing.store_connect);
  result_.store_rounds += static_cast<uint64_t>(report.rounds);
  After(report.elapsed, std::move(done));
}

void SimRun::DistributeRankTable(const RecoveryPlan& plan, Done done) {
  if (sc_.effective_ranktable_mode() == RankTableMode::kSharedFile) {
    shared_.Publish(plan.ranktable_after);
    // One agent per node reads the file for its devices.
    for (size_t n = 0; n < plan.ranktable_after.Nodes().size(); ++n) shared_.Load();
    result_.ranktable_loads = shared_.loads();
    After(sc_.timing.ranktable_file, std::move(done));
    return;
  }
  std::vector<EndpointId> eps;
  for (const auto& w : workers_) eps.push_back(w->endpoint());
  result_.ranktable_messages += 2 * eps.size();
  NegotiateRankTable(cluster_, controller_ep_, eps, sc_.timing.negotiate_message,
                     [this, gen = backend_gen_, done = std::move(done)] {
                       if (gen == backend_gen_) done();
                     });
}

void SimRun::FormGroups(const RecoveryPlan& plan, Done done) {
  std::vector<int> members(plan.ranktable_after.world_size());
  for (size_t r = 0; r < members.size(); ++r) members[r] = static_cast<int>(r);
  const CommGroup group = PlanGroup(members, plan.ranktable_after);
  After(group.MaxNeighbors() * sc_.timing.link,
        [this, rt = plan.ranktable_after, done = std::move(done)] {
          InstallCollective(rt);
          done();
        });
}

void SimRun::Restore(const RecoveryPlan& plan, Done done, Failed failed) {
  const int64_t resume = plan.resume_step;
  for (int r = 0; r < static_cast<int>(workers_.size()); ++r) {
    if (!plan.faulty_ranks.contains(r)) workers_[r]->Rollback(resume);
  }
  auto pending = std::make_shared<size_t>(plan.donor_map.size());
  if (*pending == 0) {
    After(0, std::move(done));
    return;
  }
  auto shared_done = std::make_shared<Done>(std::move(done));
  auto shared_failed = std::make_shared<Failed>(std::move(failed));
  auto reported = std::make_shared<bool>(false);
  for (const auto& [rank, donor] : plan.donor_map) {
    const std::string donor_node = rt_.entry(donor).node_id;
    CopyState(
        cluster_, workers_[donor]->endpoint(), workers_[rank]->endpoint(),
        workers_[donor]->Snapshot(), sc_.timing.copy,
        [this, gen = backend_gen_, rank, resume, pending, shared_done](std::string payload) {
          if (gen != backend_gen_) return;
          workers_[rank]->RestoreFrom(payload, resume);
          workers_[rank]->Rollback(resume);
          if (--*pending == 0) (*shared_done)();
        },
        [this, gen = backend_gen_, donor_node, shared_failed, reported](const Error&) {
          if (gen != backend_gen_ || *reported) return;
          *reported = true;
          (*shared_failed)({donor_node});
        });
  }
}

void SimRun::Continue(const RecoveryPlan& plan, Done done) {
  for (const auto& w : workers_) {
    cluster_.Send(controller_ep_, w->endpoint(),
                  EncodeControl(ControlAction::kContinue, plan.resume_step));
  }
  After(sc_.timing.latency, std::move(done));
}

void SimRun::OnRecovered(const RecoveryReport& report) {
  rt_ = report.plan.ranktable_after;
  MetricsRow row;
  row.scenario_id = sc_.id;
  row.n_devices = sc_.world_size();
  row.failure_step = report.failure_step;
  row.failure_phase = std::string(FailurePhaseName(report.failure_phase));
  row.failure_class = std::string(FailureClassName(report.failure_class));
  Tick struck_at = report.evidence_at;
  if (FiredFault* f = EarliestUnconsumed(report.plan.faulty_nodes)) {
    struck_at = f->killed_at;
    row.failure_class = std::string(FailureClassName(f->cls));
  }
  for (auto& f : fired_) {
    if (report.plan.faulty_nodes.contains(f.node)) f.consumed = true;
  }
  row.detection_ticks = report.detected_at - struck_at;
  row.restart_ticks = report.restart_ticks();
  row.redone_steps = report.redone_steps;
  row.total_ticks =
      row.detection_ticks + row.restart_ticks + row.redone_steps * sc_.timing.step.total();
  row.mode = std::string(RecoveryModeName(RecoveryMode::kFlash));
  result_.rows.push_back(row);
  result_.reports.push_back(report);
  result_.recreated_nodes += report.recreated_nodes;
  used_spares_.insert(report.plan.replacement_nodes.begin(), report.plan.replacement_nodes.end());
}

void SimRun::OnUnrecoverable(const Error& err, int64_t failure_step) {
  if (baseline_pending_ || done_) return;
  Warn(std::string("flash recovery impossible: ") + err.what());
  // Park the controller; its endpoint turns into a plain sink.
  retired_controllers_.push_back(std::move(controller_));
  cluster_.Deregister(controller_ep_);
  cluster_.Register(controller_ep_, [](const Message&) {});
  if (sc_.checkpoint_interval > 0) {
    baseline_pending_ = true;
    // The controller already stopped; defer so its call stack unwinds first.
    const Tick detected = loop_.now();
    loop_.ScheduleAfter(0, [this, detected] { BaselineRecover("checkpoint-fallback", detected); });
    return;
  }
  Unrecoverable(err.what(), failure_step);
}

void SimRun::Unrecoverable(const std::string& reason, int64_t failure_step) {
  result_.status = ScenarioStatus::kUnrecoverable;
  result_.failure_reason = reason;
  MetricsRow row;
  row.scenario_id = sc_.id;
  row.n_devices = sc_.world_size();
  row.failure_step = failure_step;
  row.failure_phase = "unrecoverable";
  row.failure_class = "-";
  if (FiredFault* f = EarliestUnconsumed({})) {
    row.failure_phase = std::string(FailurePhaseName(f->phase));
    row.failure_class = std::string(FailureClassName(f->cls));
    row.detection_ticks = loop_.now() - f->killed_at;
  }
  row.restart_ticks = -1;
  row.total_ticks = -1;
  row.mode = std::string(RecoveryModeName(sc_.mode));
  result_.rows.push_back(row);
  done_ = true;
  if (controller_) controller_->Stop();
  loop_.Halt();
}

// ---------------------------------------------------------------------------
// Checkpoint baseline: the job hangs until a collective timeout, every
// process is torn down and the job restarts from the newest checkpoint that
// every rank persisted.

void SimRun::BaselineRecover(std::string mode_label, std::optional<Tick> detected_at) {
  ++backend_gen_;
  baseline_pending_ = false;
  const Tick detect = detected_at.value_or(loop_.now());
  FiredFault* first = EarliestUnconsumed({});
  const int64_t failure_step = first ? first->step : -1;

  std::optional<int64_t> restart_step;
  if (static_cast<int>(checkpoints_.size()) == sc_.world_size()) {
    for (auto it = checkpoints_[0].rbegin(); it != checkpoints_[0].rend(); ++it) {
      const bool complete = std::all_of(checkpoints_.begin(), checkpoints_.end(),
                                        [&](const auto& kv) { return kv.second.contains(it->first); });
      if (complete) {
        restart_step = it->first;
        break;
      }
    }
  }
  if (!restart_step) {
    Unrecoverable("no complete checkpoint to restart from", failure_step);
    return;
  }

  std::set<std::string> dead_nodes;
  for (auto& f : fired_) {
    if (!f.consumed) dead_nodes.insert(f.node);
  }
  std::map<std::string, std::string> mapping;
  for (const auto& node : dead_nodes) {
    if (!rt_.HasNode(node)) continue;
    std::string spare;
    for (int k = 0; k < sc_.spares && spare.empty(); ++k) {
      if (!used_spares_.contains(SpareName(k))) spare = SpareName(k);
    }
    if (spare.empty()) {
      Unrecoverable("no spare node left for " + node, failure_step);
      return;
    }
    used_spares_.insert(spare);
    mapping[node] = spare;
  }
  for (int r = 0; r < static_cast<int>(workers_.size()); ++r) Retire(r);
  if (collective_) collective_->Reset();
  Log("restart", "harness", "-",
      "from checkpoint step " + std::to_string(*restart_step) + " after failure at step " +
          std::to_string(failure_step));

  const RankTable next = mapping.empty() ? rt_ : ReplaceNodes(rt_, mapping);
  const int n = sc_.world_size();
  Clock clock = Clock::Simulated();
  const auto store = flashrec::EstablishStore(n, 1, clock, sc_.timing.store_connect);
  result_.store_rounds += static_cast<uint64_t>(store.rounds);
  result_.recreated_nodes += mapping.size();
  const Tick before_ranktable = sc_.timing.recreate + sc_.timing.agent + store.elapsed;
  const int64_t resume = *restart_step;
  const bool negotiate = sc_.effective_ranktable_mode() == RankTableMode::kNegotiate;

  After(before_ranktable, [this, next, resume, negotiate, mode_label, detect, failure_step,
                           first_phase = first ? first->phase : FailurePhase::kForwardBackward,
                           first_class = first ? first->cls : FailureClass::kUnclassified,
                           struck = first ? first->killed_at : detect] {
    rt_ = next;
    for (int r = 0; r < sc_.world_size(); ++r) {
      ModelState state = DeserializeState(checkpoints_.at(r).at(resume));
      workers_[r] = MakeWorker(r, rt_.entry(r).node_id, std::move(state));
      workers_[r]->MarkCheckpointed(resume);
      workers_[r]->StartIdle();
    }
    // Losses past the checkpoint are recomputed.
    losses_.erase(losses_.lower_bound(resume), losses_.end());
    for (auto& f : fired_) f.consumed = true;

    auto finish = [this, resume, mode_label, detect, failure_step, first_phase, first_class,
                   struck] {
      InstallCollective(rt_);
      After(2 * sc_.timing.link + sc_.timing.checkpoint_load,
            [this, resume, mode_label, detect, failure_step, first_phase, first_class, struck] {
              for (auto& w : workers_) w->HandleControl(ControlAction::kContinue, resume);
              MetricsRow row;
              row.scenario_id = sc_.id;
              row.n_devices = sc_.world_size();
              row.failure_step = failure_step;
              row.failure_phase = std::string(FailurePhaseName(first_phase));
              row.failure_class = std::string(FailureClassName(first_class));
              row.detection_ticks = detect - struck;
              row.restart_ticks = loop_.now() - detect;
              row.redone_steps = failure_step - resume;
              row.total_ticks = row.detection_ticks + row.restart_ticks +
                                row.redone_steps * sc_.timing.step.total();
              row.mode = mode_label;
              result_.rows.push_back(row);
              Log("resumed", "harness", "-", "step " + std::to_string(resume));
              if (flash()) StartController();
            });
    };
    if (negotiate) {
      std::vector<EndpointId> eps;
      for (const auto& w : workers_) eps.push_back(w->endpoint());
      result_.ranktable_messages += 2 * eps.size();
      NegotiateRankTable(cluster_, controller_ep_, eps, sc_.timing.negotiate_message,
                         [this, gen = backend_gen_, finish] {
                           if (gen == backend_gen_) finish();
                         });
    } else {
      shared_.Publish(rt_);
      for (size_t k = 0; k < rt_.Nodes().size(); ++k) shared_.Load();
      result_.ranktable_loads = shared_.loads();
      After(sc_.timing.ranktable_file, finish);
    }
  });
}

ScenarioResult SimRun::Run() {
  ArmFaults();
  shared_.Publish(rt_);
  for (const auto& node : rt_.Nodes()) plugins_.try_emplace(node, node, sc_.devices_per_node);
  for (int r = 0; r < sc_.world_size(); ++r) {
    workers_.push_back(MakeWorker(r, rt_.entry(r).node_id, InitialState(sc_.workload, RangeOf(r))));
  }
  InstallCollective(rt_);
  if (flash()) {
    StartController();
  } else {
    cluster_.Register(controller_ep_, [](const Message&) {});
  }
  for (auto& w : workers_) w->Start();

  const ScenarioTiming& t = sc_.timing;
  const Tick per_step = t.step.total() + t.k0 + t.latency;
  const Tick per_recovery = t.hang_timeout + t.optimizer_wait_timeout + t.recreate + t.agent +
                            t.checkpoint_load + 4 * sc_.world_size() *
                                                    (t.store_connect + t.negotiate_message + 1) +
                            100;
  const Tick cap = 4 * (sc_.horizon_steps * per_step +
                        static_cast<Tick>(sc_.faults.size() + 1) *
                            (per_recovery + sc_.horizon_steps * per_step));
  while (!done_ && loop_.now() <= cap && loop_.Step()) {
  }
  if (!done_) {
    throw Error(ErrorCode::kTimeout, "scenario '" + sc_.id + "' did not finish by tick " +
                                         std::to_string(loop_.now()));
  }

  if (result_.status == ScenarioStatus::kCompleted) {
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
  summary.failure_step = -1;
  summary.failure_phase = "summary";
  summary.failure_class = "-";
  for (const auto& r : result_.rows) {
    summary.detection_ticks += r.detection_ticks;
    summary.restart_ticks += std::max<Tick>(0, r.restart_ticks);
    summary.redone_steps += r.redone_steps;
  }
  summary.total_ticks = result_.status == ScenarioStatus::kCompleted ? result_.finished_at : -1;
  summary.mode = std::string(RecoveryModeName(sc_.mode));
  result_.rows.push_back(summary);
  for (auto& r : result_.rows) r.loss_digest = result_.loss_digest;
  result_.event_log = log_.ToString();
  return std::move(result_);
}

}  // namespace

ScenarioResult RunSimulated(const Scenario& sc, const RunObserver& observer) {
  SimRun run(sc, observer);
  return run.Run();
}

ScenarioResult RunScenario(const Scenario& sc, const RunObserver& observer) {
  ValidateScenario(sc);
  if (sc.clock_mode == ClockMode::kReal) return RunReal(sc);
  return RunSimulated(sc, observer);
}

}  // namespace flashrec
