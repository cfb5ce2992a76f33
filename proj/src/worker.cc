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

#include "flashrec/worker.h"

#include <bit>
#include <cstring>

#include "flashrec/error.h"
#include "flashrec/random.h"

namespace flashrec {
namespace {

// Stream salts for the data generator.
constexpr uint64_t kTargetSalt = 0x7461726765740001ULL;
constexpr uint64_t kInputSalt = 0x696e707574000002ULL;
constexpr uint64_t kNoiseSalt = 0x6e6f697365000003ULL;
constexpr uint64_t kInitSalt = 0x696e697400000004ULL;

constexpr double kNoiseScale = 0.01;
constexpr double kInitScale = 0.1;

double Signed(uint64_t bits) { return 2.0 * ToUnit(bits) - 1.0; }

void PutU64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  uint64_t U64(const char* what) {
    if (bytes_.size() - pos_ < 8) {
      throw Error(ErrorCode::kParse, std::string("state: truncated at ") + what);
    }
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  std::vector<double> Doubles(const char* what) {
    const uint64_t n = U64(what);
    if (n > (bytes_.size() - pos_) / 8) {
      throw Error(ErrorCode::kParse, std::string("state: truncated at ") + what);
    }
    std::vector<double> out(n);
    for (auto& d : out) d = std::bit_cast<double>(U64(what));
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  size_t pos_ = 0;
};

}  // namespace

std::string_view TrainPhaseName(TrainPhase p) {
  switch (p) {
    case TrainPhase::kForward:
      return "Forward";
    case TrainPhase::kBackward:
      return "Backward";
    case TrainPhase::kGradSync:
      return "GradSyncBarrier";
    case TrainPhase::kOptimizer:
      return "Optimizer";
  }
  return "?";
}

std::string SerializeState(const ModelState& s) {
  std::string out;
  out.reserve(32 + 8 * (s.params.size() + s.momentum.size()));
  PutU64(out, static_cast<uint64_t>(s.step));
  PutU64(out, s.params.size());
  for (double d : s.params) PutU64(out, std::bit_cast<uint64_t>(d));
  PutU64(out, s.momentum.size());
  for (double d : s.momentum) PutU64(out, std::bit_cast<uint64_t>(d));
  PutU64(out, static_cast<uint64_t>(s.rng_cursor));
  return out;
}

ModelState DeserializeState(std::string_view bytes) {
  Reader r(bytes);
  ModelState s;
  s.step = static_cast<int64_t>(r.U64("step"));
  s.params = r.Doubles("params");
  s.momentum = r.Doubles("momentum");
  s.rng_cursor = static_cast<int64_t>(r.U64("rng_cursor"));
  if (!r.done()) throw Error(ErrorCode::kParse, "state: trailing bytes");
  return s;
}

uint64_t StateDigest(const ModelState& s) {
  const std::string bytes = SerializeState(s);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < bytes.size(); i += 8) {
    uint64_t word = 0;
    std::memcpy(&word, bytes.data() + i, 8);
    h = SplitMix64(h ^ word);
  }
  return h;
}

ParamRange ShardRange(int param_len, int shard_count, int shard_index) {
  if (shard_count < 1 || shard_index < 0 || shard_index >= shard_count ||
      param_len < shard_count) {
    throw Error(ErrorCode::kInvalidArgument,
                "cannot cut " + std::to_string(param_len) + " parameters into " +
                    std::to_string(shard_count) + " shards");
  }
  const int base = param_len / shard_count;
  const int extra = param_len % shard_count;
  ParamRange r;
  r.begin = shard_index * base + std::min(shard_index, extra);
  r.end = r.begin + base + (shard_index < extra ? 1 : 0);
  return r;
}

ModelState InitialState(const WorkloadConfig& cfg, ParamRange range) {
  ModelState s;
  s.params.resize(range.size());
  s.momentum.assign(range.size(), 0.0);
  for (int k = 0; k < range.size(); ++k) {
    s.params[k] = kInitScale * Signed(HashCombine(
                                   {cfg.seed, kInitSalt, static_cast<uint64_t>(range.begin + k)}));
  }
  return s;
}

Batch DrawBatch(const WorkloadConfig& cfg, ParamRange range, int dp_index,
                int64_t cursor) {
  Batch b;
  b.x.resize(cfg.batch_size);
  b.y.resize(cfg.batch_size);
  for (int i = 0; i < cfg.batch_size; ++i) {
    const auto sample = static_cast<uint64_t>(cursor + i);
    const auto dp = static_cast<uint64_t>(dp_index);
    auto& row = b.x[i];
    row.resize(range.size());
    double y = kNoiseScale * Signed(HashCombine(
                                 {cfg.seed, kNoiseSalt, dp, sample, static_cast<uint64_t>(range.begin)}));
    for (int k = 0; k < range.size(); ++k) {
      const auto j = static_cast<uint64_t>(range.begin + k);
      row[k] = Signed(HashCombine({cfg.seed, kInputSalt, dp, sample, j}));
      y += row[k] * Signed(HashCombine({cfg.seed, kTargetSalt, j}));
    }
    b.y[i] = y;
  }
  return b;
}

Gradient ComputeGradient(const WorkloadConfig& cfg, const ModelState& s,
                         ParamRange range, int dp_index) {
  const Batch b = DrawBatch(cfg, range, dp_index, s.rng_cursor);
  Gradient g;
  g.grad.assign(range.size(), 0.0);
  for (int i = 0; i < cfg.batch_size; ++i) {
    double pred = 0;
    for (int k = 0; k < range.size(); ++k) pred += s.params[k] * b.x[i][k];
    const double r = pred - b.y[i];
    g.loss += 0.5 * r * r;
    for (int k = 0; k < range.size(); ++k) g.grad[k] += r * b.x[i][k];
  }
  const double inv = 1.0 / cfg.batch_size;
  g.loss *= inv;
  for (double& v : g.grad) v *= inv;
  return g;
}

std::vector<double> PackGradient(const Gradient& g) {
  std::vector<double> v = g.grad;
  v.push_back(g.loss);
  return v;
}

Gradient UnpackMean(const std::vector<double>& summed, int contributors) {
  if (summed.empty() || contributors < 1) {
    throw Error(ErrorCode::kInvalidArgument, "empty gradient");
  }
  Gradient g;
  const double inv = 1.0 / contributors;
  g.grad.assign(summed.begin(), summed.end() - 1);
  for (double& v : g.grad) v *= inv;
  g.loss = summed.back() * inv;
  return g;
}

void ApplyUpdate(const WorkloadConfig& cfg, const Gradient& mean, ModelState& s) {
  if (mean.grad.size() != s.params.size()) {
    throw Error(ErrorCode::kInvalidArgument, "gradient length mismatch");
  }
  for (size_t k = 0; k < s.params.size(); ++k) {
    s.momentum[k] = cfg.momentum * s.momentum[k] + mean.grad[k];
    s.params[k] -= cfg.learning_rate * s.momentum[k];
  }
  ++s.step;
  s.rng_cursor += cfg.batch_size;
}

ModelState TrainStep(const WorkloadConfig& cfg, const ModelState& s, ParamRange range,
                     int dp_index, int replicas, const ReduceFn& reduce, double* loss) {
  std::vector<double> packed = PackGradient(ComputeGradient(cfg, s, range, dp_index));
  if (reduce) packed = reduce(std::move(packed));
  const Gradient mean = UnpackMean(packed, replicas);
  ModelState next = s;
  ApplyUpdate(cfg, mean, next);
  if (loss) *loss = mean.loss;
  return next;
}

ModelState RollbackIterator(ModelState s, int64_t resume_step, int batch_size) {
  if (resume_step < 0 || resume_step > s.step) {
    throw Error(ErrorCode::kInvalidArgument,
                "resume step " + std::to_string(resume_step) + " outside [0, " +
                    std::to_string(s.step) + "]");
  }
  s.rng_cursor = resume_step * batch_size;
  return s;
}

ModelState RestoreFromReplica(std::string_view payload, int64_t resume_step) {
  ModelState s = DeserializeState(payload);
  if (s.step != resume_step) {
    throw Error(ErrorCode::kRestoration, "donor state is at step " + std::to_string(s.step) +
                                             ", plan resumes at " +
                                             std::to_string(resume_step));
  }
  return s;
}

Checkpoint SaveCheckpoint(const ModelState& s, CheckpointTier tier, Clock& clock,
                          const CheckpointCosts& costs) {
  Checkpoint c;
  c.bytes = SerializeState(s);
  c.tier = tier;
  c.saved_at_step = s.step;
  c.snapshot_cost = costs.k0;
  if (clock.mode() == ClockMode::kSimulated) clock.AdvanceTo(clock.Now() + costs.k0);
  c.durable_at = clock.Now();
  if (tier == CheckpointTier::kPersistent) {
    c.persist_cost = costs.k1;
    c.durable_at += costs.k1;
  }
  return c;
}

ModelState LoadCheckpoint(const std::optional<Checkpoint>& latest) {
  if (!latest) throw Error(ErrorCode::kNotFound, "no checkpoint to load");
  return DeserializeState(latest->bytes);
}

void ControlAutomaton::Apply(ControlAction a) {
  switch (a) {
    case ControlAction::kStop:
      status_ = Status::kStopped;
      reset_done_ = false;
      return;
    case ControlAction::kClean:
      return;
    case ControlAction::kReset:
      reset_done_ = true;
      return;
    case ControlAction::kContinue:
      if (status_ == Status::kRunning) {
        throw Error(ErrorCode::kProtocolViolation, "Continue while running");
      }
      if (!reset_done_) throw Error(ErrorCode::kProtocolViolation, "Continue before Reset");
      status_ = Status::kRunning;
      return;
  }
}

DevicePlugin::DevicePlugin(std::string node_id, int devices) : node_id_(std::move(node_id)) {
  for (int d = 0; d < devices; ++d) devices_.push_back({d, true, FailureClass::kUnclassified});
}

void DevicePlugin::InjectFault(int device_id, FailureClass cls) {
  if (device_id < 0 || device_id >= static_cast<int>(devices_.size())) {
    throw Error(ErrorCode::kInvalidArgument, "no device " + std::to_string(device_id) +
                                                 " on " + node_id_);
  }
  devices_[device_id].ok = false;
  devices_[device_id].failure_class = cls;
}

PluginReport DevicePlugin::Report(Tick now) const { return {node_id_, now, devices_}; }

SimMonitor::SimMonitor(EventLoop& loop, SimCluster& cluster, EndpointId self,
                       EndpointId controller, Tick period, Sample sample)
    : loop_(loop),
      cluster_(cluster),
      self_(std::move(self)),
      controller_(std::move(controller)),
      period_(period),
      sample_(std::move(sample)) {}

void SimMonitor::Start() {
  const uint64_t e = ++epoch_;
  if (period_ <= 0) return;
  loop_.ScheduleAfter(period_, [this, e] { Beat(e); });
}

void SimMonitor::BeatNow() {
  if (period_ <= 0) return;
  HeartbeatRecord hb = sample_();
  hb.sent_at = loop_.now();
  cluster_.Send(self_, controller_, EncodeHeartbeat(hb));
  ++sent_;
}

void SimMonitor::Beat(uint64_t epoch) {
  if (epoch != epoch_) return;
  BeatNow();
  loop_.ScheduleAfter(period_, [this, epoch] { Beat(epoch); });
}

SimWorker::SimWorker(EventLoop& loop, SimCluster& cluster, SimWorkerOptions opts,
                     ModelState initial, SimWorkerHooks hooks)
    : loop_(loop),
      cluster_(cluster),
      opts_(std::move(opts)),
      hooks_(std::move(hooks)),
      monitor_(loop, cluster, opts_.endpoint, opts_.controller, opts_.heartbeat_period,
               [this] { return Sample(); }),
      state_(std::move(initial)),
      tag_(state_.step) {}

void SimWorker::Start() {
  alive_ = true;
  control_ = ControlAutomaton(ControlAutomaton::Status::kRunning);
  cluster_.Register(opts_.endpoint, [this](const Message& m) { OnMessage(m); });
  hb_phase_ = HeartbeatPhase::kForwardBackward;
  monitor_.Start();
  monitor_.BeatNow();
  BeginStep();
}

void SimWorker::StartIdle() {
  alive_ = true;
  control_ = ControlAutomaton(ControlAutomaton::Status::kIdle);
  cluster_.Register(opts_.endpoint, [this](const Message& m) { OnMessage(m); });
  hb_phase_ = HeartbeatPhase::kRestoring;
  monitor_.Start();
  monitor_.BeatNow();
}

void SimWorker::Kill() {
  if (!alive_) return;
  alive_ = false;
  ++epoch_;
  monitor_.Stop();
  inflight_.reset();
  cluster_.Deregister(opts_.endpoint);
}

void SimWorker::OnMessage(const Message& m) {
  if (m.type != "control") return;
  const auto [action, arg] = DecodeControl(m);
  HandleControl(action, arg);
}

void SimWorker::HandleControl(ControlAction a, int64_t arg) {
  if (!alive_) return;
  control_.Apply(a);
  switch (a) {
    case ControlAction::kStop:
      ++epoch_;
      hb_phase_ = HeartbeatPhase::kIdle;
      return;
    case ControlAction::kClean:
      inflight_.reset();
      cluster_.Drain(opts_.endpoint);
      return;
    case ControlAction::kReset:
      cluster_.Deregister(opts_.endpoint);
      cluster_.Register(opts_.endpoint, [this](const Message& m) { OnMessage(m); });
      return;
    case ControlAction::kContinue:
      if (state_.step != arg) {
        throw Error(ErrorCode::kRestoration,
                    "rank " + std::to_string(opts_.rank) + " at step " +
                        std::to_string(state_.step) + " told to continue at " +
                        std::to_string(arg));
      }
      ++epoch_;
      hb_phase_ = HeartbeatPhase::kForwardBackward;
      BeginStep();
      return;
  }
}

void SimWorker::Rollback(int64_t resume_step) {
  state_ = RollbackIterator(std::move(state_), resume_step, opts_.workload.batch_size);
}

void SimWorker::RestoreFrom(std::string_view payload, int64_t resume_step) {
  state_ = RestoreFromReplica(payload, resume_step);
  tag_ = resume_step;
  hb_phase_ = HeartbeatPhase::kIdle;
}

void SimWorker::BeginStep() {
  if (state_.step >= opts_.horizon_steps) {
    finished_ = true;
    hb_phase_ = HeartbeatPhase::kIdle;
    monitor_.BeatNow();
    monitor_.Stop();
    if (hooks_.on_finished) hooks_.on_finished(opts_.rank);
    return;
  }
  const uint64_t e = epoch_;
  const int64_t step = state_.step;
  if (opts_.checkpoint_interval > 0 && step % opts_.checkpoint_interval == 0 &&
      last_checkpoint_step_ != step) {
    last_checkpoint_step_ = step;
    const CheckpointCosts costs = opts_.checkpoint_costs;
    loop_.ScheduleAfter(costs.k0, [this, e, costs] {
      if (!Current(e)) return;
      Checkpoint c;
      c.bytes = SerializeState(state_);
      c.tier = CheckpointTier::kPersistent;
      c.snapshot_cost = costs.k0;
      c.persist_cost = costs.k1;
      c.saved_at_step = state_.step;
      c.durable_at = loop_.now() + costs.k1;
      loop_.ScheduleAfter(costs.k1, [this, c = std::move(c)] {
        if (alive_ && hooks_.on_checkpoint_durable) hooks_.on_checkpoint_durable(opts_.rank, c);
      });
      BeginStep();
    });
    return;
  }
  hb_phase_ = HeartbeatPhase::kForwardBackward;
  train_phase_ = TrainPhase::kForward;
  SetTag(step);
  if (hooks_.on_phase) hooks_.on_phase(opts_.rank, step, TrainPhase::kForward);
  loop_.ScheduleAfter(opts_.timing.forward, [this, e] { RunForward(e); });
}

void SimWorker::RunForward(uint64_t epoch) {
  if (!Current(epoch)) return;
  train_phase_ = TrainPhase::kBackward;
  if (hooks_.on_phase) hooks_.on_phase(opts_.rank, state_.step, TrainPhase::kBackward);
  inflight_ = ComputeGradient(opts_.workload, state_, opts_.range, opts_.dp_index);
  loop_.ScheduleAfter(opts_.timing.backward, [this, epoch] { EnterGradSync(epoch); });
}

void SimWorker::EnterGradSync(uint64_t epoch) {
  if (!Current(epoch) || !inflight_) return;
  train_phase_ = TrainPhase::kGradSync;
  if (hooks_.on_phase) hooks_.on_phase(opts_.rank, state_.step, TrainPhase::kGradSync);
  if (collective_ == nullptr) {
    throw Error(ErrorCode::kFailedPrecondition, "rank " + std::to_string(opts_.rank) +
                                                    " has no communication group");
  }
  collective_->Arrive(opts_.rank, opts_.shard_key, PackGradient(*inflight_),
                      [this, epoch](const std::vector<double>& summed) {
                        if (Current(epoch)) EnterOptimizer(epoch, summed);
                      });
}

void SimWorker::EnterOptimizer(uint64_t epoch, const std::vector<double>& summed) {
  train_phase_ = TrainPhase::kOptimizer;
  hb_phase_ = HeartbeatPhase::kOptimizerStep;
  SetTag(kOptimizerTag);
  if (hooks_.on_phase) hooks_.on_phase(opts_.rank, state_.step, TrainPhase::kOptimizer);
  Gradient mean = UnpackMean(summed, opts_.replicas);
  loop_.ScheduleAfter(opts_.timing.optimizer, [this, epoch, mean = std::move(mean)] {
    if (!Current(epoch)) return;
    ApplyUpdate(opts_.workload, mean, state_);
    inflight_.reset();
    hb_phase_ = HeartbeatPhase::kForwardBackward;
    SetTag(state_.step);
    if (hooks_.on_step_done) hooks_.on_step_done(opts_.rank, state_.step - 1, mean.loss);
    BeginStep();
  });
}

void SimWorker::SetTag(int64_t tag) {
  if (tag == tag_) return;
  tag_ = tag;
  monitor_.BeatNow();
}

HeartbeatRecord SimWorker::Sample() const {
  HeartbeatRecord hb;
  hb.rank = opts_.rank;
  hb.node_id = opts_.endpoint.node_id;
  hb.step_tag = tag_;
  hb.phase = hb_phase_;
  hb.sent_at = loop_.now();
  return hb;
}

}  // namespace flashrec
