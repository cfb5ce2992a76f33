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

// Training process, co-resident monitor and node device plugin.
//
// The workload is a separable linear regression: the parameter vector is
// cut into one contiguous slice per ShardId and every slice is an
// independent sub-model, so a rank holding one shard can train, checkpoint
// and be restored without ever seeing the rest of the model.

#ifndef FLASHREC_WORKER_H_
#define FLASHREC_WORKER_H_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flashrec/clock.h"
#include "flashrec/protocol.h"
#include "flashrec/transport.h"

namespace flashrec {

enum class TrainPhase { kForward, kBackward, kGradSync, kOptimizer };
std::string_view TrainPhaseName(TrainPhase p);

struct ModelState {
  std::vector<double> params;
  std::vector<double> momentum;
  int64_t step = 0;
  int64_t rng_cursor = 0;

  bool operator==(const ModelState&) const = default;
};

// Little-endian layout: step (i64), params (u64 count + f64 each),
// momentum (same), rng_cursor (i64).
std::string SerializeState(const ModelState& s);
// Throws kParse on truncated or trailing bytes.
ModelState DeserializeState(std::string_view bytes);
uint64_t StateDigest(const ModelState& s);

struct WorkloadConfig {
  int param_len = 64;
  int batch_size = 4;
  double learning_rate = 0.01;
  double momentum = 0.9;
  uint64_t seed = 0;
};

// Half-open parameter slice owned by one shard.
struct ParamRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
};

// Splits [0, param_len) into shard_count near-equal contiguous slices.
ParamRange ShardRange(int param_len, int shard_count, int shard_index);

// Same on every replica: depends only on the seed and the slice.
ModelState InitialState(const WorkloadConfig& cfg, ParamRange range);

struct Batch {
  std::vector<std::vector<double>> x;  // batch_size rows of range.size()
  std::vector<double> y;
};

// Samples [cursor, cursor + batch_size) of the data stream of `dp_index`.
// Any sample is reconstructible from its index, which is what makes
// iterator rollback exact.
Batch DrawBatch(const WorkloadConfig& cfg, ParamRange range, int dp_index,
                int64_t cursor);

struct Gradient {
  std::vector<double> grad;
  double loss = 0;
};

Gradient ComputeGradient(const WorkloadConfig& cfg, const ModelState& s,
                         ParamRange range, int dp_index);

// Packs grad and loss for one all-reduce, and unpacks the summed result
// divided by the number of contributors.
std::vector<double> PackGradient(const Gradient& g);
Gradient UnpackMean(const std::vector<double>& summed, int contributors);

// Momentum SGD on the averaged gradient; advances step and rng_cursor.
void ApplyUpdate(const WorkloadConfig& cfg, const Gradient& mean, ModelState& s);

// One full step. `reduce` stands in for the gradient all-reduce and must
// return the element-wise sum across the shard's replicas; it defaults to
// the identity (a single replica).
using ReduceFn = std::function<std::vector<double>(std::vector<double>)>;
ModelState TrainStep(const WorkloadConfig& cfg, const ModelState& s, ParamRange range,
                     int dp_index, int replicas = 1, const ReduceFn& reduce = {},
                     double* loss = nullptr);

// Sets rng_cursor to resume_step * batch_size. Throws kInvalidArgument if
// resume_step is negative or ahead of the state.
ModelState RollbackIterator(ModelState s, int64_t resume_step, int batch_size);

// Deserializes a donor payload and checks it sits at resume_step; throws
// kRestoration otherwise.
ModelState RestoreFromReplica(std::string_view payload, int64_t resume_step);

// ---------------------------------------------------------------------------
// Checkpoints

enum class CheckpointTier { kHostMemory, kPersistent };

struct CheckpointCosts {
  Tick k0 = 2;  // device -> host memory, stalls training
  Tick k1 = 4;  // host memory -> persistent storage, overlapped
};

struct Checkpoint {
  std::string bytes;  // SerializeState layout
  CheckpointTier tier = CheckpointTier::kHostMemory;
  Tick snapshot_cost = 0;
  Tick persist_cost = 0;
  int64_t saved_at_step = 0;
  Tick durable_at = 0;  // tick from which the checkpoint survives a crash
};

// Advances the clock by k0 (the stall). A persistent save additionally
// becomes durable k1 ticks later without further stalling.
Checkpoint SaveCheckpoint(const ModelState& s, CheckpointTier tier, Clock& clock,
                          const CheckpointCosts& costs);
// Throws kNotFound when there is no checkpoint.
ModelState LoadCheckpoint(const std::optional<Checkpoint>& latest);

// ---------------------------------------------------------------------------
// Control

// Stop/Clean/Reset/Continue sequencing for one worker.
class ControlAutomaton {
 public:
  enum class Status { kRunning, kStopped, kIdle };

  explicit ControlAutomaton(Status initial = Status::kRunning) : status_(initial) {
    reset_done_ = initial == Status::kIdle;
  }

  // Throws kProtocolViolation on Continue without a Reset since the last
  // Stop, or on Continue while running.
  void Apply(ControlAction a);

  Status status() const { return status_; }
  bool reset_done() const { return reset_done_; }

 private:
  Status status_;
  bool reset_done_ = false;
};

// Node-level device health agent. Faults surface in the next report.
class DevicePlugin {
 public:
  DevicePlugin(std::string node_id, int devices);

  void InjectFault(int device_id, FailureClass cls);
  PluginReport Report(Tick now) const;
  const std::string& node_id() const { return node_id_; }

 private:
  std::string node_id_;
  std::vector<DeviceStatus> devices_;
};

// Emits a heartbeat every `period` ticks, starting one period after Start,
// until Stop. A non-positive period disables the monitor. `sample` supplies the current record (sent_at is overwritten).
class SimMonitor {
 public:
  using Sample = std::function<HeartbeatRecord()>;

  SimMonitor(EventLoop& loop, SimCluster& cluster, EndpointId self,
             EndpointId controller, Tick period, Sample sample);

  void Start();
  void Stop() { ++epoch_; }
  // Out-of-band beat, used on every step-tag change.
  void BeatNow();
  uint64_t sent() const { return sent_; }

 private:
  void Beat(uint64_t epoch);

  EventLoop& loop_;
  SimCluster& cluster_;
  EndpointId self_;
  EndpointId controller_;
  Tick period_;
  Sample sample_;
  uint64_t epoch_ = 0;
  uint64_t sent_ = 0;
};

// ---------------------------------------------------------------------------
// Simulated training process

struct StepTiming {
  Tick forward = 2;
  Tick backward = 1;
  Tick optimizer = 1;

  Tick total() const { return forward + backward + optimizer; }
};

struct SimWorkerOptions {
  int rank = 0;
  EndpointId endpoint;
  EndpointId controller;
  ParamRange range;
  int shard_key = 0;  // collective key shared by the shard's replicas
  int dp_index = 0;
  int replicas = 1;
  WorkloadConfig workload;
  StepTiming timing;
  Tick heartbeat_period = 1;
  int64_t horizon_steps = 0;
  int64_t checkpoint_interval = 0;  // 0 disables periodic checkpoints
  CheckpointCosts checkpoint_costs;
};

struct SimWorkerHooks {
  // A phase of `step` just began; fault injection attaches here.
  std::function<void(int rank, int64_t step, TrainPhase phase)> on_phase;
  std::function<void(int rank, int64_t step, double loss)> on_step_done;
  std::function<void(int rank, const Checkpoint& ckpt)> on_checkpoint_durable;
  std::function<void(int rank)> on_finished;
};

// Runs the step loop on the event loop: Forward, Backward, the merged
// gradient all-reduce/barrier, then Optimizer. Step tags go out with every
// change: i at Forward start, -1 at Optimizer start, i+1 at Optimizer end.
class SimWorker {
 public:
  SimWorker(EventLoop& loop, SimCluster& cluster, SimWorkerOptions opts,
            ModelState initial, SimWorkerHooks hooks);
  SimWorker(const SimWorker&) = delete;
  SimWorker& operator=(const SimWorker&) = delete;

  void SetCollective(SimCollective* c) { collective_ = c; }

  // Registers the endpoint and starts training plus heartbeats.
  void Start();
  // Registers and heartbeats but waits in Idle for Restore and Continue.
  void StartIdle();
  // Process death: endpoint gone, heartbeats stop, pending work dropped.
  void Kill();

  // Control actions normally arrive as messages; exposed for tests.
  void HandleControl(ControlAction a, int64_t arg);

  void Rollback(int64_t resume_step);
  // A state loaded from the checkpoint at `step` is not re-saved there.
  void MarkCheckpointed(int64_t step) { last_checkpoint_step_ = step; }
  void RestoreFrom(std::string_view payload, int64_t resume_step);
  std::string Snapshot() const { return SerializeState(state_); }

  int rank() const { return opts_.rank; }
  const EndpointId& endpoint() const { return opts_.endpoint; }
  bool alive() const { return alive_; }
  bool finished() const { return finished_; }
  int64_t step_tag() const { return tag_; }
  TrainPhase train_phase() const { return train_phase_; }
  HeartbeatPhase heartbeat_phase() const { return hb_phase_; }
  ControlAutomaton::Status status() const { return control_.status(); }
  const ModelState& state() const { return state_; }
  bool has_inflight_gradient() const { return inflight_.has_value(); }
  const SimMonitor& monitor() const { return monitor_; }

 private:
  void OnMessage(const Message& m);
  void BeginStep();
  void RunForward(uint64_t epoch);
  void EnterGradSync(uint64_t epoch);
  void EnterOptimizer(uint64_t epoch, const std::vector<double>& summed);
  void SetTag(int64_t tag);
  HeartbeatRecord Sample() const;
  // Callback guard: false once the worker died or was stopped.
  bool Current(uint64_t epoch) const { return alive_ && epoch == epoch_; }

  EventLoop& loop_;
  SimCluster& cluster_;
  SimWorkerOptions opts_;
  SimWorkerHooks hooks_;
  SimMonitor monitor_;
  SimCollective* collective_ = nullptr;

  ModelState state_;
  int64_t tag_ = 0;
  TrainPhase train_phase_ = TrainPhase::kForward;
  HeartbeatPhase hb_phase_ = HeartbeatPhase::kIdle;
  ControlAutomaton control_;
  std::optional<Gradient> inflight_;
  bool alive_ = false;
  bool finished_ = false;
  uint64_t epoch_ = 0;
  int64_t last_checkpoint_step_ = -1;
};

}  // namespace flashrec

#endif  // FLASHREC_WORKER_H_
