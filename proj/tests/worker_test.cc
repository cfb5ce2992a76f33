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

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numeric>

#include "flashrec/error.h"
#include "flashrec/topology.h"

namespace flashrec {
namespace {

const EndpointId kController{"controller", 0};

WorkloadConfig Cfg(uint64_t seed = 3) {
  WorkloadConfig c;
  c.seed = seed;
  return c;
}

TEST(StateCodecTest, RoundTripBitExact) {
  ModelState s = InitialState(Cfg(), {0, 64});
  s.momentum[3] = -0.0;
  s.params[5] = 1e-310;  // subnormal
  s.step = 17;
  s.rng_cursor = 68;
  const ModelState back = DeserializeState(SerializeState(s));
  EXPECT_EQ(SerializeState(back), SerializeState(s));
  EXPECT_EQ(StateDigest(back), StateDigest(s));
  EXPECT_TRUE(std::signbit(back.momentum[3]));
}

TEST(StateCodecTest, LittleEndianLayout) {
  ModelState s;
  s.step = 0x0102;
  s.params = {1.0};
  s.rng_cursor = 9;
  const std::string b = SerializeState(s);
  ASSERT_EQ(b.size(), 8u + 8 + 8 + 8 + 8);
  EXPECT_EQ(b[0], 0x02);
  EXPECT_EQ(b[1], 0x01);
  EXPECT_EQ(b[8], 1);  // params count
  // 1.0 = 0x3ff0000000000000, high byte last.
  EXPECT_EQ(static_cast<unsigned char>(b[23]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(b[22]), 0xf0);
  EXPECT_EQ(b[24], 0);  // momentum count
  EXPECT_EQ(b[32], 9);
}

TEST(StateCodecTest, RejectsTruncatedAndTrailing) {
  const std::string b = SerializeState(InitialState(Cfg(), {0, 4}));
  try {
    DeserializeState(b.substr(0, b.size() - 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
  }
  EXPECT_THROW(DeserializeState(b + "x"), Error);
}

TEST(ShardRangeTest, CoversContiguously) {
  for (int shards : {1, 2, 3, 7, 64}) {
    int next = 0;
    for (int i = 0; i < shards; ++i) {
      ParamRange r = ShardRange(64, shards, i);
      EXPECT_EQ(r.begin, next);
      EXPECT_GE(r.size(), 64 / shards);
      next = r.end;
    }
    EXPECT_EQ(next, 64);
  }
  EXPECT_THROW(ShardRange(4, 5, 0), Error);
}

TEST(TrainStepTest, DataParallelReplicasStayIdentical) {
  const WorkloadConfig cfg = Cfg();
  const ParamRange range{0, 64};
  ModelState a = InitialState(cfg, range);
  ModelState b = InitialState(cfg, range);
  for (int step = 0; step < 20; ++step) {
    // Sequential stand-in for the all-reduce: rank order, rank 0 first.
    const auto ga = PackGradient(ComputeGradient(cfg, a, range, 0));
    const auto gb = PackGradient(ComputeGradient(cfg, b, range, 1));
    std::vector<double> sum = ga;
    for (size_t j = 0; j < sum.size(); ++j) sum[j] += gb[j];
    ReduceFn reduce = [&](std::vector<double>) { return sum; };
    a = TrainStep(cfg, a, range, 0, 2, reduce);
    b = TrainStep(cfg, b, range, 1, 2, reduce);
    ASSERT_EQ(StateDigest(a), StateDigest(b));
  }
  EXPECT_EQ(a.step, 20);
  EXPECT_EQ(a.rng_cursor, 20 * cfg.batch_size);
}

TEST(TrainStepTest, LossDecreasesOverHundredSteps) {
  const WorkloadConfig cfg = Cfg(11);
  const ParamRange range{0, 64};
  ModelState s = InitialState(cfg, range);
  std::vector<double> losses;
  for (int step = 0; step < 100; ++step) {
    double loss = 0;
    s = TrainStep(cfg, s, range, 0, 1, {}, &loss);
    losses.push_back(loss);
  }
  const double head = std::accumulate(losses.begin(), losses.begin() + 10, 0.0);
  const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0);
  EXPECT_LT(tail, 0.5 * head);
}

TEST(RollbackTest, CursorArithmetic) {
  ModelState s = InitialState(Cfg(), {0, 8});
  s.step = 12;
  EXPECT_EQ(RollbackIterator(s, 10, 4).rng_cursor, 40);
  EXPECT_EQ(RollbackIterator(s, 0, 4).rng_cursor, 0);
  try {
    RollbackIterator(s, 13, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(RollbackTest, NextBatchMatchesReferenceRun) {
  const WorkloadConfig cfg = Cfg(5);
  const ParamRange range{8, 24};
  // Reference run: log the batch consumed at each step.
  ModelState s = InitialState(cfg, range);
  std::vector<Batch> log;
  for (int step = 0; step < 12; ++step) {
    log.push_back(DrawBatch(cfg, range, 1, s.rng_cursor));
    s = TrainStep(cfg, s, range, 1);
  }
  ModelState rolled = RollbackIterator(s, 10, cfg.batch_size);
  const Batch next = DrawBatch(cfg, range, 1, rolled.rng_cursor);
  EXPECT_EQ(next.x, log[10].x);
  EXPECT_EQ(next.y, log[10].y);
}

TEST(RestoreTest, RejectsWrongStep) {
  ModelState s = InitialState(Cfg(), {0, 4});
  s.step = 11;
  EXPECT_EQ(RestoreFromReplica(SerializeState(s), 11), s);
  try {
    RestoreFromReplica(SerializeState(s), 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRestoration);
  }
}

TEST(CheckpointTest, RoundTripAndCosts) {
  Clock clock = Clock::Simulated();
  ModelState s = InitialState(Cfg(), {0, 16});
  s.step = 20;
  s.rng_cursor = 80;
  Checkpoint host = SaveCheckpoint(s, CheckpointTier::kHostMemory, clock, {2, 4});
  EXPECT_EQ(clock.Now(), 2);
  EXPECT_EQ(host.durable_at, 2);
  Checkpoint disk = SaveCheckpoint(s, CheckpointTier::kPersistent, clock, {2, 4});
  EXPECT_EQ(clock.Now(), 4);  // k1 overlaps
  EXPECT_EQ(disk.durable_at, 8);
  EXPECT_EQ(disk.saved_at_step, 20);
  EXPECT_EQ(LoadCheckpoint(disk), s);
  try {
    LoadCheckpoint(std::nullopt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotFound);
  }
}

TEST(ControlAutomatonTest, ContinueRequiresReset) {
  ControlAutomaton c;
  EXPECT_THROW(c.Apply(ControlAction::kContinue), Error);
  c.Apply(ControlAction::kStop);
  EXPECT_THROW(c.Apply(ControlAction::kContinue), Error);
  c.Apply(ControlAction::kClean);
  c.Apply(ControlAction::kReset);
  c.Apply(ControlAction::kContinue);
  EXPECT_EQ(c.status(), ControlAutomaton::Status::kRunning);
  ControlAutomaton fresh(ControlAutomaton::Status::kIdle);
  fresh.Apply(ControlAction::kContinue);
}

TEST(DevicePluginTest, ReportsInjectedDevice) {
  DevicePlugin plugin("node-0001", 8);
  EXPECT_TRUE(plugin.Report(0).AllOk());
  plugin.InjectFault(3, FailureClass::kNetworkAnomaly);
  PluginReport r = plugin.Report(5);
  EXPECT_FALSE(r.AllOk());
  EXPECT_EQ(r.FaultyDevices(), std::vector<int>{3});
  EXPECT_EQ(r.devices[3].failure_class, FailureClass::kNetworkAnomaly);
  PluginReport back = DecodePluginReport(EncodePluginReport(r));
  EXPECT_EQ(back.FaultyDevices(), std::vector<int>{3});
  EXPECT_EQ(back.reported_at, 5);
}

TEST(SimMonitorTest, BeatsEveryPeriod) {
  EventLoop loop;
  SimCluster cluster(loop);
  cluster.Register(kController);
  const EndpointId self{"node-0000", 0};
  cluster.Register(self);
  SimMonitor mon(loop, cluster, self, kController, 2, [] { return HeartbeatRecord{}; });
  mon.Start();
  loop.RunUntil(10);
  EXPECT_EQ(mon.sent(), 5u);
}

TEST(SimMonitorTest, SilentAfterDeath) {
  EventLoop loop;
  SimCluster cluster(loop);
  cluster.Register(kController);
  const EndpointId self{"node-0000", 0};
  cluster.Register(self);
  SimMonitor mon(loop, cluster, self, kController, 2, [] { return HeartbeatRecord{}; });
  mon.Start();
  loop.Schedule(7, [&] { mon.Stop(); });
  loop.RunUntil(30);
  Tick last = -1;
  for (const Message& m : cluster.Inbox(kController)) last = DecodeHeartbeat(m).sent_at;
  EXPECT_LE(last, 7);
  EXPECT_EQ(mon.sent(), 3u);
}

// Small simulated cluster with one worker per node.
struct MiniCluster {
  EventLoop loop;
  SimCluster cluster{loop};
  ParallelTopology topo;
  std::unique_ptr<SimCollective> collective;
  std::vector<std::unique_ptr<SimWorker>> workers;
  Tick finished_at = -1;

  MiniCluster(int dp, int zero, int64_t horizon, int64_t ckpt_interval = 0) {
    topo = BuildTopology(dp, 1, 1, zero);
    cluster.Register(kController);
    std::vector<int> members(topo.world_size());
    std::iota(members.begin(), members.end(), 0);
    collective = std::make_unique<SimCollective>(
        loop, PlanGroup(members, MakeRankTable(topo.world_size(), 1)));
    for (int r = 0; r < topo.world_size(); ++r) {
      const RankCoords c = topo.CoordsOf(r);
      SimWorkerOptions o;
      o.rank = r;
      o.endpoint = {NodeName(r), 0};
      o.controller = kController;
      o.range = ShardRange(64, topo.shard_count(), c.zero);
      o.shard_key = c.zero;
      o.dp_index = c.dp;
      o.replicas = dp;
      o.workload = Cfg();
      o.horizon_steps = horizon;
      o.checkpoint_interval = ckpt_interval;
      workers.push_back(std::make_unique<SimWorker>(loop, cluster, o,
                                                    InitialState(o.workload, o.range),
                                                    FinishHooks()));
    }
  }

  SimWorkerHooks FinishHooks() {
    SimWorkerHooks h;
    h.on_finished = [this](int) { finished_at = loop.now(); };
    return h;
  }

  void Start() {
    for (auto& w : workers) w->SetCollective(collective.get());
    for (auto& w : workers) w->Start();
  }

  std::vector<int64_t> TagsOf(int rank) {
    std::vector<int64_t> tags;
    for (const Message& m : cluster.Inbox(kController)) {
      HeartbeatRecord hb = DecodeHeartbeat(m);
      if (hb.rank == rank && (tags.empty() || tags.back() != hb.step_tag)) {
        tags.push_back(hb.step_tag);
      }
    }
    return tags;
  }
};

TEST(SimWorkerTest, TagTraceOverOneStep) {
  MiniCluster mc(2, 1, 1);
  mc.Start();
  mc.loop.Run();
  EXPECT_EQ(mc.TagsOf(0), (std::vector<int64_t>{0, -1, 1}));
  EXPECT_TRUE(mc.workers[0]->finished());
}

TEST(SimWorkerTest, MatchesSequentialReference) {
  MiniCluster mc(2, 2, 6);
  mc.Start();
  mc.loop.Run();
  // Reference: same arithmetic without the simulator.
  const WorkloadConfig cfg = Cfg();
  for (int zero = 0; zero < 2; ++zero) {
    const ParamRange range = ShardRange(64, 2, zero);
    ModelState a = InitialState(cfg, range);
    ModelState b = a;
    for (int step = 0; step < 6; ++step) {
      auto ga = PackGradient(ComputeGradient(cfg, a, range, 0));
      const auto gb = PackGradient(ComputeGradient(cfg, b, range, 1));
      for (size_t j = 0; j < ga.size(); ++j) ga[j] += gb[j];
      ReduceFn reduce = [&](std::vector<double>) { return ga; };
      a = TrainStep(cfg, a, range, 0, 2, reduce);
      b = TrainStep(cfg, b, range, 1, 2, reduce);
    }
    EXPECT_EQ(mc.workers[zero]->state(), a);
    EXPECT_EQ(mc.workers[2 + zero]->state(), b);
    EXPECT_EQ(a.params, b.params);
  }
  // Every step is forward + backward + optimizer with no other stalls.
  EXPECT_EQ(mc.finished_at, 6 * StepTiming{}.total());
}

TEST(SimWorkerTest, StopDuringBlockedBarrierKeepsStepI) {
  MiniCluster mc(2, 1, 10);
  mc.Start();
  // Rank 1 dies during the forward pass of step 4.
  mc.loop.Schedule(4 * 4 + 1, [&] { mc.workers[1]->Kill(); });
  mc.loop.RunUntil(40);
  SimWorker& w = *mc.workers[0];
  EXPECT_EQ(w.train_phase(), TrainPhase::kGradSync);
  EXPECT_EQ(mc.collective->Waiting(), std::vector<int>{0});
  const ModelState before = w.state();
  w.HandleControl(ControlAction::kStop, 0);
  EXPECT_EQ(w.status(), ControlAutomaton::Status::kStopped);
  EXPECT_EQ(w.state(), before);
  EXPECT_EQ(w.state().step, 4);
  EXPECT_TRUE(w.has_inflight_gradient());
  w.HandleControl(ControlAction::kClean, 0);
  EXPECT_FALSE(w.has_inflight_gradient());
  w.HandleControl(ControlAction::kClean, 0);  // nothing left: no-op
  EXPECT_THROW(w.HandleControl(ControlAction::kContinue, 4), Error);
}

TEST(SimWorkerTest, StopAfterOptimizerKeepsStepIPlusOne) {
  MiniCluster mc(2, 1, 10);
  mc.Start();
  // Step 4's optimizer runs over ticks 19-20; rank 1 dies inside it.
  mc.loop.Schedule(4 * 4 + 4, [&] { mc.workers[1]->Kill(); });
  mc.loop.RunUntil(40);
  SimWorker& w = *mc.workers[0];
  EXPECT_EQ(w.state().step, 5);
  EXPECT_EQ(w.step_tag(), 5);
  w.HandleControl(ControlAction::kStop, 0);
  EXPECT_EQ(w.state().step, 5);
}

TEST(SimWorkerTest, CheckpointStallEveryInterval) {
  MiniCluster mc(1, 1, 20, 5);
  std::vector<int64_t> saved;
  mc.workers.clear();
  SimWorkerOptions o;
  o.endpoint = {"node-0000", 0};
  o.controller = kController;
  o.range = {0, 64};
  o.workload = Cfg();
  o.horizon_steps = 20;
  o.checkpoint_interval = 5;
  SimWorkerHooks hooks;
  hooks.on_checkpoint_durable = [&](int, const Checkpoint& c) {
    saved.push_back(c.saved_at_step);
  };
  Tick finished_at = -1;
  hooks.on_finished = [&](int) { finished_at = mc.loop.now(); };
  mc.workers.push_back(std::make_unique<SimWorker>(
      mc.loop, mc.cluster, o, InitialState(o.workload, o.range), hooks));
  mc.collective = std::make_unique<SimCollective>(mc.loop, PlanGroup({0}, MakeRankTable(1, 1)));
  mc.workers[0]->SetCollective(mc.collective.get());
  mc.workers[0]->Start();
  mc.loop.Run();
  EXPECT_EQ(saved, (std::vector<int64_t>{0, 5, 10, 15}));
  const Tick k0 = CheckpointCosts{}.k0;
  EXPECT_EQ(mc.workers[0]->state().step, 20);
  EXPECT_EQ(finished_at, 20 * StepTiming{}.total() + 4 * k0);
}

TEST(SimWorkerTest, RestoreFromDonorMatchesDigest) {
  // Vanilla DP: rank 1 dies, a replacement copies rank 0's state.
  MiniCluster mc(2, 1, 10);
  mc.Start();
  mc.loop.Schedule(4 * 4 + 1, [&] { mc.workers[1]->Kill(); });
  mc.loop.RunUntil(30);
  SimWorker& donor = *mc.workers[0];
  donor.HandleControl(ControlAction::kStop, 0);

  SimWorkerOptions o;
  o.rank = 1;
  o.endpoint = {"spare-0000", 0};
  o.controller = kController;
  o.range = {0, 64};
  o.dp_index = 1;
  o.replicas = 2;
  o.workload = Cfg();
  o.horizon_steps = 10;
  SimWorker fresh(mc.loop, mc.cluster, o, ModelState{}, {});
  fresh.StartIdle();
  bool done = false;
  CopyState(mc.cluster, donor.endpoint(), fresh.endpoint(), donor.Snapshot(), 2,
            [&](std::string payload) {
              fresh.RestoreFrom(payload, 4);
              done = true;
            },
            [](const Error&) { FAIL(); });
  mc.loop.RunUntil(40);
  ASSERT_TRUE(done);
  EXPECT_EQ(StateDigest(fresh.state()), StateDigest(donor.state()));
  fresh.HandleControl(ControlAction::kContinue, 4);
}

TEST(SimWorkerTest, ZeroShardRestoredFromPeerGroup) {
  // dp=2, zero=2: rank 1 holds zero slice 1; its only replica is rank 3.
  MiniCluster mc(2, 2, 10);
  mc.Start();
  mc.loop.RunUntil(4 * 4);  // step-4 boundary
  const uint64_t pre_failure = StateDigest(mc.workers[1]->state());
  mc.workers[1]->Kill();
  const auto verdict = CheckRecoverability(mc.topo, {1});
  ASSERT_EQ(verdict.donor_map.at(1), 3);
  mc.loop.RunUntil(30);
  SimWorker& donor = *mc.workers[3];
  ASSERT_EQ(donor.state().step, 4);
  const ModelState assembled =
      RollbackIterator(RestoreFromReplica(donor.Snapshot(), 4), 4, Cfg().batch_size);
  EXPECT_EQ(StateDigest(assembled), pre_failure);
}

}  // namespace
}  // namespace flashrec
