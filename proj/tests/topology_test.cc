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

#include "flashrec/topology.h"

#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <random>
#include <thread>

#include "flashrec/error.h"

namespace flashrec {
namespace {

// Independent placement oracle: walk the nested loops directly and hand out
// ranks with a counter.
std::map<ShardId, std::vector<int>> EnumerateHolders(int dp, int tp, int pp,
                                                     int zero) {
  std::map<ShardId, std::vector<int>> holders;
  int rank = 0;
  for (int d = 0; d < dp; ++d)
    for (int p = 0; p < pp; ++p)
      for (int t = 0; t < tp; ++t)
        for (int z = 0; z < zero; ++z) holders[ShardId{p, t, z}].push_back(rank++);
  return holders;
}

std::map<int, ShardId> EnumerateShardOf(int dp, int tp, int pp, int zero) {
  std::map<int, ShardId> out;
  for (const auto& [shard, ranks] : EnumerateHolders(dp, tp, pp, zero))
    for (int r : ranks) out[r] = shard;
  return out;
}

ErrorCode CodeOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kInvalidArgument;
}

TEST(BuildTopologyTest, PureDataParallel) {
  ParallelTopology t = BuildTopology(4, 1, 1, 1);
  EXPECT_EQ(t.world_size(), 4);
  EXPECT_EQ(t.HoldersOf(ShardId{}), (std::vector<int>{0, 1, 2, 3}));
}

TEST(BuildTopologyTest, ProductRule) {
  EXPECT_EQ(BuildTopology(2, 2, 2, 1).world_size(), 8);
}

TEST(BuildTopologyTest, EveryShardHeldByDpRanks) {
  ParallelTopology t = BuildTopology(2, 2, 2, 2);
  EXPECT_EQ(t.world_size(), 16);
  auto oracle = EnumerateHolders(2, 2, 2, 2);
  ASSERT_EQ(oracle.size(), 8u);
  for (const auto& [shard, ranks] : oracle) {
    EXPECT_EQ(ranks.size(), 2u);
    EXPECT_EQ(t.HoldersOf(shard), ranks) << shard.ToString();
  }
}

TEST(BuildTopologyTest, RejectsNonPositiveDegrees) {
  EXPECT_EQ(CodeOf([] { BuildTopology(0, 1, 1, 1); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(CodeOf([] { BuildTopology(1, -2, 1, 1); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(CodeOf([] { BuildTopology(1, 1, 1, 0); }), ErrorCode::kInvalidArgument);
}

TEST(BuildTopologyTest, EveryRankInExactlyOneGroupPerDimension) {
  ParallelTopology t = BuildTopology(3, 2, 2, 2);
  std::vector<int> seen(t.world_size(), 0);
  for (int r = 0; r < t.world_size(); ++r) {
    RankCoords c = t.CoordsOf(r);
    EXPECT_EQ(t.RankOf(c), r);
    ++seen[r];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(ShardMapTest, PureDpHoldsFullModel) {
  ParallelTopology t = BuildTopology(4, 1, 1, 1);
  for (int r = 0; r < 4; ++r) {
    EXPECT_EQ(ShardMap(t, r), (std::set<ShardId>{ShardId{0, 0, 0}}));
  }
}

TEST(ShardMapTest, ZeroSlicesDisjointWithinGroupSharedAcrossGroups) {
  ParallelTopology t = BuildTopology(2, 1, 1, 2);
  auto oracle = EnumerateShardOf(2, 1, 1, 2);
  for (int r = 0; r < 4; ++r) {
    EXPECT_EQ(ShardMap(t, r), (std::set<ShardId>{oracle[r]}));
  }
  EXPECT_NE(ShardMap(t, 0), ShardMap(t, 1));
  EXPECT_EQ(ShardMap(t, 0), ShardMap(t, 2));
  EXPECT_EQ(ShardMap(t, 1), ShardMap(t, 3));
}

TEST(ShardMapTest, NoRedundancyWithoutDp) {
  ParallelTopology t = BuildTopology(1, 2, 2, 1);
  std::set<ShardId> all;
  for (int r = 0; r < 4; ++r) {
    auto s = ShardMap(t, r);
    all.insert(s.begin(), s.end());
  }
  EXPECT_EQ(all.size(), 4u);
}

TEST(ShardMapTest, RankOutOfRange) {
  ParallelTopology t = BuildTopology(2, 1, 1, 1);
  EXPECT_EQ(CodeOf([&] { ShardMap(t, 2); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(CodeOf([&] { ShardMap(t, -1); }), ErrorCode::kInvalidArgument);
}

TEST(CheckRecoverabilityTest, SingleFaultPureDp) {
  auto v = CheckRecoverability(BuildTopology(4, 1, 1, 1), {0});
  EXPECT_TRUE(v.recoverable);
  EXPECT_EQ(v.donor_map, (std::map<int, int>{{0, 1}}));
  EXPECT_TRUE(v.lost_shards.empty());
}

TEST(CheckRecoverabilityTest, WholeGroupLost) {
  auto v = CheckRecoverability(BuildTopology(4, 1, 1, 1), {0, 1, 2, 3});
  EXPECT_FALSE(v.recoverable);
  EXPECT_TRUE(v.donor_map.empty());
  EXPECT_EQ(v.lost_shards, (std::vector<ShardId>{ShardId{0, 0, 0}}));
}

TEST(CheckRecoverabilityTest, ZeroDonorInPeerGroup) {
  auto v = CheckRecoverability(BuildTopology(2, 1, 1, 2), {0});
  ASSERT_TRUE(v.recoverable);
  // Oracle: rank 0's zero slice lives on rank 2 in the peer replica group.
  auto oracle = EnumerateHolders(2, 1, 1, 2);
  EXPECT_EQ(oracle[(ShardId{0, 0, 0})], (std::vector<int>{0, 2}));
  EXPECT_EQ(v.donor_map.at(0), 2);
}

TEST(CheckRecoverabilityTest, EmptyFaultySet) {
  auto v = CheckRecoverability(BuildTopology(2, 2, 1, 1), {});
  EXPECT_TRUE(v.recoverable);
  EXPECT_TRUE(v.donor_map.empty());
}

TEST(CheckRecoverabilityTest, FaultsInOneReplicaGroupAlwaysRecoverable) {
  for (auto [dp, tp, pp, zero] : std::vector<std::array<int, 4>>{
           {2, 1, 1, 1}, {2, 2, 2, 2}, {3, 1, 2, 2}, {4, 2, 1, 1}}) {
    ParallelTopology t = BuildTopology(dp, tp, pp, zero);
    for (int r = 0; r < t.world_size(); ++r) {
      auto group = t.ReplicaGroupOf(r);
      std::set<int> faulty(group.begin(), group.end());
      EXPECT_TRUE(CheckRecoverability(t, faulty).recoverable);
    }
  }
}

TEST(CheckRecoverabilityTest, AgreesWithBruteForceOnRandomFaultSets) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 500; ++trial) {
    const int dp = 1 + static_cast<int>(gen() % 3);
    const int tp = 1 + static_cast<int>(gen() % 2);
    const int pp = 1 + static_cast<int>(gen() % 2);
    const int zero = 1 + static_cast<int>(gen() % 3);
    ParallelTopology t = BuildTopology(dp, tp, pp, zero);
    std::set<int> faulty;
    for (int r = 0; r < t.world_size(); ++r)
      if (gen() % 3 == 0) faulty.insert(r);

    auto holders = EnumerateHolders(dp, tp, pp, zero);
    auto shard_of = EnumerateShardOf(dp, tp, pp, zero);
    bool expect_ok = true;
    std::map<int, int> expect_donors;
    for (int r : faulty) {
      int donor = -1;
      for (int h : holders[shard_of[r]])
        if (!faulty.contains(h) && (donor < 0 || h < donor)) donor = h;
      if (donor < 0) expect_ok = false;
      expect_donors[r] = donor;
    }
    auto v = CheckRecoverability(t, faulty);
    ASSERT_EQ(v.recoverable, expect_ok);
    EXPECT_EQ(v.recoverable, v.lost_shards.empty());
    if (expect_ok) EXPECT_EQ(v.donor_map, expect_donors);
  }
}

// ---------------------------------------------------------------------------

TEST(RankTableTest, EmptyWorldRejected) {
  EXPECT_EQ(CodeOf([] { ParseRankTable(R"({"version":1,"world_size":0,"entries":[]})"); }),
            ErrorCode::kParse);
}

TEST(RankTableTest, HealthyTableRoundTripsByteIdentically) {
  RankTable rt = MakeRankTable(4, 2);
  std::string bytes = SerializeRankTable(rt);
  EXPECT_EQ(bytes,
            R"({"version":1,"world_size":4,"entries":[)"
            R"({"rank":0,"node_id":"node-0000","device_id":0,"status":"healthy"},)"
            R"({"rank":1,"node_id":"node-0000","device_id":1,"status":"healthy"},)"
            R"({"rank":2,"node_id":"node-0001","device_id":0,"status":"healthy"},)"
            R"({"rank":3,"node_id":"node-0001","device_id":1,"status":"healthy"}]})");
  RankTable back = ParseRankTable(bytes);
  EXPECT_EQ(back, rt);
  EXPECT_EQ(SerializeRankTable(back), bytes);
}

TEST(RankTableTest, VersionAndReplacedStatusPreserved) {
  std::vector<RankEntry> e = MakeRankTable(4, 1).entries();
  e[2].status = RankStatus::kReplaced;
  e[2].node_id = "spare-7";
  RankTable rt(7, e);
  RankTable back = ParseRankTable(SerializeRankTable(rt));
  EXPECT_EQ(back.version(), 7);
  EXPECT_EQ(back.entry(2).status, RankStatus::kReplaced);
  EXPECT_EQ(back, rt);
}

TEST(RankTableTest, ParseErrorsNameTheField) {
  auto message = [](std::string_view doc) -> std::string {
    try {
      ParseRankTable(doc);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kParse);
      return e.what();
    }
    return "";
  };
  EXPECT_NE(message("{not json").find("document"), std::string::npos);
  EXPECT_NE(message(R"({"world_size":1,"entries":[]})").find("version"), std::string::npos);
  EXPECT_NE(message(R"({"version":1,"world_size":2,"entries":[)"
                    R"({"rank":0,"node_id":"a","device_id":0,"status":"healthy"},)"
                    R"({"rank":0,"node_id":"a","device_id":1,"status":"healthy"}]})")
                .find("duplicate"),
            std::string::npos);
  EXPECT_NE(message(R"({"version":1,"world_size":2,"entries":[)"
                    R"({"rank":0,"node_id":"a","device_id":0,"status":"healthy"},)"
                    R"({"rank":5,"node_id":"a","device_id":1,"status":"healthy"}]})")
                .find("non-contiguous"),
            std::string::npos);
  EXPECT_NE(message(R"({"version":1,"world_size":1,"entries":[)"
                    R"({"rank":0,"node_id":"a","device_id":0,"status":"sad"}]})")
                .find("status"),
            std::string::npos);
  EXPECT_NE(message(R"({"version":1,"world_size":1,"entries":[)"
                    R"({"rank":0,"node_id":3,"device_id":0,"status":"healthy"}]})")
                .find("node_id"),
            std::string::npos);
}

TEST(RankTableTest, RandomTablesRoundTrip) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(gen() % 40);
    std::vector<RankEntry> entries;
    for (int r = 0; r < n; ++r) {
      entries.push_back({r, "n" + std::to_string(gen() % 7) + "\"\\x",
                         static_cast<int>(gen() % 8),
                         static_cast<RankStatus>(gen() % 3)});
    }
    std::shuffle(entries.begin(), entries.end(), gen);
    RankTable rt(static_cast<int64_t>(gen() % 1000), entries);
    std::string bytes = SerializeRankTable(rt);
    RankTable back = ParseRankTable(bytes);
    ASSERT_EQ(back, rt);
    ASSERT_EQ(SerializeRankTable(back), bytes);
  }
}

TEST(ReplaceNodeTest, SingleReplacementBumpsOnce) {
  RankTable rt = MakeRankTable(4, 2);
  RankTable out = ReplaceNode(rt, NodeName(0), "nodeX");
  EXPECT_EQ(out.version(), rt.version() + 1);
  for (int r = 0; r < 4; ++r) EXPECT_EQ(out.entry(r).rank, r);
  EXPECT_EQ(out.entry(0).node_id, "nodeX");
  EXPECT_EQ(out.entry(0).status, RankStatus::kReplaced);
  EXPECT_EQ(out.entry(2).node_id, NodeName(1));
  EXPECT_EQ(out.entry(2).status, RankStatus::kHealthy);
}

TEST(ReplaceNodeTest, TwiceKeepsLastReplacement) {
  RankTable rt = MakeRankTable(4, 2);
  RankTable out = ReplaceNode(ReplaceNode(rt, NodeName(1), "x1"), "x1", "x2");
  EXPECT_EQ(out.version(), rt.version() + 2);
  EXPECT_EQ(out.RanksOnNode("x2"), (std::vector<int>{2, 3}));
  EXPECT_FALSE(out.HasNode("x1"));
}

TEST(ReplaceNodeTest, MutatesExactlyTheNodesEntries) {
  RankTable rt = MakeRankTable(16, 4);
  RankTable out = ReplaceNode(rt, NodeName(1), "fresh");
  int mutated = 0;
  for (int r = 0; r < 16; ++r)
    if (!(out.entries()[r] == rt.entries()[r])) ++mutated;
  EXPECT_EQ(mutated, 4);
  EXPECT_EQ(out.RanksOnNode("fresh"), (std::vector<int>{4, 5, 6, 7}));
}

TEST(ReplaceNodeTest, UnknownNode) {
  EXPECT_EQ(CodeOf([] { ReplaceNode(MakeRankTable(2, 1), "ghost", "x"); }),
            ErrorCode::kNotFound);
}

TEST(ReplaceNodeTest, VersionStrictlyMonotone) {
  std::mt19937_64 gen(3);
  RankTable rt = MakeRankTable(12, 3);
  int64_t last = rt.version();
  for (int i = 0; i < 100; ++i) {
    auto nodes = rt.Nodes();
    rt = ReplaceNode(rt, nodes[gen() % nodes.size()], "r" + std::to_string(i));
    EXPECT_GT(rt.version(), last);
    last = rt.version();
  }
}

TEST(RankTableFileTest, AtomicWriteNeverTorn) {
  auto dir = std::filesystem::temp_directory_path() / "flashrec_rt_file_test";
  std::filesystem::create_directories(dir);
  auto path = dir / "ranktable.json";
  RankTable v6(6, MakeRankTable(64, 8).entries());
  RankTable v7 = ReplaceNode(v6, NodeName(3), "spare-0");
  WriteRankTableFile(v6, path);

  std::atomic<bool> stop{false};
  std::atomic<int> bad{0};
  std::vector<std::thread> readers;
  for (int i = 0; i < 4; ++i) {
    readers.emplace_back([&] {
      while (!stop) {
        RankTable rt = ReadRankTableFile(path);
        if (!(rt == v6) && !(rt == v7)) ++bad;
      }
    });
  }
  for (int i = 0; i < 200; ++i) WriteRankTableFile(i % 2 ? v6 : v7, path);
  stop = true;
  for (auto& t : readers) t.join();
  EXPECT_EQ(bad.load(), 0);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace flashrec
