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

// Parallelism layout (DP x PP x TP x ZeRO), shard/replica placement and the
// cluster-wide ranktable.

#ifndef FLASHREC_TOPOLOGY_H_
#define FLASHREC_TOPOLOGY_H_

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace flashrec {

// Coordinates of one rank inside the layout.
struct RankCoords {
  int dp = 0;
  int pp = 0;
  int tp = 0;
  int zero = 0;
};

// Identifies one piece of model state. Ranks holding the same ShardId are
// replicas of each other.
struct ShardId {
  int pp_stage = 0;
  int tp_slice = 0;
  int zero_slice = 0;

  auto operator<=>(const ShardId&) const = default;
  std::string ToString() const;
};

class ParallelTopology {
 public:
  ParallelTopology() = default;

  int dp_degree() const { return dp_; }
  int tp_degree() const { return tp_; }
  int pp_degree() const { return pp_; }
  int zero_degree() const { return zero_; }
  int world_size() const { return dp_ * tp_ * pp_ * zero_; }
  // Number of distinct ShardIds (pp * tp * zero).
  int shard_count() const { return tp_ * pp_ * zero_; }

  // Ranks enumerate nested loops: dp outermost, then pp, then tp, zero
  // innermost.
  int RankOf(const RankCoords& c) const;
  RankCoords CoordsOf(int rank) const;

  // Ranks holding `shard`, ascending. These form the shard's DP group.
  std::vector<int> HoldersOf(const ShardId& shard) const;
  // Ranks sharing `rank`'s dp index (one full model copy), ascending.
  std::vector<int> ReplicaGroupOf(int rank) const;

  bool operator==(const ParallelTopology&) const = default;

 private:
  friend ParallelTopology BuildTopology(int dp, int tp, int pp, int zero);
  int dp_ = 1;
  int tp_ = 1;
  int pp_ = 1;
  int zero_ = 1;
};

// Throws kInvalidArgument if any degree is < 1.
ParallelTopology BuildTopology(int dp, int tp, int pp, int zero);

// Shards held by `rank`. In this layout every rank holds exactly one.
std::set<ShardId> ShardMap(const ParallelTopology& topo, int rank);

struct RecoverabilityVerdict {
  bool recoverable = true;
  // faulty rank -> lowest healthy rank holding the same shard.
  std::map<int, int> donor_map;
  // Shards with no healthy holder, ascending.
  std::vector<ShardId> lost_shards;
};

RecoverabilityVerdict CheckRecoverability(const ParallelTopology& topo,
                                          const std::set<int>& faulty);

// ---------------------------------------------------------------------------
// Ranktable

enum class RankStatus { kHealthy, kFaulty, kReplaced };

std::string_view RankStatusName(RankStatus s);

struct RankEntry {
  int rank = 0;
  std::string node_id;
  int device_id = 0;
  RankStatus status = RankStatus::kHealthy;

  bool operator==(const RankEntry&) const = default;
};

class RankTable {
 public:
  RankTable() = default;
  // Validates contiguity/uniqueness of ranks; throws kInvalidArgument.
  RankTable(int64_t version, std::vector<RankEntry> entries);

  int64_t version() const { return version_; }
  int world_size() const { return static_cast<int>(entries_.size()); }
  const std::vector<RankEntry>& entries() const { return entries_; }
  const RankEntry& entry(int rank) const;

  // Distinct node ids in order of first appearance.
  std::vector<std::string> Nodes() const;
  std::vector<int> RanksOnNode(std::string_view node_id) const;
  bool HasNode(std::string_view node_id) const;

  // Returns a copy with `ranks` marked Faulty and the version bumped once.
  RankTable WithFaulty(const std::set<int>& ranks) const;

  bool operator==(const RankTable&) const = default;

 private:
  friend RankTable ReplaceNodes(const RankTable&,
                                const std::map<std::string, std::string>&);
  int64_t version_ = 0;
  std::vector<RankEntry> entries_;
};

// rank r lives on node r / devices_per_node, device r % devices_per_node.
// Node ids are "node-0000", "node-0001", ...
RankTable MakeRankTable(int world_size, int devices_per_node,
                        int64_t version = 1);
std::string NodeName(int index);

// Byte-deterministic single-line JSON.
std::string SerializeRankTable(const RankTable& rt);
// Throws kParse naming the offending field.
RankTable ParseRankTable(std::string_view bytes);

// Re-points every entry of old_node at new_node with status Replaced.
// Version bumps by exactly one. Throws kNotFound for an unknown node.
RankTable ReplaceNode(const RankTable& rt, const std::string& old_node,
                      const std::string& new_node);
// Batch form: all replacements in one version bump.
RankTable ReplaceNodes(const RankTable& rt,
                       const std::map<std::string, std::string>& mapping);

// Shared-file persistence. Writes go to a temp file in the same directory
// followed by rename(2), so a concurrent reader sees the old or new table.
void WriteRankTableFile(const RankTable& rt, const std::filesystem::path& path);
RankTable ReadRankTableFile(const std::filesystem::path& path);

}  // namespace flashrec

#endif  // FLASHREC_TOPOLOGY_H_
