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

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flashrec/error.h"
#include "json.hpp"

namespace flashrec {

std::string ShardId::ToString() const {
  std::ostringstream os;
  os << "(pp=" << pp_stage << ",tp=" << tp_slice << ",zero=" << zero_slice
     << ")";
  return os.str();
}

ParallelTopology BuildTopology(int dp, int tp, int pp, int zero) {
  if (dp < 1 || tp < 1 || pp < 1 || zero < 1) {
    std::ostringstream os;
    os << "parallel degrees must be >= 1, got dp=" << dp << " tp=" << tp
       << " pp=" << pp << " zero=" << zero;
    throw Error(ErrorCode::kInvalidArgument, os.str());
  }
  ParallelTopology t;
  t.dp_ = dp;
  t.tp_ = tp;
  t.pp_ = pp;
  t.zero_ = zero;
  return t;
}

int ParallelTopology::RankOf(const RankCoords& c) const {
  if (c.dp < 0 || c.dp >= dp_ || c.pp < 0 || c.pp >= pp_ || c.tp < 0 ||
      c.tp >= tp_ || c.zero < 0 || c.zero >= zero_) {
    throw Error(ErrorCode::kInvalidArgument, "coordinates out of range");
  }
  return ((c.dp * pp_ + c.pp) * tp_ + c.tp) * zero_ + c.zero;
}

RankCoords ParallelTopology::CoordsOf(int rank) const {
  if (rank < 0 || rank >= world_size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "rank " + std::to_string(rank) + " outside [0, " +
                    std::to_string(world_size()) + ")");
  }
  RankCoords c;
  c.zero = rank % zero_;
  rank /= zero_;
  c.tp = rank % tp_;
  rank /= tp_;
  c.pp = rank % pp_;
  c.dp = rank / pp_;
  return c;
}

std::vector<int> ParallelTopology::HoldersOf(const ShardId& shard) const {
  std::vector<int> out;
  out.reserve(dp_);
  for (int d = 0; d < dp_; ++d) {
    out.push_back(RankOf({d, shard.pp_stage, shard.tp_slice, shard.zero_slice}));
  }
  return out;
}

std::vector<int> ParallelTopology::ReplicaGroupOf(int rank) const {
  const int per_replica = shard_count();
  const int base = CoordsOf(rank).dp * per_replica;
  std::vector<int> out(per_replica);
  for (int i = 0; i < per_replica; ++i) out[i] = base + i;
  return out;
}

std::set<ShardId> ShardMap(const ParallelTopology& topo, int rank) {
  RankCoords c = topo.CoordsOf(rank);
  return {ShardId{c.pp, c.tp, c.zero}};
}

RecoverabilityVerdict CheckRecoverability(const ParallelTopology& topo,
                                          const std::set<int>& faulty) {
  RecoverabilityVerdict v;
  std::set<ShardId> lost;
  for (int rank : faulty) {
    for (const ShardId& shard : ShardMap(topo, rank)) {
      int donor = -1;
      for (int holder : topo.HoldersOf(shard)) {
        if (!faulty.contains(holder)) {
          donor = holder;
          break;
        }
      }
      if (donor < 0) {
        lost.insert(shard);
      } else {
        v.donor_map[rank] = donor;
      }
    }
  }
  if (!lost.empty()) {
    v.recoverable = false;
    v.donor_map.clear();
    v.lost_shards.assign(lost.begin(), lost.end());
  }
  return v;
}

// ---------------------------------------------------------------------------

std::string_view RankStatusName(RankStatus s) {
  switch (s) {
    case RankStatus::kHealthy: return "healthy";
    case RankStatus::kFaulty: return "faulty";
    case RankStatus::kReplaced: return "replaced";
  }
  return "healthy";
}

namespace {

void ValidateEntries(const std::vector<RankEntry>& entries, ErrorCode code) {
  if (entries.empty()) {
    throw Error(code, "world_size: ranktable must contain at least one rank");
  }
  std::vector<int> seen(entries.size(), 0);
  for (const RankEntry& e : entries) {
    if (e.rank < 0 || e.rank >= static_cast<int>(entries.size())) {
      throw Error(code, "entries.rank: non-contiguous rank " +
                            std::to_string(e.rank));
    }
    if (seen[e.rank]++) {
      throw Error(code,
                  "entries.rank: duplicate rank " + std::to_string(e.rank));
    }
  }
}

}  // namespace

RankTable::RankTable(int64_t version, std::vector<RankEntry> entries)
    : version_(version), entries_(std::move(entries)) {
  ValidateEntries(entries_, ErrorCode::kInvalidArgument);
  std::sort(entries_.begin(), entries_.end(),
            [](const RankEntry& a, const RankEntry& b) { return a.rank < b.rank; });
}

const RankEntry& RankTable::entry(int rank) const {
  if (rank < 0 || rank >= world_size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "rank " + std::to_string(rank) + " not in ranktable");
  }
  return entries_[rank];
}

std::vector<std::string> RankTable::Nodes() const {
  std::vector<std::string> out;
  for (const RankEntry& e : entries_) {
    if (std::find(out.begin(), out.end(), e.node_id) == out.end()) {
      out.push_back(e.node_id);
    }
  }
  return out;
}

std::vector<int> RankTable::RanksOnNode(std::string_view node_id) const {
  std::vector<int> out;
  for (const RankEntry& e : entries_) {
    if (e.node_id == node_id) out.push_back(e.rank);
  }
  return out;
}

bool RankTable::HasNode(std::string_view node_id) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const RankEntry& e) { return e.node_id == node_id; });
}

RankTable RankTable::WithFaulty(const std::set<int>& ranks) const {
  RankTable out = *this;
  for (int r : ranks) {
    out.entries_.at(static_cast<size_t>(entry(r).rank)).status =
        RankStatus::kFaulty;
  }
  ++out.version_;
  return out;
}

std::string NodeName(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "node-%04d", index);
  return buf;
}

RankTable MakeRankTable(int world_size, int devices_per_node, int64_t version) {
  if (world_size < 1 || devices_per_node < 1) {
    throw Error(ErrorCode::kInvalidArgument,
                "world_size and devices_per_node must be >= 1");
  }
  std::vector<RankEntry> entries;
  entries.reserve(world_size);
  for (int r = 0; r < world_size; ++r) {
    entries.push_back({r, NodeName(r / devices_per_node), r % devices_per_node,
                       RankStatus::kHealthy});
  }
  return RankTable(version, std::move(entries));
}

std::string SerializeRankTable(const RankTable& rt) {
  nlohmann::ordered_json j;
  j["version"] = rt.version();
  j["world_size"] = rt.world_size();
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const RankEntry& e : rt.entries()) {
    nlohmann::ordered_json o;
    o["rank"] = e.rank;
    o["node_id"] = e.node_id;
    o["device_id"] = e.device_id;
    o["status"] = std::string(RankStatusName(e.status));
    entries.push_back(std::move(o));
  }
  j["entries"] = std::move(entries);
  return j.dump();
}

namespace {

const nlohmann::json& Field(const nlohmann::json& obj, const char* name,
                            const std::string& path) {
  auto it = obj.find(name);
  if (it == obj.end()) {
    throw Error(ErrorCode::kParse, path + name + ": missing");
  }
  return *it;
}

int64_t IntField(const nlohmann::json& obj, const char* name,
                 const std::string& path) {
  const nlohmann::json& v = Field(obj, name, path);
  if (!v.is_number_integer()) {
    throw Error(ErrorCode::kParse, path + name + ": expected integer");
  }
  return v.get<int64_t>();
}

}  // namespace

RankTable ParseRankTable(std::string_view bytes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse, std::string("document: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::kParse, "document: not an object");

  const int64_t version = IntField(j, "version", "");
  const int64_t world_size = IntField(j, "world_size", "");
  if (world_size < 1) {
    throw Error(ErrorCode::kParse, "world_size: must be >= 1");
  }
  const nlohmann::json& arr = Field(j, "entries", "");
  if (!arr.is_array()) throw Error(ErrorCode::kParse, "entries: expected array");
  if (static_cast<int64_t>(arr.size()) != world_size) {
    throw Error(ErrorCode::kParse,
                "entries: length " + std::to_string(arr.size()) +
                    " != world_size " + std::to_string(world_size));
  }

  std::vector<RankEntry> entries;
  entries.reserve(arr.size());
  for (size_t i = 0; i < arr.size(); ++i) {
    const std::string path = "entries[" + std::to_string(i) + "].";
    const nlohmann::json& o = arr[i];
    if (!o.is_object()) throw Error(ErrorCode::kParse, path + ": not an object");
    RankEntry e;
    e.rank = static_cast<int>(IntField(o, "rank", path));
    const nlohmann::json& node = Field(o, "node_id", path);
    if (!node.is_string()) {
      throw Error(ErrorCode::kParse, path + "node_id: expected string");
    }
    e.node_id = node.get<std::string>();
    e.device_id = static_cast<int>(IntField(o, "device_id", path));
    const nlohmann::json& st = Field(o, "status", path);
    const std::string s = st.is_string() ? st.get<std::string>() : "";
    if (s == "healthy") {
      e.status = RankStatus::kHealthy;
    } else if (s == "faulty") {
      e.status = RankStatus::kFaulty;
    } else if (s == "replaced") {
      e.status = RankStatus::kReplaced;
    } else {
      throw Error(ErrorCode::kParse, path + "status: unknown value");
    }
    entries.push_back(std::move(e));
  }
  ValidateEntries(entries, ErrorCode::kParse);
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].rank != static_cast<int>(i)) {
      throw Error(ErrorCode::kParse, "entries.rank: not sorted ascending");
    }
  }
  return RankTable(version, std::move(entries));
}

RankTable ReplaceNodes(const RankTable& rt,
                       const std::map<std::string, std::string>& mapping) {
  RankTable out = rt;
  for (const auto& [old_node, new_node] : mapping) {
    if (!rt.HasNode(old_node)) {
      throw Error(ErrorCode::kNotFound, "node " + old_node + " not in ranktable");
    }
    for (RankEntry& e : out.entries_) {
      if (e.node_id == old_node) {
        e.node_id = new_node;
        e.status = RankStatus::kReplaced;
      }
    }
  }
  ++out.version_;
  return out;
}

RankTable ReplaceNode(const RankTable& rt, const std::string& old_node,
                      const std::string& new_node) {
  return ReplaceNodes(rt, {{old_node, new_node}});
}

void WriteRankTableFile(const RankTable& rt, const std::filesystem::path& path) {
  static std::atomic<uint64_t> counter{0};
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." +
         std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error(ErrorCode::kFailedPrecondition,
                  "cannot open " + tmp.string() + " for writing");
    }
    out << SerializeRankTable(rt);
    out.flush();
    if (!out) throw Error(ErrorCode::kFailedPrecondition, "write failed");
  }
  std::filesystem::rename(tmp, path);
}

RankTable ReadRankTableFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ParseRankTable(ss.str());
}

}  // namespace flashrec
