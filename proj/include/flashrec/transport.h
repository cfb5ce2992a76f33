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

// Message passing, the rendezvous store, communication-group formation and
// the collectives used for gradient sync and replica restoration.
//
// Everything in this header runs on the single-threaded EventLoop. The
// real-clock, thread-per-endpoint counterparts live in threaded.h.

#ifndef FLASHREC_TRANSPORT_H_
#define FLASHREC_TRANSPORT_H_

#include <compare>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "flashrec/clock.h"
#include "flashrec/error.h"
#include "flashrec/topology.h"

namespace flashrec {

struct EndpointId {
  std::string node_id;
  int process_id = 0;

  auto operator<=>(const EndpointId&) const = default;
  std::string ToString() const { return node_id + "/" + std::to_string(process_id); }
};

struct Message {
  std::string type;
  EndpointId src;
  EndpointId dst;
  std::vector<int64_t> ints;
  std::string text;
  uint64_t seq = 0;  // assigned by the cluster on send
};

enum class SendStatus { kQueued, kDeliveryFailure };

// Per-hop latency: constant + uniform jitter in [0, jitter], keyed on the
// message sequence number so draws are reproducible.
struct LatencyModel {
  Tick constant = 1;
  Tick jitter = 0;
  uint64_t seed = 0;

  Tick Draw(uint64_t seq) const;
};

class SimCluster {
 public:
  // A handler consumes delivered messages; endpoints without one accumulate
  // them in their inbox.
  using Handler = std::function<void(const Message&)>;

  explicit SimCluster(EventLoop& loop, LatencyModel latency = {},
                      EventLog* log = nullptr);

  // Throws kInvalidArgument if `id` is already live.
  void Register(const EndpointId& id, Handler handler = nullptr);
  // Kills the endpoint: its inbox is discarded and in-flight messages to it
  // are dropped on arrival.
  void Deregister(const EndpointId& id);
  bool IsAlive(const EndpointId& id) const;

  // FIFO per (from, to). Returns kDeliveryFailure if `to` is not live.
  SendStatus Send(const EndpointId& from, const EndpointId& to, Message msg);

  const std::deque<Message>& Inbox(const EndpointId& id) const;
  std::deque<Message> Drain(const EndpointId& id);

  uint64_t sent() const { return sent_; }
  uint64_t delivered() const { return delivered_; }
  uint64_t dropped() const { return dropped_; }
  uint64_t SentOfType(const std::string& type) const;

  EventLoop& loop() { return loop_; }
  EventLog* log() { return log_; }
  const LatencyModel& latency() const { return latency_; }

 private:
  struct Endpoint {
    uint64_t generation = 0;
    bool alive = false;
    Handler handler;
    std::deque<Message> inbox;
  };

  void Deliver(const EndpointId& to, uint64_t generation, Message msg);

  EventLoop& loop_;
  LatencyModel latency_;
  EventLog* log_;
  std::map<EndpointId, Endpoint> endpoints_;
  std::map<std::pair<EndpointId, EndpointId>, Tick> last_arrival_;
  std::map<std::string, uint64_t> sent_by_type_;
  uint64_t next_seq_ = 0;
  uint64_t sent_ = 0;
  uint64_t delivered_ = 0;
  uint64_t dropped_ = 0;
};

// ---------------------------------------------------------------------------
// Rendezvous key-value store (simulated clock).

class SimKvStore {
 public:
  using WaitFn = std::function<void(std::optional<std::string>)>;

  explicit SimKvStore(EventLoop& loop) : loop_(loop) {}

  // Last writer wins. Wakes every waiter on `key`.
  void Put(const std::string& key, std::string value);
  // Throws kNotFound for an absent key.
  std::string Get(const std::string& key) const;
  bool Contains(const std::string& key) const { return data_.contains(key); }
  // Calls `done` with the value once `key` exists, or with nullopt at
  // now() + timeout.
  void Wait(const std::string& key, Tick timeout, WaitFn done);

 private:
  struct Waiter {
    uint64_t id;
    WaitFn done;
  };
  EventLoop& loop_;
  std::map<std::string, std::string> data_;
  std::map<std::string, std::vector<Waiter>> waiters_;
  uint64_t next_waiter_ = 0;
};

struct StoreEstablishmentReport {
  int n = 0;
  int p = 1;
  int rounds = 0;
  Tick per_connection_cost = 0;
  Tick elapsed = 0;
  std::vector<int> batch_sizes;  // clients connected per round
};

// n when p == 1 (serial), ceil(n / p) otherwise.
int StoreRounds(int n, int p);

// Connects n clients, at most p concurrently. A simulated clock advances by
// per_connection_cost per round; a real clock runs the connections on p
// threads against an in-process store.
StoreEstablishmentReport EstablishStore(int n, int p, Clock& clock,
                                        Tick per_connection_cost);

// ---------------------------------------------------------------------------
// Communication groups.

enum class LinkPattern { kRing, kFullMesh };

struct CommGroup {
  std::vector<int> members;  // ascending
  std::set<std::pair<int, int>> links;  // (lo, hi)
  Tick established_at = 0;
  int64_t ranktable_version = 0;

  // Largest number of links touching one member.
  int MaxNeighbors() const;
  bool Contains(int rank) const;
};

// Links are set up in parallel, so elapsed time is MaxNeighbors() *
// link_cost regardless of group size. Throws kGroupFormation naming the
// first member that is missing from, or Faulty in, `rt`.
CommGroup FormGroup(std::vector<int> members, const RankTable& rt, Clock& clock,
                    Tick link_cost, LinkPattern pattern = LinkPattern::kRing);

// Pure form of the above for callers that account time themselves.
CommGroup PlanGroup(std::vector<int> members, const RankTable& rt,
                    LinkPattern pattern = LinkPattern::kRing);

// ---------------------------------------------------------------------------
// Collectives.

// A merged barrier / keyed all-reduce over a CommGroup. Every member arrives
// once per round with a key and a vector; when the last member arrives, each
// member receives the rank-ordered sum of the contributions that share its
// key. A plain barrier is an arrival with an empty vector; a plain
// all-reduce is every member using key 0.
//
// If a member never arrives, the others stay blocked until Reset().
class SimCollective {
 public:
  using Done = std::function<void(const std::vector<double>&)>;

  SimCollective(EventLoop& loop, CommGroup group, Tick latency = 0,
                EventLog* log = nullptr, std::string name = "collective");

  // Throws kProtocolViolation on a second arrival in the same round and
  // kInvalidArgument on a non-member or a length mismatch within a key.
  void Arrive(int rank, int key, std::vector<double> contribution, Done done);
  void Barrier(int rank, std::function<void()> done);
  void AllReduceSum(int rank, std::vector<double> contribution, Done done) {
    Arrive(rank, 0, std::move(contribution), std::move(done));
  }

  // Abandons the current round; blocked members' callbacks never fire.
  void Reset();

  const CommGroup& group() const { return group_; }
  uint64_t rounds_completed() const { return rounds_completed_; }
  std::vector<int> Waiting() const;

 private:
  struct Arrival {
    int key;
    std::vector<double> contribution;
    Done done;
  };

  void Complete();

  EventLoop& loop_;
  CommGroup group_;
  Tick latency_;
  EventLog* log_;
  std::string name_;
  std::map<int, Arrival> arrivals_;
  uint64_t rounds_completed_ = 0;
};

// Fixed-order reduction used by the collectives: acc = v[0]; acc += v[i].
std::vector<double> RankOrderedSum(const std::vector<std::vector<double>>& inputs);

// Ships `payload` from donor to target. Completes at now() + cost; if either
// endpoint dies before then, `failed` receives a kRestoration error instead.
void CopyState(SimCluster& cluster, const EndpointId& donor,
               const EndpointId& target, std::string payload, Tick cost,
               std::function<void(std::string)> done,
               std::function<void(const Error&)> failed);

}  // namespace flashrec

#endif  // FLASHREC_TRANSPORT_H_
