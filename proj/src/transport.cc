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

#include "flashrec/transport.h"

#include <algorithm>
#include <thread>

#include "flashrec/random.h"
#include "flashrec/threaded.h"

namespace flashrec {

Tick LatencyModel::Draw(uint64_t seq) const {
  if (jitter <= 0) return constant;
  return constant +
         static_cast<Tick>(HashCombine({seed, seq}) % static_cast<uint64_t>(jitter + 1));
}

SimCluster::SimCluster(EventLoop& loop, LatencyModel latency, EventLog* log)
    : loop_(loop), latency_(latency), log_(log) {}

void SimCluster::Register(const EndpointId& id, Handler handler) {
  Endpoint& ep = endpoints_[id];
  if (ep.alive) {
    throw Error(ErrorCode::kInvalidArgument,
                "endpoint " + id.ToString() + " already registered");
  }
  ++ep.generation;
  ep.alive = true;
  ep.handler = std::move(handler);
  ep.inbox.clear();
  if (log_) log_->Record(loop_.now(), "register", id.ToString(), "-", "-");
}

void SimCluster::Deregister(const EndpointId& id) {
  auto it = endpoints_.find(id);
  if (it == endpoints_.end() || !it->second.alive) return;
  it->second.alive = false;
  it->second.handler = nullptr;
  it->second.inbox.clear();
  if (log_) log_->Record(loop_.now(), "deregister", id.ToString(), "-", "-");
}

bool SimCluster::IsAlive(const EndpointId& id) const {
  auto it = endpoints_.find(id);
  return it != endpoints_.end() && it->second.alive;
}

SendStatus SimCluster::Send(const EndpointId& from, const EndpointId& to,
                            Message msg) {
  auto it = endpoints_.find(to);
  if (it == endpoints_.end() || !it->second.alive) {
    if (log_) log_->Record(loop_.now(), "send-fail", from.ToString(), to.ToString(), msg.type);
    return SendStatus::kDeliveryFailure;
  }
  msg.src = from;
  msg.dst = to;
  msg.seq = next_seq_++;
  ++sent_;
  ++sent_by_type_[msg.type];
  Tick arrival = loop_.now() + latency_.Draw(msg.seq);
  Tick& last = last_arrival_[{from, to}];
  arrival = std::max(arrival, last);
  last = arrival;
  if (log_) log_->Record(loop_.now(), "send", from.ToString(), to.ToString(), msg.type);
  const uint64_t generation = it->second.generation;
  loop_.Schedule(arrival, [this, to, generation, m = std::move(msg)]() mutable {
    Deliver(to, generation, std::move(m));
  });
  return SendStatus::kQueued;
}

void SimCluster::Deliver(const EndpointId& to, uint64_t generation, Message msg) {
  Endpoint& ep = endpoints_[to];
  if (!ep.alive || ep.generation != generation) {
    ++dropped_;
    if (log_) log_->Record(loop_.now(), "drop", msg.src.ToString(), to.ToString(), msg.type);
    return;
  }
  ++delivered_;
  if (log_) log_->Record(loop_.now(), "deliver", msg.src.ToString(), to.ToString(), msg.type);
  if (ep.handler) {
    // Copy: the handler may re-register or kill this endpoint.
    Handler h = ep.handler;
    h(msg);
  } else {
    ep.inbox.push_back(std::move(msg));
  }
}

const std::deque<Message>& SimCluster::Inbox(const EndpointId& id) const {
  auto it = endpoints_.find(id);
  if (it == endpoints_.end()) {
    throw Error(ErrorCode::kNotFound, "endpoint " + id.ToString());
  }
  return it->second.inbox;
}

std::deque<Message> SimCluster::Drain(const EndpointId& id) {
  auto it = endpoints_.find(id);
  if (it == endpoints_.end()) return {};
  std::deque<Message> out;
  out.swap(it->second.inbox);
  return out;
}

uint64_t SimCluster::SentOfType(const std::string& type) const {
  auto it = sent_by_type_.find(type);
  return it == sent_by_type_.end() ? 0 : it->second;
}

// ---------------------------------------------------------------------------

void SimKvStore::Put(const std::string& key, std::string value) {
  data_[key] = std::move(value);
  auto it = waiters_.find(key);
  if (it == waiters_.end()) return;
  std::vector<Waiter> ready = std::move(it->second);
  waiters_.erase(it);
  for (Waiter& w : ready) {
    loop_.Schedule(loop_.now(), [fn = std::move(w.done), v = data_[key]]() { fn(v); });
  }
}

std::string SimKvStore::Get(const std::string& key) const {
  auto it = data_.find(key);
  if (it == data_.end()) throw Error(ErrorCode::kNotFound, "key " + key);
  return it->second;
}

void SimKvStore::Wait(const std::string& key, Tick timeout, WaitFn done) {
  if (auto it = data_.find(key); it != data_.end()) {
    loop_.Schedule(loop_.now(), [fn = std::move(done), v = it->second]() { fn(v); });
    return;
  }
  const uint64_t id = next_waiter_++;
  waiters_[key].push_back(Waiter{id, std::move(done)});
  loop_.ScheduleAfter(timeout, [this, key, id]() {
    auto it = waiters_.find(key);
    if (it == waiters_.end()) return;
    auto& list = it->second;
    auto w = std::find_if(list.begin(), list.end(),
                          [id](const Waiter& x) { return x.id == id; });
    if (w == list.end()) return;
    WaitFn fn = std::move(w->done);
    list.erase(w);
    if (list.empty()) waiters_.erase(it);
    fn(std::nullopt);
  });
}

int StoreRounds(int n, int p) {
  if (n < 1 || p < 1) {
    throw Error(ErrorCode::kInvalidArgument, "store establishment needs n, p >= 1");
  }
  return p == 1 ? n : (n + p - 1) / p;
}

StoreEstablishmentReport EstablishStore(int n, int p, Clock& clock,
                                        Tick per_connection_cost) {
  StoreEstablishmentReport report;
  report.n = n;
  report.p = p;
  report.per_connection_cost = per_connection_cost;
  StoreRounds(n, p);  // validates
  const Tick start = clock.Now();
  KvStore store;
  int next = 0;
  while (next < n) {
    const int batch = std::min(p, n - next);
    if (clock.mode() == ClockMode::kSimulated) {
      for (int c = next; c < next + batch; ++c) store.Connect(c);
      clock.AdvanceTo(clock.Now() + per_connection_cost);
    } else {
      std::vector<std::thread> workers;
      workers.reserve(batch);
      for (int c = next; c < next + batch; ++c) {
        workers.emplace_back([&store, c, per_connection_cost]() {
          std::this_thread::sleep_for(std::chrono::milliseconds(per_connection_cost));
          store.Connect(c);
        });
      }
      for (auto& t : workers) t.join();
    }
    report.batch_sizes.push_back(batch);
    next += batch;
  }
  report.rounds = static_cast<int>(report.batch_sizes.size());
  report.elapsed = clock.Now() - start;
  if (store.connected() != n) {
    throw Error(ErrorCode::kFailedPrecondition, "store establishment incomplete");
  }
  return report;
}

// ---------------------------------------------------------------------------

int CommGroup::MaxNeighbors() const {
  std::map<int, int> degree;
  for (const auto& [a, b] : links) {
    ++degree[a];
    ++degree[b];
  }
  int best = 0;
  for (const auto& [rank, d] : degree) best = std::max(best, d);
  return best;
}

bool CommGroup::Contains(int rank) const {
  return std::binary_search(members.begin(), members.end(), rank);
}

CommGroup PlanGroup(std::vector<int> members, const RankTable& rt,
                    LinkPattern pattern) {
  std::sort(members.begin(), members.end());
  if (std::adjacent_find(members.begin(), members.end()) != members.end()) {
    throw Error(ErrorCode::kGroupFormation, "duplicate member");
  }
  for (int r : members) {
    if (r < 0 || r >= rt.world_size()) {
      throw Error(ErrorCode::kGroupFormation,
                  "rank " + std::to_string(r) + " not in ranktable");
    }
    if (rt.entry(r).status == RankStatus::kFaulty) {
      throw Error(ErrorCode::kGroupFormation,
                  "rank " + std::to_string(r) + " is faulty");
    }
  }
  CommGroup g;
  g.members = std::move(members);
  g.ranktable_version = rt.version();
  const size_t k = g.members.size();
  if (k >= 2) {
    if (pattern == LinkPattern::kRing) {
      for (size_t i = 0; i < k; ++i) {
        int a = g.members[i];
        int b = g.members[(i + 1) % k];
        g.links.insert({std::min(a, b), std::max(a, b)});
      }
    } else {
      for (size_t i = 0; i < k; ++i)
        for (size_t j = i + 1; j < k; ++j) g.links.insert({g.members[i], g.members[j]});
    }
  }
  return g;
}

CommGroup FormGroup(std::vector<int> members, const RankTable& rt, Clock& clock,
                    Tick link_cost, LinkPattern pattern) {
  CommGroup g = PlanGroup(std::move(members), rt, pattern);
  if (clock.mode() == ClockMode::kSimulated) {
    clock.AdvanceTo(clock.Now() + static_cast<Tick>(g.MaxNeighbors()) * link_cost);
  } else {
    // Each member handshakes with its neighbours on its own thread.
    KvStore store;
    std::map<int, std::vector<int>> neighbours;
    for (const auto& [a, b] : g.links) {
      neighbours[a].push_back(b);
      neighbours[b].push_back(a);
    }
    std::vector<std::thread> threads;
    for (const auto& [rank, peers] : neighbours) {
      threads.emplace_back([&store, rank, peers, link_cost]() {
        for (int peer : peers) {
          std::this_thread::sleep_for(std::chrono::milliseconds(link_cost));
          store.Put("link/" + std::to_string(rank) + "->" + std::to_string(peer), "up");
        }
        for (int peer : peers) {
          store.Wait("link/" + std::to_string(peer) + "->" + std::to_string(rank),
                     std::chrono::seconds(30));
        }
      });
    }
    for (auto& t : threads) t.join();
  }
  g.established_at = clock.Now();
  return g;
}

// ---------------------------------------------------------------------------

std::vector<double> RankOrderedSum(const std::vector<std::vector<double>>& inputs) {
  if (inputs.empty()) return {};
  std::vector<double> acc = inputs.front();
  for (size_t i = 1; i < inputs.size(); ++i) {
    if (inputs[i].size() != acc.size()) {
      throw Error(ErrorCode::kInvalidArgument, "all-reduce length mismatch");
    }
    for (size_t j = 0; j < acc.size(); ++j) acc[j] += inputs[i][j];
  }
  return acc;
}

SimCollective::SimCollective(EventLoop& loop, CommGroup group, Tick latency,
                             EventLog* log, std::string name)
    : loop_(loop),
      group_(std::move(group)),
      latency_(latency),
      log_(log),
      name_(std::move(name)) {}

void SimCollective::Arrive(int rank, int key, std::vector<double> contribution,
                           Done done) {
  if (!group_.Contains(rank)) {
    throw Error(ErrorCode::kInvalidArgument,
                "rank " + std::to_string(rank) + " not in " + name_);
  }
  if (arrivals_.contains(rank)) {
    throw Error(ErrorCode::kProtocolViolation,
                "rank " + std::to_string(rank) + " arrived twice at " + name_);
  }
  for (const auto& [r, a] : arrivals_) {
    if (a.key == key && a.contribution.size() != contribution.size()) {
      throw Error(ErrorCode::kInvalidArgument, "all-reduce length mismatch");
    }
  }
  if (log_) {
    log_->Record(loop_.now(), "arrive", std::to_string(rank), name_,
                 "round=" + std::to_string(rounds_completed_));
  }
  arrivals_.emplace(rank, Arrival{key, std::move(contribution), std::move(done)});
  if (arrivals_.size() == group_.members.size()) Complete();
}

void SimCollective::Barrier(int rank, std::function<void()> done) {
  Arrive(rank, 0, {}, [done = std::move(done)](const std::vector<double>&) {
    if (done) done();
  });
}

void SimCollective::Complete() {
  std::map<int, std::vector<std::vector<double>>> by_key;
  for (const auto& [rank, a] : arrivals_) by_key[a.key].push_back(a.contribution);
  std::map<int, std::vector<double>> sums;
  for (const auto& [key, inputs] : by_key) sums[key] = RankOrderedSum(inputs);

  std::vector<std::pair<Done, std::vector<double>>> fire;
  for (auto& [rank, a] : arrivals_) fire.emplace_back(std::move(a.done), sums[a.key]);
  arrivals_.clear();
  ++rounds_completed_;
  if (log_) {
    log_->Record(loop_.now(), "complete", "-", name_,
                 "round=" + std::to_string(rounds_completed_ - 1));
  }
  loop_.ScheduleAfter(latency_, [fire = std::move(fire)]() {
    for (const auto& [fn, result] : fire) {
      if (fn) fn(result);
    }
  });
}

void SimCollective::Reset() {
  if (log_) {
    log_->Record(loop_.now(), "reset", "-", name_,
                 "dropped=" + std::to_string(arrivals_.size()));
  }
  arrivals_.clear();
}

std::vector<int> SimCollective::Waiting() const {
  std::vector<int> out;
  for (const auto& [rank, a] : arrivals_) out.push_back(rank);
  return out;
}

void CopyState(SimCluster& cluster, const EndpointId& donor,
               const EndpointId& target, std::string payload, Tick cost,
               std::function<void(std::string)> done,
               std::function<void(const Error&)> failed) {
  if (!cluster.IsAlive(donor) || !cluster.IsAlive(target)) {
    failed(Error(ErrorCode::kRestoration,
                 "copy " + donor.ToString() + " -> " + target.ToString() +
                     ": endpoint not alive"));
    return;
  }
  if (cluster.log()) {
    cluster.log()->Record(cluster.loop().now(), "copy-start", donor.ToString(),
                          target.ToString(), std::to_string(payload.size()));
  }
  cluster.loop().ScheduleAfter(
      cost, [&cluster, donor, target, p = std::move(payload),
             done = std::move(done), failed = std::move(failed)]() mutable {
        if (!cluster.IsAlive(donor) || !cluster.IsAlive(target)) {
          failed(Error(ErrorCode::kRestoration,
                       "copy " + donor.ToString() + " -> " + target.ToString() +
                           ": endpoint died mid-copy"));
          return;
        }
        if (cluster.log()) {
          cluster.log()->Record(cluster.loop().now(), "copy-done", donor.ToString(),
                                target.ToString(), std::to_string(p.size()));
        }
        done(std::move(p));
      });
}

}  // namespace flashrec
