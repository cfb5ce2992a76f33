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

#include "flashrec/threaded.h"

#include <algorithm>

namespace flashrec {

void ThreadedHub::Register(const EndpointId& id) {
  std::lock_guard<std::mutex> lock(mu_);
  Mailbox& box = boxes_[id];
  if (box.alive) {
    throw Error(ErrorCode::kInvalidArgument,
                "endpoint " + id.ToString() + " already registered");
  }
  box.alive = true;
  box.queue.clear();
}

void ThreadedHub::Deregister(const EndpointId& id) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = boxes_.find(id);
    if (it == boxes_.end()) return;
    it->second.alive = false;
    it->second.queue.clear();
  }
  cv_.notify_all();
}

bool ThreadedHub::IsAlive(const EndpointId& id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = boxes_.find(id);
  return it != boxes_.end() && it->second.alive;
}

SendStatus ThreadedHub::Send(const EndpointId& from, const EndpointId& to,
                             Message msg) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = boxes_.find(to);
    if (it == boxes_.end() || !it->second.alive) return SendStatus::kDeliveryFailure;
    msg.src = from;
    msg.dst = to;
    msg.seq = next_seq_++;
    it->second.queue.push_back(std::move(msg));
  }
  cv_.notify_all();
  return SendStatus::kQueued;
}

std::optional<Message> ThreadedHub::Receive(const EndpointId& id,
                                            std::chrono::milliseconds timeout) {
  std::unique_lock<std::mutex> lock(mu_);
  auto ready = [&]() {
    auto it = boxes_.find(id);
    return it == boxes_.end() || !it->second.alive || !it->second.queue.empty();
  };
  if (!cv_.wait_for(lock, timeout, ready)) return std::nullopt;
  auto it = boxes_.find(id);
  if (it == boxes_.end() || !it->second.alive) return std::nullopt;
  Message m = std::move(it->second.queue.front());
  it->second.queue.pop_front();
  return m;
}

size_t ThreadedHub::Drain(const EndpointId& id) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = boxes_.find(id);
  if (it == boxes_.end()) return 0;
  size_t n = it->second.queue.size();
  it->second.queue.clear();
  return n;
}

uint64_t ThreadedHub::sent() const {
  std::lock_guard<std::mutex> lock(mu_);
  return next_seq_;
}

void KvStore::Put(const std::string& key, std::string value) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    data_[key] = std::move(value);
  }
  cv_.notify_all();
}

std::string KvStore::Get(const std::string& key) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = data_.find(key);
  if (it == data_.end()) throw Error(ErrorCode::kNotFound, "key " + key);
  return it->second;
}

std::string KvStore::Wait(const std::string& key,
                          std::chrono::milliseconds timeout) const {
  std::unique_lock<std::mutex> lock(mu_);
  if (!cv_.wait_for(lock, timeout, [&]() { return data_.contains(key); })) {
    throw Error(ErrorCode::kTimeout, "wait on " + key);
  }
  return data_.at(key);
}

int KvStore::Connect(int client_id) {
  std::lock_guard<std::mutex> lock(mu_);
  clients_.push_back(client_id);
  return static_cast<int>(clients_.size());
}

int KvStore::connected() const {
  std::lock_guard<std::mutex> lock(mu_);
  return static_cast<int>(clients_.size());
}

std::optional<std::vector<double>> ThreadedCollective::Arrive(
    int rank, int key, std::vector<double> contribution) {
  std::unique_lock<std::mutex> lock(mu_);
  if (!group_.Contains(rank)) {
    throw Error(ErrorCode::kInvalidArgument,
                "rank " + std::to_string(rank) + " not in group");
  }
  if (arrivals_.contains(rank)) {
    throw Error(ErrorCode::kProtocolViolation,
                "rank " + std::to_string(rank) + " arrived twice");
  }
  const uint64_t gen = generation_;
  arrivals_.emplace(rank, std::make_pair(key, std::move(contribution)));
  if (arrivals_.size() == group_.members.size()) {
    std::map<int, std::vector<std::vector<double>>> by_key;
    for (const auto& [r, kv] : arrivals_) by_key[kv.first].push_back(kv.second);
    std::map<int, std::vector<double>> sums;
    for (const auto& [k, inputs] : by_key) sums[k] = RankOrderedSum(inputs);
    results_.clear();
    for (const auto& [r, kv] : arrivals_) results_[r] = sums[kv.first];
    arrivals_.clear();
    result_generation_ = gen;
    ++generation_;
    cv_.notify_all();
    return results_[rank];
  }
  cv_.wait(lock, [&]() { return generation_ != gen; });
  if (result_generation_ == gen) {
    auto it = results_.find(rank);
    if (it != results_.end()) return it->second;
  }
  return std::nullopt;
}

void ThreadedCollective::Reset() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    arrivals_.clear();
    ++generation_;
  }
  cv_.notify_all();
}

void ThreadedCollective::Regroup(CommGroup group) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    group_ = std::move(group);
    arrivals_.clear();
    ++generation_;
  }
  cv_.notify_all();
}

int ThreadedCollective::Waiting() const {
  std::lock_guard<std::mutex> lock(mu_);
  return static_cast<int>(arrivals_.size());
}

}  // namespace flashrec
