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

// Real-clock transport: one OS thread per endpoint, blocking primitives.

#ifndef FLASHREC_THREADED_H_
#define FLASHREC_THREADED_H_

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "flashrec/transport.h"

namespace flashrec {

// Thread-safe mailbox registry.
class ThreadedHub {
 public:
  void Register(const EndpointId& id);
  // Wakes any receiver blocked on `id`; later sends fail.
  void Deregister(const EndpointId& id);
  bool IsAlive(const EndpointId& id) const;

  SendStatus Send(const EndpointId& from, const EndpointId& to, Message msg);
  // Blocks up to `timeout`; nullopt on timeout or when `id` is deregistered.
  std::optional<Message> Receive(const EndpointId& id,
                                 std::chrono::milliseconds timeout);
  // Discards queued messages.
  size_t Drain(const EndpointId& id);
  uint64_t sent() const;

 private:
  struct Mailbox {
    bool alive = false;
    std::deque<Message> queue;
  };
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<EndpointId, Mailbox> boxes_;
  uint64_t next_seq_ = 0;
};

// Thread-safe rendezvous store.
class KvStore {
 public:
  void Put(const std::string& key, std::string value);
  // Throws kNotFound.
  std::string Get(const std::string& key) const;
  // Throws kTimeout.
  std::string Wait(const std::string& key, std::chrono::milliseconds timeout) const;
  // Registers a client connection; returns the number connected so far.
  int Connect(int client_id);
  int connected() const;

 private:
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<std::string, std::string> data_;
  std::vector<int> clients_;
};

// Blocking counterpart of SimCollective. Arrive() returns nullopt when the
// round is abandoned by Reset().
class ThreadedCollective {
 public:
  explicit ThreadedCollective(CommGroup group) : group_(std::move(group)) {}

  std::optional<std::vector<double>> Arrive(int rank, int key,
                                            std::vector<double> contribution);
  std::optional<std::vector<double>> AllReduceSum(int rank,
                                                  std::vector<double> v) {
    return Arrive(rank, 0, std::move(v));
  }
  bool Barrier(int rank) { return Arrive(rank, 0, {}).has_value(); }

  void Reset();
  // Replaces the membership; implies Reset().
  void Regroup(CommGroup group);
  // Number of members currently blocked in Arrive().
  int Waiting() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  CommGroup group_;
  uint64_t generation_ = 0;
  std::map<int, std::pair<int, std::vector<double>>> arrivals_;
  std::map<int, std::vector<double>> results_;
  uint64_t result_generation_ = UINT64_MAX;
};

}  // namespace flashrec

#endif  // FLASHREC_THREADED_H_
