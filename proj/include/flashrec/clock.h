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

#ifndef FLASHREC_CLOCK_H_
#define FLASHREC_CLOCK_H_

#include <chrono>
#include <cstdint>
#include <functional>
#include <ostream>
#include <queue>
#include <string>
#include <string_view>
#include <vector>

namespace flashrec {

// Simulated ticks, or milliseconds in real mode.
using Tick = int64_t;

enum class ClockMode { kReal, kSimulated };

std::string_view ClockModeName(ClockMode mode);

class Clock {
 public:
  static Clock Simulated() { return Clock(ClockMode::kSimulated); }
  static Clock Real() { return Clock(ClockMode::kReal); }

  ClockMode mode() const { return mode_; }
  // Non-decreasing in both modes.
  Tick Now() const;
  // Simulated mode only; time may never move backwards.
  void AdvanceTo(Tick t);

 private:
  explicit Clock(ClockMode mode);

  ClockMode mode_;
  Tick now_ = 0;
  std::chrono::steady_clock::time_point origin_;
};

// Replay log, one record per line: tick,<event_type>,<src>,<dst>,<detail>
class EventLog {
 public:
  explicit EventLog(bool enabled = true) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }
  void Record(Tick tick, std::string_view type, std::string_view src,
              std::string_view dst, std::string_view detail);
  const std::vector<std::string>& records() const { return records_; }
  void Write(std::ostream& out) const;
  std::string ToString() const;

 private:
  bool enabled_;
  std::vector<std::string> records_;
};

// Single-threaded discrete-event scheduler. Events at the same tick run in
// scheduling order, which makes every run a pure function of its inputs.
class EventLoop {
 public:
  using Callback = std::function<void()>;

  EventLoop() : clock_(Clock::Simulated()) {}

  Tick now() const { return clock_.Now(); }
  const Clock& clock() const { return clock_; }

  // `at` earlier than now() is clamped to now().
  void Schedule(Tick at, Callback fn);
  void ScheduleAfter(Tick delay, Callback fn) { Schedule(now() + delay, std::move(fn)); }

  // Runs one event; false when the queue is empty.
  bool Step();
  // Runs every event with tick <= limit, then parks the clock at limit.
  void RunUntil(Tick limit);
  // Runs until the queue drains or `max_events` fire.
  void Run(uint64_t max_events = UINT64_MAX);
  // Stops Run/RunUntil after the current event.
  void Halt() { halted_ = true; }

  size_t pending() const { return queue_.size(); }
  uint64_t processed() const { return processed_; }

 private:
  struct Event {
    Tick at;
    uint64_t seq;
    Callback fn;
  };
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      return a.at != b.at ? a.at > b.at : a.seq > b.seq;
    }
  };

  Clock clock_;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  uint64_t next_seq_ = 0;
  uint64_t processed_ = 0;
  bool halted_ = false;
};

}  // namespace flashrec

#endif  // FLASHREC_CLOCK_H_
