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

#include "flashrec/clock.h"

#include <sstream>

#include "flashrec/error.h"

namespace flashrec {

std::string_view ClockModeName(ClockMode mode) {
  return mode == ClockMode::kReal ? "real" : "simulated";
}

Clock::Clock(ClockMode mode)
    : mode_(mode), origin_(std::chrono::steady_clock::now()) {}

Tick Clock::Now() const {
  if (mode_ == ClockMode::kSimulated) return now_;
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now() - origin_)
      .count();
}

void Clock::AdvanceTo(Tick t) {
  if (mode_ != ClockMode::kSimulated) {
    throw Error(ErrorCode::kFailedPrecondition, "real clock cannot be advanced");
  }
  if (t < now_) {
    throw Error(ErrorCode::kInvalidArgument, "clock cannot move backwards");
  }
  now_ = t;
}

void EventLog::Record(Tick tick, std::string_view type, std::string_view src,
                      std::string_view dst, std::string_view detail) {
  if (!enabled_) return;
  std::string line;
  line.reserve(32 + type.size() + src.size() + dst.size() + detail.size());
  line += std::to_string(tick);
  line += ',';
  line += type;
  line += ',';
  line += src;
  line += ',';
  line += dst;
  line += ',';
  line += detail;
  records_.push_back(std::move(line));
}

void EventLog::Write(std::ostream& out) const {
  for (const std::string& r : records_) out << r << '\n';
}

std::string EventLog::ToString() const {
  std::ostringstream os;
  Write(os);
  return os.str();
}

void EventLoop::Schedule(Tick at, Callback fn) {
  if (at < now()) at = now();
  queue_.push(Event{at, next_seq_++, std::move(fn)});
}

bool EventLoop::Step() {
  if (queue_.empty()) return false;
  // priority_queue::top is const; the callback is moved out via a copy of the
  // handle before popping.
  Event ev = std::move(const_cast<Event&>(queue_.top()));
  queue_.pop();
  clock_.AdvanceTo(ev.at);
  ++processed_;
  ev.fn();
  return true;
}

void EventLoop::RunUntil(Tick limit) {
  halted_ = false;
  while (!halted_ && !queue_.empty() && queue_.top().at <= limit) Step();
  if (!halted_ && now() < limit) clock_.AdvanceTo(limit);
}

void EventLoop::Run(uint64_t max_events) {
  halted_ = false;
  uint64_t n = 0;
  while (!halted_ && n < max_events && Step()) ++n;
}

}  // namespace flashrec
