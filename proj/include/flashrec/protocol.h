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

// Records exchanged between workers, monitors, device plugins and the
// controller, and their wire encoding over transport Messages.

#ifndef FLASHREC_PROTOCOL_H_
#define FLASHREC_PROTOCOL_H_

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flashrec/clock.h"
#include "flashrec/random.h"
#include "flashrec/transport.h"

namespace flashrec {

// Step tag carried while the optimizer is running.
inline constexpr int64_t kOptimizerTag = -1;

enum class HeartbeatPhase { kForwardBackward, kOptimizerStep, kRestoring, kIdle };
enum class Health { kOk, kDegraded };

std::string_view HeartbeatPhaseName(HeartbeatPhase p);

struct HeartbeatRecord {
  int rank = 0;
  std::string node_id;
  int64_t step_tag = 0;
  HeartbeatPhase phase = HeartbeatPhase::kIdle;
  Tick sent_at = 0;
  Health health = Health::kOk;

  bool operator==(const HeartbeatRecord&) const = default;
};

// Observed failure categories. kUnclassified covers both the hardware and
// software remainders.
enum class FailureClass {
  kNetworkAnomaly,
  kDeviceMemory,
  kAICore,
  kTimeout,
  kDriver,
  kSegFault,
  kResourceError,
  kInitFailed,
  kConfigAnomaly,
  kOOM,
  kUnclassified,
};

inline constexpr int kFailureClassCount = 11;

std::string_view FailureClassName(FailureClass c);
std::optional<FailureClass> ParseFailureClass(std::string_view name);
// Device-side classes. kUnclassified counts as software.
bool IsHardwareClass(FailureClass c);

// A sampled failure: its class plus whether it came from the hardware or
// the software side of the taxonomy.
struct SampledFailure {
  FailureClass failure_class;
  bool hardware;
};

// Expected frequency of each class under the observed distribution; sums
// to 1.
std::array<double, kFailureClassCount> FailureClassFrequencies();
SampledFailure SampleFailureClass(Rng& rng);

enum class FailureKind { kHeartbeatMiss, kPluginReport, kProcessExit, kProtocolViolation };
std::string_view FailureKindName(FailureKind k);

struct DeviceStatus {
  int device_id = 0;
  bool ok = true;
  FailureClass failure_class = FailureClass::kUnclassified;
};

struct PluginReport {
  std::string node_id;
  Tick reported_at = 0;
  std::vector<DeviceStatus> devices;

  bool AllOk() const;
  std::vector<int> FaultyDevices() const;
};

enum class ControlAction { kStop, kClean, kReset, kContinue };
std::string_view ControlActionName(ControlAction a);

// Message codecs. Decoders throw kParse on a type or arity mismatch.
Message EncodeHeartbeat(const HeartbeatRecord& hb);
HeartbeatRecord DecodeHeartbeat(const Message& m);
Message EncodePluginReport(const PluginReport& r);
PluginReport DecodePluginReport(const Message& m);
Message EncodeControl(ControlAction a, int64_t arg = 0);
std::pair<ControlAction, int64_t> DecodeControl(const Message& m);

}  // namespace flashrec

#endif  // FLASHREC_PROTOCOL_H_
