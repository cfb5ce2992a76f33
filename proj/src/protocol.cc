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

#include "flashrec/protocol.h"

#include "flashrec/error.h"

namespace flashrec {
namespace {

// Hardware 59.6% and software 40.4%, each split by its own sub-shares. The
// three smaller hardware classes share the remaining 12% equally, and the
// four named smaller software classes share the remaining 57%.
constexpr double kHardware = 0.596;
constexpr double kSoftware = 0.404;

struct ClassShare {
  FailureClass cls;
  double share;
};

constexpr std::array<ClassShare, 6> kHardwareShares = {{
    {FailureClass::kNetworkAnomaly, 0.57},
    {FailureClass::kDeviceMemory, 0.20},
    {FailureClass::kUnclassified, 0.11},
    {FailureClass::kAICore, 0.04},
    {FailureClass::kTimeout, 0.04},
    {FailureClass::kDriver, 0.04},
}};

constexpr std::array<ClassShare, 6> kSoftwareShares = {{
    {FailureClass::kSegFault, 0.34},
    {FailureClass::kUnclassified, 0.09},
    {FailureClass::kResourceError, 0.1425},
    {FailureClass::kInitFailed, 0.1425},
    {FailureClass::kConfigAnomaly, 0.1425},
    {FailureClass::kOOM, 0.1425},
}};

template <size_t N>
FailureClass Pick(const std::array<ClassShare, N>& shares, double u) {
  double acc = 0;
  for (const auto& s : shares) {
    acc += s.share;
    if (u < acc) return s.cls;
  }
  return shares.back().cls;
}

void Expect(const Message& m, std::string_view type, size_t ints) {
  if (m.type != type || m.ints.size() != ints) {
    throw Error(ErrorCode::kParse, "expected " + std::string(type) + " message with " +
                                       std::to_string(ints) + " fields, got " + m.type);
  }
}

template <typename E>
E CheckedEnum(int64_t v, int64_t count, std::string_view what) {
  if (v < 0 || v >= count) {
    throw Error(ErrorCode::kParse, std::string(what) + ": out of range");
  }
  return static_cast<E>(v);
}

}  // namespace

std::string_view HeartbeatPhaseName(HeartbeatPhase p) {
  switch (p) {
    case HeartbeatPhase::kForwardBackward:
      return "ForwardBackward";
    case HeartbeatPhase::kOptimizerStep:
      return "OptimizerStep";
    case HeartbeatPhase::kRestoring:
      return "Restoring";
    case HeartbeatPhase::kIdle:
      return "Idle";
  }
  return "?";
}

std::string_view FailureClassName(FailureClass c) {
  switch (c) {
    case FailureClass::kNetworkAnomaly:
      return "NetworkAnomaly";
    case FailureClass::kDeviceMemory:
      return "DeviceMemory";
    case FailureClass::kAICore:
      return "AICore";
    case FailureClass::kTimeout:
      return "Timeout";
    case FailureClass::kDriver:
      return "Driver";
    case FailureClass::kSegFault:
      return "SegFault";
    case FailureClass::kResourceError:
      return "ResourceError";
    case FailureClass::kInitFailed:
      return "InitFailed";
    case FailureClass::kConfigAnomaly:
      return "ConfigAnomaly";
    case FailureClass::kOOM:
      return "OOM";
    case FailureClass::kUnclassified:
      return "Unclassified";
  }
  return "?";
}

std::optional<FailureClass> ParseFailureClass(std::string_view name) {
  for (int i = 0; i < kFailureClassCount; ++i) {
    auto c = static_cast<FailureClass>(i);
    if (FailureClassName(c) == name) return c;
  }
  return std::nullopt;
}

std::array<double, kFailureClassCount> FailureClassFrequencies() {
  std::array<double, kFailureClassCount> f{};
  for (const auto& s : kHardwareShares) f[static_cast<int>(s.cls)] += kHardware * s.share;
  for (const auto& s : kSoftwareShares) f[static_cast<int>(s.cls)] += kSoftware * s.share;
  return f;
}

bool IsHardwareClass(FailureClass c) {
  switch (c) {
    case FailureClass::kNetworkAnomaly:
    case FailureClass::kDeviceMemory:
    case FailureClass::kAICore:
    case FailureClass::kTimeout:
    case FailureClass::kDriver:
      return true;
    default:
      return false;
  }
}

SampledFailure SampleFailureClass(Rng& rng) {
  if (rng.Uniform() < kHardware) return {Pick(kHardwareShares, rng.Uniform()), true};
  return {Pick(kSoftwareShares, rng.Uniform()), false};
}

std::string_view FailureKindName(FailureKind k) {
  switch (k) {
    case FailureKind::kHeartbeatMiss:
      return "HeartbeatMiss";
    case FailureKind::kPluginReport:
      return "PluginReport";
    case FailureKind::kProcessExit:
      return "ProcessExit";
    case FailureKind::kProtocolViolation:
      return "ProtocolViolation";
  }
  return "?";
}

bool PluginReport::AllOk() const {
  for (const auto& d : devices) {
    if (!d.ok) return false;
  }
  return true;
}

std::vector<int> PluginReport::FaultyDevices() const {
  std::vector<int> out;
  for (const auto& d : devices) {
    if (!d.ok) out.push_back(d.device_id);
  }
  return out;
}

std::string_view ControlActionName(ControlAction a) {
  switch (a) {
    case ControlAction::kStop:
      return "Stop";
    case ControlAction::kClean:
      return "Clean";
    case ControlAction::kReset:
      return "Reset";
    case ControlAction::kContinue:
      return "Continue";
  }
  return "?";
}

Message EncodeHeartbeat(const HeartbeatRecord& hb) {
  Message m;
  m.type = "heartbeat";
  m.ints = {hb.rank, hb.step_tag, static_cast<int64_t>(hb.phase), hb.sent_at,
            static_cast<int64_t>(hb.health)};
  m.text = hb.node_id;
  return m;
}

HeartbeatRecord DecodeHeartbeat(const Message& m) {
  Expect(m, "heartbeat", 5);
  HeartbeatRecord hb;
  hb.rank = static_cast<int>(m.ints[0]);
  hb.step_tag = m.ints[1];
  hb.phase = CheckedEnum<HeartbeatPhase>(m.ints[2], 4, "heartbeat.phase");
  hb.sent_at = m.ints[3];
  hb.health = CheckedEnum<Health>(m.ints[4], 2, "heartbeat.health");
  hb.node_id = m.text;
  return hb;
}

// ints: reported_at, then (device_id, ok, class) triples.
Message EncodePluginReport(const PluginReport& r) {
  Message m;
  m.type = "plugin";
  m.text = r.node_id;
  m.ints.push_back(r.reported_at);
  for (const auto& d : r.devices) {
    m.ints.push_back(d.device_id);
    m.ints.push_back(d.ok ? 1 : 0);
    m.ints.push_back(static_cast<int64_t>(d.failure_class));
  }
  return m;
}

PluginReport DecodePluginReport(const Message& m) {
  if (m.type != "plugin" || m.ints.empty() || (m.ints.size() - 1) % 3 != 0) {
    throw Error(ErrorCode::kParse, "malformed plugin report");
  }
  PluginReport r;
  r.node_id = m.text;
  r.reported_at = m.ints[0];
  for (size_t i = 1; i < m.ints.size(); i += 3) {
    r.devices.push_back({static_cast<int>(m.ints[i]), m.ints[i + 1] != 0,
                         CheckedEnum<FailureClass>(m.ints[i + 2], kFailureClassCount,
                                                   "plugin.class")});
  }
  return r;
}

Message EncodeControl(ControlAction a, int64_t arg) {
  Message m;
  m.type = "control";
  m.ints = {static_cast<int64_t>(a), arg};
  m.text = std::string(ControlActionName(a));
  return m;
}

std::pair<ControlAction, int64_t> DecodeControl(const Message& m) {
  Expect(m, "control", 2);
  return {CheckedEnum<ControlAction>(m.ints[0], 4, "control.action"), m.ints[1]};
}

}  // namespace flashrec
