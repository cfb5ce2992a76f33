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

#include "flashrec/error.h"

namespace flashrec {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kParse: return "parse-error";
    case ErrorCode::kProtocolViolation: return "protocol-violation";
    case ErrorCode::kTimeout: return "timeout";
    case ErrorCode::kDeliveryFailure: return "delivery-failure";
    case ErrorCode::kResourceExhausted: return "resource-exhausted";
    case ErrorCode::kNotRecoverable: return "not-recoverable";
    case ErrorCode::kStaleVersion: return "stale-version";
    case ErrorCode::kFailedPrecondition: return "failed-precondition";
    case ErrorCode::kGroupFormation: return "group-formation";
    case ErrorCode::kRestoration: return "restoration";
    case ErrorCode::kNoInteriorOptimum: return "no-interior-optimum";
  }
  return "unknown";
}

}  // namespace flashrec
