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

#ifndef FLASHREC_SRC_RUN_INTERNAL_H_
#define FLASHREC_SRC_RUN_INTERNAL_H_

#include "flashrec/harness.h"

namespace flashrec {

ScenarioResult RunSimulated(const Scenario& sc, const RunObserver& observer);
// Threads and wall-clock milliseconds; see real_run.cc.
ScenarioResult RunReal(const Scenario& sc);

}  // namespace flashrec

#endif  // FLASHREC_SRC_RUN_INTERNAL_H_
