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

// Analytical recovery-cost model for periodic checkpointing versus
// checkpoint-free recovery, plus the device failure-probability calculus.

#ifndef FLASHREC_OVERHEAD_MODEL_H_
#define FLASHREC_OVERHEAD_MODEL_H_

#include <cstdint>
#include <limits>

namespace flashrec {

// All durations are seconds. `interval_steps` is the checkpoint interval in
// training steps; it becomes seconds through `step_time`.
struct OverheadParams {
  double d = 0;             // training period
  int64_t interval_steps = 1;
  int64_t m = 0;            // failures during d
  double s0 = 0;            // per-failure recovery overhead
  double k0 = 0;            // snapshot-to-host stall per checkpoint
  double k1 = 0;            // persist cost; overlaps training, never charged
  double step_time = 1;

  // Expected recomputation per failure: half an interval.
  double s1() const { return static_cast<double>(interval_steps) * step_time / 2; }
};

// Throws kInvalidArgument on any violated field constraint.
void Validate(const OverheadParams& p);

// m*(s0 + t/2) + (d/t)*k0 with t = interval_steps*step_time.
double FTotal(const OverheadParams& p);
// Same cost at a continuous interval given in seconds.
double FTotalAtInterval(const OverheadParams& p, double interval_seconds);

// sqrt(2*d*k0/m), in seconds. Throws kNoInteriorOptimum when m == 0 or
// k0 == 0 (the cost is then monotone in t).
double OptimalInterval(const OverheadParams& p);

// m*s0 + sqrt(2*d*k0*m).
double FMin(const OverheadParams& p);

// argmin over integer steps in [1, t_max] of FTotal; ties go to the smaller t.
int64_t BruteForceOptimal(const OverheadParams& p, int64_t t_max);

// Cost of checkpoint-free recovery: m*(s0' + s1').
double FFlash(int64_t m, double s0_flash, double s1_flash);

// Largest failure count for which FFlash < FMin. Returns
// numeric_limits<int64_t>::max() when flash wins for every m.
int64_t BreakEvenFailures(double d, double k0, double s0, double s0_flash,
                          double s1_flash);

// (1 - p_fault)^n.
double ClusterSuccessProb(double p_fault, int64_t n);
// p_fault^dp_degree.
double DpGroupLossProb(double p_fault, int dp_degree);

}  // namespace flashrec

#endif  // FLASHREC_OVERHEAD_MODEL_H_
