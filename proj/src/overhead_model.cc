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

#include "flashrec/overhead_model.h"

#include <cmath>
#include <string>

#include "flashrec/error.h"

namespace flashrec {

void Validate(const OverheadParams& p) {
  if (!(p.d > 0)) throw Error(ErrorCode::kInvalidArgument, "d must be > 0");
  if (p.interval_steps < 1) {
    throw Error(ErrorCode::kInvalidArgument, "checkpoint interval must be >= 1");
  }
  if (p.m < 0) throw Error(ErrorCode::kInvalidArgument, "m must be >= 0");
  if (p.s0 < 0) throw Error(ErrorCode::kInvalidArgument, "s0 must be >= 0");
  if (p.k0 < 0) throw Error(ErrorCode::kInvalidArgument, "k0 must be >= 0");
  if (!(p.step_time > 0)) {
    throw Error(ErrorCode::kInvalidArgument, "step_time must be > 0");
  }
}

double FTotalAtInterval(const OverheadParams& p, double interval_seconds) {
  if (!(interval_seconds > 0)) {
    throw Error(ErrorCode::kInvalidArgument, "interval must be > 0");
  }
  const double m = static_cast<double>(p.m);
  return m * (p.s0 + interval_seconds / 2) + (p.d / interval_seconds) * p.k0;
}

double FTotal(const OverheadParams& p) {
  Validate(p);
  return FTotalAtInterval(p, static_cast<double>(p.interval_steps) * p.step_time);
}

namespace {

void RequireInteriorOptimum(const OverheadParams& p) {
  if (p.m <= 0 || !(p.k0 > 0)) {
    throw Error(ErrorCode::kNoInteriorOptimum,
                "cost is monotone in the interval when m == 0 or k0 == 0");
  }
  if (!(p.d > 0)) throw Error(ErrorCode::kInvalidArgument, "d must be > 0");
}

}  // namespace

double OptimalInterval(const OverheadParams& p) {
  RequireInteriorOptimum(p);
  return std::sqrt(2 * p.d * p.k0 / static_cast<double>(p.m));
}

double FMin(const OverheadParams& p) {
  RequireInteriorOptimum(p);
  const double m = static_cast<double>(p.m);
  return m * p.s0 + std::sqrt(2 * p.d * p.k0 * m);
}

int64_t BruteForceOptimal(const OverheadParams& p, int64_t t_max) {
  if (t_max < 1) throw Error(ErrorCode::kInvalidArgument, "t_max must be >= 1");
  OverheadParams q = p;
  q.interval_steps = 1;
  Validate(q);
  int64_t best = 1;
  double best_cost = FTotalAtInterval(q, q.step_time);
  for (int64_t t = 2; t <= t_max; ++t) {
    const double cost = FTotalAtInterval(q, static_cast<double>(t) * q.step_time);
    if (cost < best_cost) {
      best_cost = cost;
      best = t;
    }
  }
  return best;
}

double FFlash(int64_t m, double s0_flash, double s1_flash) {
  if (m < 0 || s0_flash < 0 || s1_flash < 0) {
    throw Error(ErrorCode::kInvalidArgument,
                "m, s0' and s1' must be non-negative");
  }
  return static_cast<double>(m) * (s0_flash + s1_flash);
}

int64_t BreakEvenFailures(double d, double k0, double s0, double s0_flash,
                          double s1_flash) {
  // m*(s0'+s1') < m*s0 + sqrt(2*d*k0*m)  <=>  sqrt(m)*excess < sqrt(2*d*k0)
  const double excess = s0_flash + s1_flash - s0;
  if (excess <= 0) return std::numeric_limits<int64_t>::max();
  const double bound = 2 * d * k0 / (excess * excess);
  if (bound >= 9.0e18) return std::numeric_limits<int64_t>::max();
  int64_t m = static_cast<int64_t>(std::ceil(bound)) - 1;
  // Correct for rounding at the boundary.
  auto wins = [&](int64_t mm) {
    const double x = static_cast<double>(mm);
    return x * (s0_flash + s1_flash) < x * s0 + std::sqrt(2 * d * k0 * x);
  };
  while (m > 0 && !wins(m)) --m;
  while (wins(m + 1)) ++m;
  return m < 0 ? 0 : m;
}

double ClusterSuccessProb(double p_fault, int64_t n) {
  if (p_fault < 0 || p_fault > 1 || n < 0) {
    throw Error(ErrorCode::kInvalidArgument, "need 0 <= p_fault <= 1, n >= 0");
  }
  return std::pow(1.0 - p_fault, static_cast<double>(n));
}

double DpGroupLossProb(double p_fault, int dp_degree) {
  if (p_fault < 0 || p_fault > 1 || dp_degree < 1) {
    throw Error(ErrorCode::kInvalidArgument,
                "need 0 <= p_fault <= 1, dp_degree >= 1");
  }
  return std::pow(p_fault, dp_degree);
}

}  // namespace flashrec
