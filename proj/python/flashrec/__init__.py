# Copyright 2026 The FlashRec Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================
"""Python bindings for the flashrec recovery simulator."""

import json

from flashrec._flashrec import (
    FlashrecError,
    analyze,
    brute_force_optimal,
    cluster_success_prob,
    dp_group_loss_prob,
    f_flash,
    f_min,
    f_total,
    metrics_header,
    optimal_interval,
    run_scenario,
    store_rounds,
    sweep,
    validate_scenario,
)


def run(scenario, capture_event_log=True):
    """Runs a scenario given as a dict or a JSON string."""
    text = scenario if isinstance(scenario, str) else json.dumps(scenario)
    return run_scenario(text, capture_event_log)


__all__ = [
    "FlashrecError",
    "analyze",
    "brute_force_optimal",
    "cluster_success_prob",
    "dp_group_loss_prob",
    "f_flash",
    "f_min",
    "f_total",
    "metrics_header",
    "optimal_interval",
    "run",
    "run_scenario",
    "store_rounds",
    "sweep",
    "validate_scenario",
]
