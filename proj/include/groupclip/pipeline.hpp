// Copyright 2026 The groupclip Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <string>
#include <vector>

#include "groupclip/optim.hpp"

namespace groupclip {

// Deterministic simulation of pipeline-parallel private training with
// per-device clipping: GPipe-style microbatch schedule on a virtual clock,
// per-device noise from local data only, and countable communication. No
// real parallelism; the schedule's total order is the reproducibility
// contract.

// Virtual-clock costs, in abstract stage units. Constants are configuration,
// not claims.
struct CostModel {
  double forward = 1.0;
  double backward = 2.0;  // includes activation rematerialization
  double sync = 0.5;
  double offload = 0.5;        // CPU round-trip per microbatch per device
  double rematerialize = 2.0;  // extra backward-equivalent at sync
};

struct PipelineConfig {
  int devices = 1;                      // K
  std::vector<int> linears_per_device;  // consecutive Linear layers per device
  int microbatches = 1;                 // J
  std::vector<double> thresholds;       // per-device C_k
  double sigma = 0.0;                   // noise multiplier
  double lr = 0.1;
  std::size_t nominal_batch = 1;  // B in the update normalization
  CostModel costs;

  Grouping grouping() const;
  void validate(const Model& model, std::size_t batch) const;
};

enum class StageKind { kForward, kBackward, kSync, kApply };

struct ScheduleEvent {
  double start = 0.0;
  double end = 0.0;
  int device = 0;      // 1-based; 0 for barrier events
  int microbatch = 0;  // 1-based; 0 for the final barrier
  StageKind kind = StageKind::kForward;
};

struct CommLog {
  long activation_msgs = 0;
  long gradient_msgs = 0;
  long norm_msgs = 0;
  long syncs = 0;
  double makespan = 0.0;
  std::vector<ScheduleEvent> trace;
};

enum class FlatWorkaround { kRetain, kOffload, kRematerialize };

enum class PipelineMode { kPerDevice, kFlat };

// Event list respecting microbatch dependencies and one-stage-at-a-time
// devices; totally ordered by (start time, device, microbatch) for
// reproducibility. Flat mode inserts a sync barrier per microbatch plus the
// workaround's apply stages and costs.
std::vector<ScheduleEvent> build_schedule(const PipelineConfig& config, PipelineMode mode,
                                          FlatWorkaround workaround = FlatWorkaround::kRetain);

// Hosted model chunk plus its accumulator and per-microbatch activation
// store (the CPU-copy role).
struct DeviceState {
  int id = 1;  // 1-based
  Model chunk;
  std::vector<Tensor> acc_w, acc_b;   // u_k, one pair per local Linear layer
  std::vector<Tensor> stored_inputs;  // per microbatch
  bool noise_added = false;

  std::size_t dim() const;
};

// One device's forward for microbatch j: stores an input copy, computes the
// chunk's activations.
Tensor local_forward(DeviceState& device, int microbatch, const Tensor& incoming);

// One device's backward for microbatch j: rematerializes activations from
// the stored input, clips the local chunk gradient per example at the
// device's threshold via ghost norms + fused sums, accumulates into u_k, and
// returns input gradients (empty tensor for device 1).
Tensor local_backward(DeviceState& device, int microbatch, const Tensor& incoming_grad,
                      double threshold);

struct PipelineResult {
  CommLog log;
  // Per-device clipped-and-noised sums, before the lr * u / B update
  // (diagnostic for equivalence tests).
  std::vector<std::vector<Tensor>> device_sums_w, device_sums_b;
};

// Algorithm: run the schedule, add per-device noise once per minibatch
// (equal-budget plan: std sigma * sqrt(K) * C_k, computable from local data
// only), synchronize once, update theta_k <- theta_k - lr * u_k / B.
PipelineResult pipeline_step(Model& model, const PipelineConfig& config, const Batch& minibatch,
                             std::uint64_t seed, long step);

// Exact flat clipping inside the simulator: per-example norms gathered
// across devices at one sync per microbatch, with the chosen workaround's
// virtual-clock penalty. Noise std per device is sigma * C_flat.
PipelineResult flat_in_pipeline_step(Model& model, const PipelineConfig& config,
                                     const Batch& minibatch, std::uint64_t seed, long step,
                                     double flat_threshold, FlatWorkaround workaround);

// Schedule trace CSV (columns: event_index,virtual_time,device,microbatch,
// stage,message_type).
void write_commlog_csv(const CommLog& log, const std::string& path);

}  // namespace groupclip
