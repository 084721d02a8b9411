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

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "groupclip/clip.hpp"
#include "groupclip/privacy.hpp"
#include "groupclip/quantile.hpp"

namespace groupclip {

// Training loop: subsampling, group-wise clipping fused into backprop, noise
// injection, SGD/Adam updates, and per-group quantile-driven thresholds.

struct Dataset {
  Tensor x;  // (N, in) or (N, T, in)
  std::vector<int> labels;
  Tensor targets;
  LossKind loss = LossKind::kCrossEntropy;

  std::size_t size() const { return x.shape.empty() ? 0 : x.dim(0); }
  Batch select(std::span<const std::size_t> idx) const;
  Batch all() const;
};

enum class Rule { kSgd, kAdam };
enum class Schedule { kConstant, kLinearDecay };
enum class BatchKind { kPoisson, kFixed };

struct OptimizerConfig {
  Rule rule = Rule::kSgd;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lr = 0.1;
  Schedule schedule = Schedule::kConstant;
  BatchKind batch_kind = BatchKind::kFixed;
  double sampling_rate = 0.0;  // Poisson
  std::size_t batch_size = 0;  // Fixed
  long steps = 0;              // T

  double lr_at(long t) const;
  // Normalization constant B on the update (Poisson uses the nominal
  // rho * N, never the realized batch size).
  std::size_t nominal_batch(std::size_t dataset_size) const;
};

// Poisson: each index included independently with probability rho (possibly
// empty). Fixed: uniform without replacement.
std::vector<std::size_t> sample_minibatch(std::size_t dataset_size, const OptimizerConfig& cfg,
                                          Rng rng);

struct TrainState {
  Model model;
  Grouping grouping;
  ClipPolicy policy;
  std::vector<QuantileEstimator> estimators;  // adaptive policy only
  std::vector<Tensor> mom_w, mom_b;           // SGD momentum / Adam first moment
  std::vector<Tensor> vel_w, vel_b;           // Adam second moment
  long step = 0;
  std::uint64_t seed = 0;
  long grad_noise_events = 0;  // one per step (the full z draw)
  long count_noise_draws = 0;  // one per released group count

  std::vector<double> effective_thresholds() const;
  std::vector<ParamGroup> param_groups() const;
};

TrainState make_train_state(Model model, Grouping grouping, ClipPolicy policy,
                            std::uint64_t seed, std::size_t nominal_batch);

struct TrainOptions {
  OptimizerConfig opt;
  Allocation allocation = Allocation::kGlobal;
  PrivacySpec privacy;       // sigma_new / sigma_b already resolved
  bool noise_enabled = true; // false: non-private reference runs
  bool record_norms = true;
};

// Everything a metrics sink needs about one step.
struct StepRecord {
  long step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // minibatch accuracy (CrossEntropy tasks)
  std::size_t realized_batch = 0;
  std::vector<double> thresholds;
  std::vector<double> clipped_fraction;  // fraction of examples with norm > C_k
  std::vector<double> noise_std;
  std::vector<std::vector<double>> group_norms;  // per group, per example
  std::size_t peak_grad_bytes = 0;
};

class StepSink {
 public:
  virtual ~StepSink() = default;
  virtual void on_step(const StepRecord& rec) = 0;
};

// One update: forward, fused group-wise clipping during backprop (flat policy
// runs the two-phase path instead), noise draw, parameter update, then
// quantile updates in group order 1..K.
StepRecord dp_step(TrainState& state, const Dataset& data, std::span<const std::size_t> batch_idx,
                   const TrainOptions& options);

// Runs T steps, emitting one record per step; returns final iterate in state.
void train(TrainState& state, const Dataset& data, const TrainOptions& options, StepSink* sink);

// Head-to-head flat-clipping reference: identical loop with a single flat
// threshold (state.policy must be the flat kind).
void flat_train_reference(TrainState& state, const Dataset& data, const TrainOptions& options,
                          StepSink* sink);

double evaluate_accuracy(const Model& model, const Dataset& data);
double evaluate_loss(const Model& model, const Dataset& data);

// Versioned little-endian checkpoint; restoring reproduces bit-identical
// subsequent steps.
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

}  // namespace groupclip
