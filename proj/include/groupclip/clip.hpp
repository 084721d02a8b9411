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

#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "groupclip/memtrack.hpp"
#include "groupclip/nn.hpp"

namespace groupclip {

inline constexpr double kNoClipping = std::numeric_limits<double>::infinity();

// One clipping group: a consecutive run of Linear layers clipped jointly.
// The default grouping is one group per Linear layer; the pipeline simulator
// uses one group per device chunk.
struct Grouping {
  // Inclusive [first, last] spans over Linear-layer ordinals (0-based),
  // consecutive and exhaustive.
  std::vector<std::pair<int, int>> spans;

  static Grouping per_layer(int num_linear);
  // sizes[k] = number of Linear layers in group k+1.
  static Grouping consecutive(std::span<const int> sizes);

  int num_groups() const { return static_cast<int>(spans.size()); }
  void validate(int num_linear) const;
};

// Summary of group k used by noise planning: parameter count, clipping
// threshold, allocation weight.
struct ParamGroup {
  int index = 0;  // 1-based
  std::size_t dim = 0;
  double threshold = 1.0;
  double weight = 1.0;
};

std::vector<std::size_t> group_dims(const Model& model, const Grouping& grouping);

enum class PolicyKind { kFlat, kFixedPerGroup, kAdaptivePerGroup };

struct ClipPolicy {
  PolicyKind kind = PolicyKind::kFlat;
  double flat_threshold = kNoClipping;
  std::vector<double> thresholds;  // per group; current values when adaptive
  // Adaptive parameters (Alg-style geometric quantile tracking).
  double target_quantile = 0.5;
  double quantile_lr = 0.3;
  double count_noise = 0.0;  // sigma_b
  // When > 0: after each quantile update the threshold vector is rescaled so
  // its Euclidean norm equals this value (equivalent-global convention used
  // for head-to-head comparisons against a flat threshold of the same value).
  double rescale_global = 0.0;

  static ClipPolicy flat(double c);
  static ClipPolicy fixed_per_group(std::vector<double> c);
  static ClipPolicy adaptive(std::vector<double> initial, double q, double eta,
                             double sigma_b);

  // Thresholds used for clipping, arity-checked against the grouping.
  std::vector<double> group_thresholds(int num_groups) const;
};

// Clipped-gradient accumulator for one group.
struct GroupGradState {
  std::vector<Tensor> gw;  // per Linear layer in the group, layer order
  std::vector<Tensor> gb;
  std::vector<double> norms;  // per-example group gradient norms
  long clipped_below = 0;     // #examples with norm <= threshold
  TrackedBytes tracked;

  // norm_slots reserves tracked bytes for the per-example norm array.
  static GroupGradState make(const Model& model, const Grouping& grouping, int group,
                             std::size_t norm_slots = 0);
  std::size_t dim() const;
};

// min(1, c / norm); 1 when norm == 0 (a zero gradient is unchanged by any
// scale, and 1 avoids the singular division).
double clip_scale(double norm, double c);

// Per-example squared gradient norms (W and b combined) of one Linear layer
// from its input activations and output gradients.
std::vector<double> ghost_norms(const Tensor& a, const Tensor& e);

// sum_i scales[i] * g^(i) for one Linear layer as a single contraction of a
// against row-scaled e; adds into (gw, gb).
void fused_clipped_sum(const Tensor& a, const Tensor& e, std::span<const double> scales,
                       Tensor& gw, Tensor& gb);

// Group-wise clipping fused into backpropagation: per group (visited from K
// down to 1), ghost norms -> per-example scales -> fused clipped sums.
// Multi-layer groups complete when backprop passes their last layer.
std::vector<GroupGradState> clipped_backward(const Model& model, LayerTape& tape,
                                             const Tensor& dlogits, const Grouping& grouping,
                                             std::span<const double> thresholds);

// Flat clipping over cached (a, e) pairs: phase 1 computes total per-example
// norms, phase 2 applies one global scale per example to every group's fused
// sum. Requires a complete tape (one full backward pass with e retained).
std::vector<GroupGradState> flat_two_phase(const Model& model, const LayerTape& tape,
                                           const Grouping& grouping, double threshold);

// A minibatch paired with its loss definition.
struct Batch {
  Tensor x;
  std::vector<int> labels;  // CrossEntropy
  Tensor targets;           // Mse
  LossKind loss = LossKind::kCrossEntropy;

  std::size_t size() const { return x.dim(0); }
  Batch example(std::size_t i) const;
};

LossResult batch_loss(const Tensor& logits, const Batch& batch);

// Reference semantics for every equivalence test: runs an independent
// single-example backward pass per example, materializes each per-example
// gradient, clips it per policy, and sums. O(B * d) memory by construction.
std::vector<GroupGradState> naive_oracle(const Model& model, const Batch& batch,
                                         const Grouping& grouping, const ClipPolicy& policy);

// Rescales per-group thresholds so the Euclidean norm of the vector equals
// c_global: out_k = c_global * c_k / sqrt(sum_j c_j^2).
std::vector<double> normalize_thresholds(std::span<const double> thresholds, double c_global);

}  // namespace groupclip
