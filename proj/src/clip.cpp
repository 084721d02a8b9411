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

#include "groupclip/clip.hpp"

#include <cmath>
#include <string>

#include "groupclip/errors.hpp"
#include "groupclip/kernels.hpp"

namespace groupclip {
namespace {

std::size_t rows_of(const Tensor& t) { return t.rank() == 3 ? t.dim(0) * t.dim(1) : t.dim(0); }

void check_pair(const Tensor& a, const Tensor& e) {
  if (a.rank() != e.rank() || a.dim(0) != e.dim(0) ||
      (a.rank() == 3 && a.dim(1) != e.dim(1))) {
    throw DimensionError("activation/gradient batch dims disagree: " + a.shape_str() + " vs " +
                         e.shape_str());
  }
}

// Per-layer squared ghost norms into (wsq, bsq), batch-length arrays.
void layer_ghost(const Tensor& a, const Tensor& e, double* wsq, double* bsq) {
  check_pair(a, e);
  const std::size_t batch = a.dim(0);
  const std::size_t in = a.shape.back();
  const std::size_t out = e.shape.back();
  if (a.rank() == 3) {
    kernels::ghost_norms_seq(a.data.data(), e.data.data(), wsq, bsq, batch, a.dim(1), in, out);
  } else {
    kernels::ghost_norms_2d(a.data.data(), e.data.data(), wsq, bsq, batch, in, out);
  }
}

std::vector<double> expand_scales(const Tensor& a, std::span<const double> scales) {
  // Per-example scales to per-row scales for the flattened (B*T) layout.
  if (a.rank() != 3) return std::vector<double>(scales.begin(), scales.end());
  const std::size_t seq = a.dim(1);
  std::vector<double> rows(scales.size() * seq);
  for (std::size_t i = 0; i < scales.size(); ++i) {
    for (std::size_t t = 0; t < seq; ++t) rows[i * seq + t] = scales[i];
  }
  return rows;
}

}  // namespace

Grouping Grouping::per_layer(int num_linear) {
  Grouping g;
  for (int i = 0; i < num_linear; ++i) g.spans.emplace_back(i, i);
  return g;
}

Grouping Grouping::consecutive(std::span<const int> sizes) {
  Grouping g;
  int first = 0;
  for (int s : sizes) {
    if (s < 1) throw InputError("grouping: each group needs at least one Linear layer");
    g.spans.emplace_back(first, first + s - 1);
    first += s;
  }
  return g;
}

void Grouping::validate(int num_linear) const {
  int expect = 0;
  for (const auto& [first, last] : spans) {
    if (first != expect || last < first) {
      throw InputError("grouping spans must be consecutive and exhaustive");
    }
    expect = last + 1;
  }
  if (expect != num_linear) {
    throw InputError("grouping covers " + std::to_string(expect) + " Linear layers, model has " +
                     std::to_string(num_linear));
  }
}

std::vector<std::size_t> group_dims(const Model& model, const Grouping& grouping) {
  grouping.validate(model.num_linear());
  std::vector<std::size_t> dims;
  for (const auto& [first, last] : grouping.spans) {
    std::size_t d = 0;
    for (int l = first; l <= last; ++l) d += model.linear(l + 1).param_count();
    dims.push_back(d);
  }
  return dims;
}

ClipPolicy ClipPolicy::flat(double c) {
  if (!(c > 0.0)) throw InputError("flat threshold must be positive");
  ClipPolicy p;
  p.kind = PolicyKind::kFlat;
  p.flat_threshold = c;
  return p;
}

ClipPolicy ClipPolicy::fixed_per_group(std::vector<double> c) {
  for (double v : c) {
    if (!(v > 0.0)) throw InputError("per-group thresholds must be positive");
  }
  ClipPolicy p;
  p.kind = PolicyKind::kFixedPerGroup;
  p.thresholds = std::move(c);
  return p;
}

ClipPolicy ClipPolicy::adaptive(std::vector<double> initial, double q, double eta,
                                double sigma_b) {
  for (double v : initial) {
    if (!(v > 0.0)) throw InputError("initial thresholds must be positive");
  }
  if (!(q > 0.0 && q < 1.0)) throw InputError("target quantile must be in (0,1)");
  if (!(eta > 0.0)) throw InputError("quantile learning rate must be positive");
  if (sigma_b < 0.0) throw InputError("count noise multiplier must be nonnegative");
  ClipPolicy p;
  p.kind = PolicyKind::kAdaptivePerGroup;
  p.thresholds = std::move(initial);
  p.target_quantile = q;
  p.quantile_lr = eta;
  p.count_noise = sigma_b;
  return p;
}

std::vector<double> ClipPolicy::group_thresholds(int num_groups) const {
  if (kind == PolicyKind::kFlat) {
    return std::vector<double>(num_groups, flat_threshold);
  }
  if (static_cast<int>(thresholds.size()) != num_groups) {
    throw InputError("policy has " + std::to_string(thresholds.size()) + " thresholds for " +
                     std::to_string(num_groups) + " groups");
  }
  return thresholds;
}

GroupGradState GroupGradState::make(const Model& model, const Grouping& grouping, int group,
                                    std::size_t norm_slots) {
  GroupGradState s;
  const auto& [first, last] = grouping.spans[group];
  std::size_t bytes = norm_slots * sizeof(double);
  for (int l = first; l <= last; ++l) {
    const LinearLayer& lin = model.linear(l + 1);
    s.gw.push_back(Tensor(lin.w.shape));
    s.gb.push_back(Tensor(lin.b.shape));
    bytes += lin.param_count() * sizeof(double);
  }
  s.tracked = TrackedBytes(MemPool::kParamGrad, bytes);
  return s;
}

std::size_t GroupGradState::dim() const {
  std::size_t d = 0;
  for (const Tensor& t : gw) d += t.size();
  for (const Tensor& t : gb) d += t.size();
  return d;
}

double clip_scale(double norm, double c) {
  if (!(c > 0.0)) throw InputError("clipping threshold must be positive");
  if (norm <= 0.0) return 1.0;
  const double s = c / norm;
  return s < 1.0 ? s : 1.0;
}

std::vector<double> ghost_norms(const Tensor& a, const Tensor& e) {
  const std::size_t batch = a.dim(0);
  std::vector<double> wsq(batch), bsq(batch);
  layer_ghost(a, e, wsq.data(), bsq.data());
  std::vector<double> total(batch);
  for (std::size_t i = 0; i < batch; ++i) total[i] = wsq[i] + bsq[i];
  return total;
}

void fused_clipped_sum(const Tensor& a, const Tensor& e, std::span<const double> scales,
                       Tensor& gw, Tensor& gb) {
  check_pair(a, e);
  if (scales.size() != a.dim(0)) {
    throw DimensionError("fused_clipped_sum: " + std::to_string(scales.size()) +
                         " scales for batch " + std::to_string(a.dim(0)));
  }
  const std::size_t in = a.shape.back();
  const std::size_t out = e.shape.back();
  if (gw.shape != std::vector<std::size_t>{out, in} || gb.shape != std::vector<std::size_t>{out}) {
    throw DimensionError("fused_clipped_sum: accumulator shape mismatch");
  }
  const std::vector<double> row_scales = expand_scales(a, scales);
  kernels::scaled_weight_grad(a.data.data(), e.data.data(), row_scales.data(), gw.data.data(),
                              gb.data.data(), rows_of(a), in, out);
}

std::vector<GroupGradState> clipped_backward(const Model& model, LayerTape& tape,
                                             const Tensor& dlogits, const Grouping& grouping,
                                             std::span<const double> thresholds) {
  grouping.validate(model.num_linear());
  if (thresholds.size() != static_cast<std::size_t>(grouping.num_groups())) {
    throw InputError("clipped_backward: threshold arity mismatch");
  }
  const std::size_t batch = tape.batch;
  std::vector<GroupGradState> states;
  states.reserve(grouping.spans.size());
  for (int g = 0; g < grouping.num_groups(); ++g) {
    states.push_back(GroupGradState::make(model, grouping, g, batch));
    states.back().norms.assign(batch, 0.0);
  }

  // Group g completes once backprop has delivered e for its first (nearest
  // input) layer; the group's layers' (a, e) pairs are then all on the tape.
  std::vector<double> wsq(batch), bsq(batch), scales(batch);
  backward_per_layer(model, tape, dlogits, [&](int k, const Tensor&, const Tensor&) {
    const int ord = k - 1;
    for (int g = 0; g < grouping.num_groups(); ++g) {
      if (grouping.spans[g].first != ord) continue;
      GroupGradState& st = states[g];
      for (int l = grouping.spans[g].first; l <= grouping.spans[g].second; ++l) {
        layer_ghost(tape.activation_in(model, l + 1), tape.output_grad(l + 1), wsq.data(),
                    bsq.data());
        for (std::size_t i = 0; i < batch; ++i) st.norms[i] += wsq[i] + bsq[i];
      }
      const double c = thresholds[g];
      st.clipped_below = 0;
      for (std::size_t i = 0; i < batch; ++i) {
        st.norms[i] = std::sqrt(st.norms[i]);
        if (st.norms[i] <= c) ++st.clipped_below;
        scales[i] = clip_scale(st.norms[i], c);
      }
      for (int l = grouping.spans[g].first; l <= grouping.spans[g].second; ++l) {
        const int li = l - grouping.spans[g].first;
        fused_clipped_sum(tape.activation_in(model, l + 1), tape.output_grad(l + 1), scales,
                          st.gw[li], st.gb[li]);
      }
    }
  });
  return states;
}

std::vector<GroupGradState> flat_two_phase(const Model& model, const LayerTape& tape,
                                           const Grouping& grouping, double threshold) {
  grouping.validate(model.num_linear());
  if (!tape.complete()) throw StateError("flat_two_phase: tape is missing output gradients");
  const std::size_t batch = tape.batch;
  const int K = model.num_linear();

  // Phase 1: total per-example norms from cached (a, e) pairs.
  std::vector<double> total_sq(batch, 0.0), wsq(batch), bsq(batch);
  for (int k = 1; k <= K; ++k) {
    layer_ghost(tape.activation_in(model, k), tape.output_grad(k), wsq.data(), bsq.data());
    for (std::size_t i = 0; i < batch; ++i) total_sq[i] += wsq[i] + bsq[i];
  }
  std::vector<double> scales(batch);
  long below = 0;
  std::vector<double> total(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    total[i] = std::sqrt(total_sq[i]);
    if (total[i] <= threshold) ++below;
    scales[i] = clip_scale(total[i], threshold);
  }

  // Phase 2: one global scale per example, applied to every group.
  std::vector<GroupGradState> states;
  for (int g = 0; g < grouping.num_groups(); ++g) {
    GroupGradState st = GroupGradState::make(model, grouping, g, batch);
    st.norms = total;
    st.clipped_below = below;
    for (int l = grouping.spans[g].first; l <= grouping.spans[g].second; ++l) {
      const int li = l - grouping.spans[g].first;
      fused_clipped_sum(tape.activation_in(model, l + 1), tape.output_grad(l + 1), scales,
                        st.gw[li], st.gb[li]);
    }
    states.push_back(std::move(st));
  }
  return states;
}

Batch Batch::example(std::size_t i) const {
  Batch b;
  b.x = x.row(i);
  b.loss = loss;
  if (loss == LossKind::kCrossEntropy) {
    b.labels = {labels[i]};
  } else {
    b.targets = targets.row(i);
  }
  return b;
}

LossResult batch_loss(const Tensor& logits, const Batch& batch) {
  if (batch.loss == LossKind::kCrossEntropy) return cross_entropy(logits, batch.labels);
  return mse(logits, batch.targets);
}

std::vector<GroupGradState> naive_oracle(const Model& model, const Batch& batch,
                                         const Grouping& grouping, const ClipPolicy& policy) {
  grouping.validate(model.num_linear());
  const int G = grouping.num_groups();
  const std::size_t B = batch.size();
  const std::vector<double> thresholds = policy.group_thresholds(G);

  // Materialize every per-example gradient via an independent single-example
  // backward pass.
  std::vector<LayerGrads> per_example;
  per_example.reserve(B);
  std::size_t bytes = 0;
  for (std::size_t i = 0; i < B; ++i) {
    const Batch one = batch.example(i);
    LayerTape tape;
    const Tensor logits = forward(model, one.x, &tape);
    const LossResult loss = batch_loss(logits, one);
    per_example.push_back(model_gradient(model, one.x, loss.dlogits));
    for (const Tensor& t : per_example.back().gw) bytes += t.size() * sizeof(double);
    for (const Tensor& t : per_example.back().gb) bytes += t.size() * sizeof(double);
  }
  TrackedBytes track(MemPool::kParamGrad, bytes);

  std::vector<GroupGradState> states;
  for (int g = 0; g < G; ++g) {
    states.push_back(GroupGradState::make(model, grouping, g, B));
    states.back().norms.assign(B, 0.0);
  }

  for (std::size_t i = 0; i < B; ++i) {
    // Per-group norms for this example.
    std::vector<double> group_norm(G, 0.0);
    for (int g = 0; g < G; ++g) {
      for (int l = grouping.spans[g].first; l <= grouping.spans[g].second; ++l) {
        group_norm[g] += squared_norm(per_example[i].gw[l]) + squared_norm(per_example[i].gb[l]);
      }
      group_norm[g] = std::sqrt(group_norm[g]);
    }
    double total = 0.0;
    for (int g = 0; g < G; ++g) total += group_norm[g] * group_norm[g];
    total = std::sqrt(total);

    for (int g = 0; g < G; ++g) {
      GroupGradState& st = states[g];
      const double norm = policy.kind == PolicyKind::kFlat ? total : group_norm[g];
      const double c = thresholds[g];
      st.norms[i] = norm;
      if (norm <= c) ++st.clipped_below;
      const double s = clip_scale(norm, c);
      for (int l = grouping.spans[g].first; l <= grouping.spans[g].second; ++l) {
        const int li = l - grouping.spans[g].first;
        axpy(s, per_example[i].gw[l], st.gw[li]);
        axpy(s, per_example[i].gb[l], st.gb[li]);
      }
    }
  }
  return states;
}

std::vector<double> normalize_thresholds(std::span<const double> thresholds, double c_global) {
  if (!(c_global > 0.0)) throw InputError("global threshold must be positive");
  double sq = 0.0;
  for (double c : thresholds) {
    if (c < 0.0) throw InputError("thresholds must be nonnegative");
    sq += c * c;
  }
  if (sq == 0.0) throw InputError("cannot normalize an all-zero threshold vector");
  const double scale = c_global / std::sqrt(sq);
  std::vector<double> out(thresholds.begin(), thresholds.end());
  for (double& c : out) c *= scale;
  return out;
}

}  // namespace groupclip
