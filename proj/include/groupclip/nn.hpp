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

#include <functional>
#include <span>
#include <variant>
#include <vector>

#include "groupclip/memtrack.hpp"
#include "groupclip/rng.hpp"
#include "groupclip/tensor.hpp"

namespace groupclip {

// Minimal reverse-mode core for feedforward nets. Backpropagation exposes
// each Linear layer's (input activations, output gradients) pair the moment
// the output gradients exist, so clipping can run layer by layer instead of
// waiting for the full backward pass.

enum class Activation { kRelu, kTanh };

struct LinearLayer {
  Tensor w;  // out x in
  Tensor b;  // out
  std::size_t fan_in() const { return w.dim(1); }
  std::size_t fan_out() const { return w.dim(0); }
  std::size_t param_count() const { return w.size() + b.size(); }
};

using Layer = std::variant<LinearLayer, Activation>;

struct Model {
  std::vector<Layer> layers;

  // Positions of Linear layers in forward order. Clipping group k (1-based,
  // group K nearest the output) corresponds to linear_indices()[k-1].
  std::vector<int> linear_indices() const;
  int num_linear() const;
  LinearLayer& linear(int k);              // 1-based group index
  const LinearLayer& linear(int k) const;  // 1-based group index
  std::size_t param_count() const;
  std::size_t input_dim() const;
  std::size_t output_dim() const;
};

// MLP builder: widths = {in, h1, ..., out}; an activation follows every
// Linear layer except the last. W ~ N(0, (init_scale/sqrt(fan_in))^2), b = 0.
Model make_mlp(std::span<const std::size_t> widths, Activation act, double init_scale,
               const Rng& rng);

// Per-batch forward record. outs[p] is the output of layer p; the input
// activation of the Linear layer at position p is outs[p-1] (or the batch
// input for p == 0). e[k-1] is group k's output gradient, populated in
// backward order.
struct LayerTape {
  Tensor input;
  std::vector<Tensor> outs;
  std::vector<Tensor> e;
  std::vector<char> e_set;
  std::vector<TrackedBytes> e_bytes;  // backprop-workspace accounting
  std::size_t batch = 0;
  bool sequence = false;
  std::size_t seq_len = 1;

  const Tensor& activation_in(const Model& model, int k) const;  // 1-based group
  const Tensor& output_grad(int k) const;                        // 1-based group
  bool complete() const;
};

// Forward pass; x is (B, in) or (B, T, in). Records activations in tape.
Tensor forward(const Model& model, const Tensor& x, LayerTape* tape);

enum class LossKind { kCrossEntropy, kMse };

struct LossResult {
  double value = 0.0;     // mean per-example loss
  Tensor dlogits;         // gradient of the SUM of per-example losses
};

// Softmax cross-entropy with integer labels. For (B, T, out) logits the
// per-example loss is the mean over positions against that example's label.
LossResult cross_entropy(const Tensor& logits, std::span<const int> labels);

// Squared-error: per-example loss is |logits_i - target_i|^2 summed over all
// of the example's coordinates.
LossResult mse(const Tensor& logits, const Tensor& target);

// visitor(k, a, e) is invoked for group k = K down to 1 as soon as group k's
// output gradients are available; input-gradient propagation then continues.
// When input_grad is non-null the gradient w.r.t. the model input is also
// produced (pipeline chunks forward it to the upstream device).
using LayerVisitor = std::function<void(int k, const Tensor& a, const Tensor& e)>;

void backward_per_layer(const Model& model, LayerTape& tape, const Tensor& dlogits,
                        const LayerVisitor& visitor, Tensor* input_grad = nullptr);

// Whole-model gradient of the summed loss, materialized per group as (gw, gb)
// pairs; convenience wrapper over backward_per_layer.
struct LayerGrads {
  std::vector<Tensor> gw;
  std::vector<Tensor> gb;
};
LayerGrads model_gradient(const Model& model, const Tensor& x, const Tensor& dlogits);

}  // namespace groupclip
