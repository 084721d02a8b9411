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

#include "groupclip/nn.hpp"

#include <cmath>
#include <string>

#include "groupclip/errors.hpp"
#include "groupclip/kernels.hpp"
#include "groupclip/memtrack.hpp"

namespace groupclip {
namespace {

std::size_t rows_of(const Tensor& t) {
  // Flattened row count for batched linear algebra: B or B*T.
  return t.rank() == 3 ? t.dim(0) * t.dim(1) : t.dim(0);
}

std::size_t feature_dim(const Tensor& t) { return t.shape.back(); }

Tensor like_with_feature(const Tensor& t, std::size_t features) {
  std::vector<std::size_t> s = t.shape;
  s.back() = features;
  return Tensor(std::move(s));
}

}  // namespace

std::vector<int> Model::linear_indices() const {
  std::vector<int> idx;
  for (int p = 0; p < static_cast<int>(layers.size()); ++p) {
    if (std::holds_alternative<LinearLayer>(layers[p])) idx.push_back(p);
  }
  return idx;
}

int Model::num_linear() const {
  int n = 0;
  for (const Layer& l : layers) {
    if (std::holds_alternative<LinearLayer>(l)) ++n;
  }
  return n;
}

LinearLayer& Model::linear(int k) {
  return std::get<LinearLayer>(layers[linear_indices()[k - 1]]);
}

const LinearLayer& Model::linear(int k) const {
  return std::get<LinearLayer>(layers[linear_indices()[k - 1]]);
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers) {
    if (const auto* lin = std::get_if<LinearLayer>(&l)) n += lin->param_count();
  }
  return n;
}

std::size_t Model::input_dim() const {
  for (const Layer& l : layers) {
    if (const auto* lin = std::get_if<LinearLayer>(&l)) return lin->fan_in();
  }
  throw StateError("model has no Linear layer");
}

std::size_t Model::output_dim() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (const auto* lin = std::get_if<LinearLayer>(&*it)) return lin->fan_out();
  }
  throw StateError("model has no Linear layer");
}

Model make_mlp(std::span<const std::size_t> widths, Activation act, double init_scale,
               const Rng& rng) {
  if (widths.size() < 2) throw InputError("make_mlp: need at least input and output widths");
  Model m;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    LinearLayer lin;
    lin.w = Tensor({widths[l + 1], widths[l]});
    lin.b = Tensor({widths[l + 1]});
    Rng layer_rng = rng.derive(rng_role::kInit, l);
    const double std = init_scale / std::sqrt(static_cast<double>(widths[l]));
    for (double& v : lin.w.data) v = layer_rng.gaussian(std);
    m.layers.emplace_back(std::move(lin));
    if (l + 2 < widths.size()) m.layers.emplace_back(act);
  }
  return m;
}

const Tensor& LayerTape::activation_in(const Model& model, int k) const {
  const int p = model.linear_indices()[k - 1];
  return p == 0 ? input : outs[p - 1];
}

const Tensor& LayerTape::output_grad(int k) const {
  if (!e_set[k - 1]) throw StateError("output gradients for group " + std::to_string(k) + " not populated");
  return e[k - 1];
}

bool LayerTape::complete() const {
  for (char c : e_set) {
    if (!c) return false;
  }
  return true;
}

Tensor forward(const Model& model, const Tensor& x, LayerTape* tape) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("forward: input must be (B,in) or (B,T,in), got " + x.shape_str());
  }
  if (feature_dim(x) != model.input_dim()) {
    throw DimensionError("forward: input features " + std::to_string(feature_dim(x)) +
                         " do not match first Linear layer fan-in " +
                         std::to_string(model.input_dim()));
  }
  const int num_groups = model.num_linear();
  if (tape) {
    tape->input = x;
    tape->outs.assign(model.layers.size(), Tensor{});
    tape->e.assign(num_groups, Tensor{});
    tape->e_set.assign(num_groups, 0);
    tape->e_bytes.clear();
    tape->batch = x.dim(0);
    tape->sequence = x.rank() == 3;
    tape->seq_len = tape->sequence ? x.dim(1) : 1;
  }

  Tensor cur = x;
  for (std::size_t p = 0; p < model.layers.size(); ++p) {
    const Layer& layer = model.layers[p];
    if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
      if (feature_dim(cur) != lin->fan_in()) {
        throw DimensionError("forward: layer " + std::to_string(p) + " expects " +
                             std::to_string(lin->fan_in()) + " features, got " +
                             std::to_string(feature_dim(cur)));
      }
      Tensor next = like_with_feature(cur, lin->fan_out());
      kernels::linear_forward(cur.data.data(), lin->w.data.data(), lin->b.data.data(),
                              next.data.data(), rows_of(cur), lin->fan_in(), lin->fan_out());
      cur = std::move(next);
    } else {
      const Activation act = std::get<Activation>(layer);
      Tensor next = cur;
      if (act == Activation::kRelu) {
        for (double& v : next.data) v = v > 0.0 ? v : 0.0;
      } else {
        for (double& v : next.data) v = std::tanh(v);
      }
      cur = std::move(next);
    }
    if (tape) tape->outs[p] = cur;
  }
  return cur;
}

LossResult cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = feature_dim(logits);
  const std::size_t positions = logits.rank() == 3 ? logits.dim(1) : 1;
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
  }
  LossResult res;
  res.dlogits = Tensor(logits.shape);
  TrackedBytes track(MemPool::kBackprop, res.dlogits.size() * sizeof(double));
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InputError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
    double example_loss = 0.0;
    for (std::size_t t = 0; t < positions; ++t) {
      const double* row = logits.data.data() + (i * positions + t) * classes;
      double* grow = res.dlogits.data.data() + (i * positions + t) * classes;
      double mx = row[0];
      for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
      double z = 0.0;
      for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
      const double logz = std::log(z) + mx;
      example_loss += (logz - row[y]) / static_cast<double>(positions);
      for (std::size_t c = 0; c < classes; ++c) {
        const double p = std::exp(row[c] - logz);
        grow[c] = (p - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0)) /
                  static_cast<double>(positions);
      }
    }
    total += example_loss;
  }
  res.value = total / static_cast<double>(batch);
  return res;
}

LossResult mse(const Tensor& logits, const Tensor& target) {
  if (!logits.same_shape(target)) {
    throw DimensionError("mse: logits " + logits.shape_str() + " vs target " + target.shape_str());
  }
  const std::size_t batch = logits.dim(0);
  LossResult res;
  res.dlogits = Tensor(logits.shape);
  TrackedBytes track(MemPool::kBackprop, res.dlogits.size() * sizeof(double));
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double d = logits.data[i] - target.data[i];
    total += d * d;
    res.dlogits.data[i] = 2.0 * d;
  }
  res.value = total / static_cast<double>(batch);
  return res;
}

void backward_per_layer(const Model& model, LayerTape& tape, const Tensor& dlogits,
                        const LayerVisitor& visitor, Tensor* input_grad) {
  if (tape.outs.size() != model.layers.size() || tape.outs.empty()) {
    throw StateError("backward_per_layer: tape does not match model");
  }
  if (!tape.outs.back().same_shape(dlogits)) {
    throw StateError("backward_per_layer: dlogits " + dlogits.shape_str() +
                     " does not match forward output " + tape.outs.back().shape_str());
  }
  const std::vector<int> lin_idx = model.linear_indices();
  int k = static_cast<int>(lin_idx.size());

  Tensor grad = dlogits;  // gradient w.r.t. current layer's output
  for (int p = static_cast<int>(model.layers.size()) - 1; p >= 0; --p) {
    const Layer& layer = model.layers[p];
    if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
      tape.e[k - 1] = grad;
      tape.e_set[k - 1] = 1;
      tape.e_bytes.emplace_back(MemPool::kBackprop, grad.size() * sizeof(double));
      const Tensor& a = p == 0 ? tape.input : tape.outs[p - 1];
      if (visitor) visitor(k, a, tape.e[k - 1]);
      if (p > 0 || input_grad) {
        Tensor prev = like_with_feature(grad, lin->fan_in());
        kernels::linear_backward_input(grad.data.data(), lin->w.data.data(), prev.data.data(),
                                       rows_of(grad), lin->fan_in(), lin->fan_out());
        grad = std::move(prev);
      }
      --k;
    } else {
      const Activation act = std::get<Activation>(layer);
      const Tensor& out = tape.outs[p];
      if (act == Activation::kRelu) {
        for (std::size_t i = 0; i < grad.size(); ++i) {
          if (out.data[i] <= 0.0) grad.data[i] = 0.0;
        }
      } else {
        for (std::size_t i = 0; i < grad.size(); ++i) {
          grad.data[i] *= 1.0 - out.data[i] * out.data[i];
        }
      }
    }
  }
  if (input_grad) *input_grad = std::move(grad);
}

LayerGrads model_gradient(const Model& model, const Tensor& x, const Tensor& dlogits) {
  LayerTape tape;
  forward(model, x, &tape);
  const int K = model.num_linear();
  LayerGrads grads;
  grads.gw.reserve(K);
  grads.gb.reserve(K);
  for (int k = 1; k <= K; ++k) {
    grads.gw.push_back(Tensor(model.linear(k).w.shape));
    grads.gb.push_back(Tensor(model.linear(k).b.shape));
  }
  backward_per_layer(model, tape, dlogits, [&](int k, const Tensor& a, const Tensor& e) {
    const std::size_t in = a.shape.back();
    const std::size_t out = e.shape.back();
    kernels::scaled_weight_grad(a.data.data(), e.data.data(), nullptr,
                                grads.gw[k - 1].data.data(), grads.gb[k - 1].data.data(),
                                rows_of(a), in, out);
  });
  return grads;
}

}  // namespace groupclip
