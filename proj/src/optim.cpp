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

#include "groupclip/optim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "groupclip/errors.hpp"

namespace groupclip {
namespace {

double argmax_accuracy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.shape.back();
  const std::size_t positions = logits.rank() == 3 ? logits.dim(1) : 1;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    // Sequence logits are mean-pooled over positions before argmax.
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      double v = 0.0;
      for (std::size_t t = 0; t < positions; ++t) v += logits.data[(i * positions + t) * classes + c];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    if (static_cast<int>(best) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(batch);
}

// Adds N(0, stddev^2) noise to tensors in their listed order; one shared rng
// so the coordinate order is part of the reproducibility contract.
void add_noise(std::span<Tensor* const> tensors, double stddev, Rng& rng) {
  for (Tensor* t : tensors) {
    for (double& v : t->data) v += rng.gaussian(stddev);
  }
}

}  // namespace

Batch Dataset::select(std::span<const std::size_t> idx) const {
  if (idx.empty()) throw InputError("select: empty index set");
  Batch b;
  b.loss = loss;
  std::vector<std::size_t> shape = x.shape;
  shape[0] = idx.size();
  const std::size_t stride = shape_product(shape) / shape[0];
  b.x = Tensor(shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::memcpy(b.x.data.data() + r * stride, x.data.data() + idx[r] * stride,
                stride * sizeof(double));
  }
  if (loss == LossKind::kCrossEntropy) {
    b.labels.reserve(idx.size());
    for (std::size_t i : idx) b.labels.push_back(labels[i]);
  } else {
    std::vector<std::size_t> tshape = targets.shape;
    tshape[0] = idx.size();
    const std::size_t tstride = shape_product(tshape) / idx.size();
    b.targets = Tensor(tshape);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::memcpy(b.targets.data.data() + r * tstride, targets.data.data() + idx[r] * tstride,
                  tstride * sizeof(double));
    }
  }
  return b;
}

Batch Dataset::all() const {
  std::vector<std::size_t> idx(size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return select(idx);
}

double OptimizerConfig::lr_at(long t) const {
  if (schedule == Schedule::kConstant) return lr;
  const double frac = steps > 1 ? static_cast<double>(t) / static_cast<double>(steps) : 0.0;
  return lr * (1.0 - frac);
}

std::size_t OptimizerConfig::nominal_batch(std::size_t dataset_size) const {
  if (batch_kind == BatchKind::kFixed) return batch_size;
  const double b = sampling_rate * static_cast<double>(dataset_size);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(b)));
}

std::vector<std::size_t> sample_minibatch(std::size_t dataset_size, const OptimizerConfig& cfg,
                                          Rng rng) {
  if (dataset_size == 0) throw InputError("sample_minibatch: empty dataset");
  std::vector<std::size_t> idx;
  if (cfg.batch_kind == BatchKind::kPoisson) {
    for (std::size_t i = 0; i < dataset_size; ++i) {
      if (rng.uniform() < cfg.sampling_rate) idx.push_back(i);
    }
  } else {
    if (cfg.batch_size > dataset_size) {
      throw InputError("fixed batch size " + std::to_string(cfg.batch_size) +
                       " exceeds dataset size " + std::to_string(dataset_size));
    }
    std::vector<std::size_t> pool(dataset_size);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const std::size_t j = i + rng.below(dataset_size - i);
      std::swap(pool[i], pool[j]);
      idx.push_back(pool[i]);
    }
  }
  return idx;
}

std::vector<double> TrainState::effective_thresholds() const {
  if (policy.kind == PolicyKind::kAdaptivePerGroup) {
    // Estimators hold raw per-group quantile estimates; under the
    // equivalent-global convention the applied thresholds are their rescaling
    // to Euclidean norm rescale_global.
    std::vector<double> c;
    c.reserve(estimators.size());
    for (const QuantileEstimator& e : estimators) c.push_back(e.threshold);
    if (policy.rescale_global > 0.0) return normalize_thresholds(c, policy.rescale_global);
    return c;
  }
  return policy.group_thresholds(grouping.num_groups());
}

std::vector<ParamGroup> TrainState::param_groups() const {
  const std::vector<std::size_t> dims = group_dims(model, grouping);
  const std::vector<double> thresholds = effective_thresholds();
  std::vector<ParamGroup> groups(dims.size());
  for (std::size_t k = 0; k < dims.size(); ++k) {
    groups[k].index = static_cast<int>(k) + 1;
    groups[k].dim = dims[k];
    groups[k].threshold = thresholds[k];
  }
  return groups;
}

TrainState make_train_state(Model model, Grouping grouping, ClipPolicy policy,
                            std::uint64_t seed, std::size_t nominal_batch) {
  grouping.validate(model.num_linear());
  TrainState st;
  st.model = std::move(model);
  st.grouping = std::move(grouping);
  st.policy = std::move(policy);
  st.seed = seed;
  if (st.policy.kind == PolicyKind::kAdaptivePerGroup) {
    const std::vector<double> init = st.policy.group_thresholds(st.grouping.num_groups());
    for (double c : init) {
      QuantileEstimator est;
      est.threshold = c;
      est.target = st.policy.target_quantile;
      est.lr = st.policy.quantile_lr;
      est.count_noise = st.policy.count_noise;
      est.nominal_batch = nominal_batch;
      st.estimators.push_back(est);
    }
  }
  const int L = st.model.num_linear();
  for (int k = 1; k <= L; ++k) {
    st.mom_w.push_back(Tensor(st.model.linear(k).w.shape));
    st.mom_b.push_back(Tensor(st.model.linear(k).b.shape));
    st.vel_w.push_back(Tensor(st.model.linear(k).w.shape));
    st.vel_b.push_back(Tensor(st.model.linear(k).b.shape));
  }
  return st;
}

StepRecord dp_step(TrainState& state, const Dataset& data, std::span<const std::size_t> batch_idx,
                   const TrainOptions& options) {
  const Rng master(state.seed);
  const long t = state.step;
  const int G = state.grouping.num_groups();
  const std::size_t nominal_b = options.opt.nominal_batch(data.size());
  const std::vector<double> thresholds = state.effective_thresholds();

  if (batch_idx.empty() && options.opt.batch_kind == BatchKind::kFixed) {
    throw StateError("dp_step: empty batch under a fixed-size batch spec");
  }

  gradmem::reset();
  StepRecord rec;
  rec.step = t;
  rec.realized_batch = batch_idx.size();
  rec.thresholds = thresholds;
  rec.clipped_fraction.assign(G, 0.0);

  // Clipped per-group sums; an empty Poisson batch degenerates to a pure
  // noise-addition step.
  std::vector<GroupGradState> sums;
  if (!batch_idx.empty()) {
    const Batch batch = data.select(batch_idx);
    LayerTape tape;
    const Tensor logits = forward(state.model, batch.x, &tape);
    const LossResult loss = batch_loss(logits, batch);
    rec.loss = loss.value;
    if (batch.loss == LossKind::kCrossEntropy) {
      rec.accuracy = argmax_accuracy(logits, batch.labels);
    }
    if (state.policy.kind == PolicyKind::kFlat) {
      backward_per_layer(state.model, tape, loss.dlogits, nullptr);
      sums = flat_two_phase(state.model, tape, state.grouping, state.policy.flat_threshold);
    } else {
      sums = clipped_backward(state.model, tape, loss.dlogits, state.grouping, thresholds);
    }
    for (int g = 0; g < G; ++g) {
      for (const Tensor& w : sums[g].gw) {
        if (!w.all_finite()) throw NumericError("non-finite gradient in group " + std::to_string(g + 1));
      }
      for (const Tensor& b : sums[g].gb) {
        if (!b.all_finite()) throw NumericError("non-finite gradient in group " + std::to_string(g + 1));
      }
      rec.clipped_fraction[g] =
          1.0 - static_cast<double>(sums[g].clipped_below) / static_cast<double>(batch_idx.size());
      if (options.record_norms) rec.group_norms.push_back(sums[g].norms);
    }
  } else {
    for (int g = 0; g < G; ++g) {
      GroupGradState st = GroupGradState::make(state.model, state.grouping, g);
      sums.push_back(std::move(st));
    }
  }

  // Per-group noise standard deviations.
  rec.noise_std.assign(G, 0.0);
  if (options.noise_enabled && options.privacy.sigma_new > 0.0) {
    if (state.policy.kind == PolicyKind::kFlat) {
      // Flat release: sensitivity is the flat threshold, isotropic noise.
      const double s = options.privacy.sigma_new * state.policy.flat_threshold;
      rec.noise_std.assign(G, s);
    } else {
      const NoisePlan plan =
          make_noise_plan(options.allocation, state.param_groups(), options.privacy.sigma_new);
      rec.noise_std = plan.stddev;
    }
  }

  // Noise draw: one substream per group keyed on (seed, step, role, group) so
  // matched-draw comparisons across execution paths are exact.
  if (options.noise_enabled) {
    for (int g = 0; g < G; ++g) {
      if (rec.noise_std[g] == 0.0) continue;
      Rng noise_rng = master.derive(rng_role::kGradNoise, static_cast<std::uint64_t>(t),
                                    static_cast<std::uint64_t>(g + 1));
      std::vector<Tensor*> tensors;
      for (std::size_t l = 0; l < sums[g].gw.size(); ++l) {
        tensors.push_back(&sums[g].gw[l]);
        tensors.push_back(&sums[g].gb[l]);
      }
      add_noise(tensors, rec.noise_std[g], noise_rng);
    }
    state.grad_noise_events += 1;
  }

  // Parameter update theta <- theta - lr * (clipped_sum + z) / B.
  const double lr = options.opt.lr_at(t);
  const double inv_b = 1.0 / static_cast<double>(nominal_b);
  for (int g = 0; g < G; ++g) {
    const auto& [first, last] = state.grouping.spans[g];
    for (int l = first; l <= last; ++l) {
      const int li = l - first;
      LinearLayer& lin = state.model.linear(l + 1);
      Tensor& gw = sums[g].gw[li];
      Tensor& gb = sums[g].gb[li];
      for (double& v : gw.data) v *= inv_b;
      for (double& v : gb.data) v *= inv_b;
      if (options.opt.rule == Rule::kSgd) {
        if (options.opt.momentum != 0.0) {
          Tensor& mw = state.mom_w[l];
          Tensor& mb = state.mom_b[l];
          for (std::size_t i = 0; i < mw.size(); ++i) {
            mw.data[i] = options.opt.momentum * mw.data[i] + gw.data[i];
            lin.w.data[i] -= lr * mw.data[i];
          }
          for (std::size_t i = 0; i < mb.size(); ++i) {
            mb.data[i] = options.opt.momentum * mb.data[i] + gb.data[i];
            lin.b.data[i] -= lr * mb.data[i];
          }
        } else {
          for (std::size_t i = 0; i < lin.w.size(); ++i) lin.w.data[i] -= lr * gw.data[i];
          for (std::size_t i = 0; i < lin.b.size(); ++i) lin.b.data[i] -= lr * gb.data[i];
        }
      } else {
        // DP-Adam: the privatized averaged gradient feeds the moments.
        const double b1 = options.opt.beta1, b2 = options.opt.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t + 1));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t + 1));
        Tensor& mw = state.mom_w[l];
        Tensor& vw = state.vel_w[l];
        for (std::size_t i = 0; i < mw.size(); ++i) {
          mw.data[i] = b1 * mw.data[i] + (1.0 - b1) * gw.data[i];
          vw.data[i] = b2 * vw.data[i] + (1.0 - b2) * gw.data[i] * gw.data[i];
          lin.w.data[i] -=
              lr * (mw.data[i] / c1) / (std::sqrt(vw.data[i] / c2) + options.opt.adam_eps);
        }
        Tensor& mb = state.mom_b[l];
        Tensor& vb = state.vel_b[l];
        for (std::size_t i = 0; i < mb.size(); ++i) {
          mb.data[i] = b1 * mb.data[i] + (1.0 - b1) * gb.data[i];
          vb.data[i] = b2 * vb.data[i] + (1.0 - b2) * gb.data[i] * gb.data[i];
          lin.b.data[i] -=
              lr * (mb.data[i] / c1) / (std::sqrt(vb.data[i] / c2) + options.opt.adam_eps);
        }
      }
    }
  }

  // Quantile updates after the parameter update, group order 1..K. Counts are
  // taken against the raw quantile estimates, so each estimator tracks its
  // group's norm quantile even when the applied thresholds are rescaled; the
  // released statistic is still a count of sensitivity 1/2.
  if (state.policy.kind == PolicyKind::kAdaptivePerGroup) {
    for (int g = 0; g < G; ++g) {
      Rng count_rng = master.derive(rng_role::kCountNoise, static_cast<std::uint64_t>(t),
                                    static_cast<std::uint64_t>(g + 1));
      const double z =
          options.noise_enabled ? count_rng.gaussian(state.estimators[g].count_noise) : 0.0;
      const long below = sums[g].norms.empty()
                             ? 0
                             : count_below(sums[g].norms, state.estimators[g].threshold);
      state.estimators[g].update(below, z);
      state.count_noise_draws += 1;
    }
  }

  state.step += 1;
  rec.peak_grad_bytes = gradmem::peak(MemPool::kParamGrad);
  return rec;
}

void train(TrainState& state, const Dataset& data, const TrainOptions& options, StepSink* sink) {
  const Rng master(state.seed);
  for (long t = state.step; t < options.opt.steps; ++t) {
    const std::vector<std::size_t> idx =
        sample_minibatch(data.size(), options.opt, master.derive(rng_role::kBatch,
                                                                 static_cast<std::uint64_t>(t)));
    StepRecord rec = dp_step(state, data, idx, options);
    if (sink) sink->on_step(rec);
  }
}

void flat_train_reference(TrainState& state, const Dataset& data, const TrainOptions& options,
                          StepSink* sink) {
  if (state.policy.kind != PolicyKind::kFlat) {
    throw InputError("flat_train_reference requires a flat clipping policy");
  }
  train(state, data, options, sink);
}

double evaluate_accuracy(const Model& model, const Dataset& data) {
  const Tensor logits = forward(model, data.x, nullptr);
  return argmax_accuracy(logits, data.labels);
}

double evaluate_loss(const Model& model, const Dataset& data) {
  const Tensor logits = forward(model, data.x, nullptr);
  return batch_loss(logits, data.all()).value;
}

// ---------------------------------------------------------------------------
// Checkpoints. Field order (all integers little-endian, all floats IEEE f64):
//   magic "GCKP", u32 version, u64 seed, i64 step,
//   policy {u32 kind, f64 flat_threshold, f64 q, f64 eta, f64 sigma_b,
//           f64 rescale_global, u32 n, f64 thresholds[n]},
//   grouping {u32 n, (u32 first, u32 last)[n]},
//   model {u32 n_layers, per layer: u32 tag (0 linear, 1 relu, 2 tanh);
//          linear: u32 out, u32 in, f64 w[out*in], f64 b[out]},
//   moments {per linear layer: f64 mom_w, mom_b, vel_w, vel_b buffers},
//   estimators {u32 n, per estimator: f64 threshold, target, lr, count_noise,
//               u64 nominal_batch},
//   counters {i64 grad_noise_events, i64 count_noise_draws}.
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x504b4347;  // "GCKP"
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("checkpoint truncated at byte " + std::to_string(is.tellg()));
  return v;
}

void put_doubles(std::ofstream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_doubles(std::ifstream& is, std::vector<double>& v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw FormatError("checkpoint truncated in tensor payload");
}

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StateError("cannot open checkpoint for writing: " + path);
  put(os, kCheckpointMagic);
  put(os, kCheckpointVersion);
  put(os, state.seed);
  put(os, static_cast<std::int64_t>(state.step));

  put(os, static_cast<std::uint32_t>(state.policy.kind));
  put(os, state.policy.flat_threshold);
  put(os, state.policy.target_quantile);
  put(os, state.policy.quantile_lr);
  put(os, state.policy.count_noise);
  put(os, state.policy.rescale_global);
  put(os, static_cast<std::uint32_t>(state.policy.thresholds.size()));
  put_doubles(os, state.policy.thresholds);

  put(os, static_cast<std::uint32_t>(state.grouping.spans.size()));
  for (const auto& [first, last] : state.grouping.spans) {
    put(os, static_cast<std::uint32_t>(first));
    put(os, static_cast<std::uint32_t>(last));
  }

  put(os, static_cast<std::uint32_t>(state.model.layers.size()));
  for (const Layer& layer : state.model.layers) {
    if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
      put(os, static_cast<std::uint32_t>(0));
      put(os, static_cast<std::uint32_t>(lin->fan_out()));
      put(os, static_cast<std::uint32_t>(lin->fan_in()));
      put_doubles(os, lin->w.data);
      put_doubles(os, lin->b.data);
    } else {
      put(os, std::get<Activation>(layer) == Activation::kRelu ? static_cast<std::uint32_t>(1)
                                                               : static_cast<std::uint32_t>(2));
    }
  }

  for (std::size_t l = 0; l < state.mom_w.size(); ++l) {
    put_doubles(os, state.mom_w[l].data);
    put_doubles(os, state.mom_b[l].data);
    put_doubles(os, state.vel_w[l].data);
    put_doubles(os, state.vel_b[l].data);
  }

  put(os, static_cast<std::uint32_t>(state.estimators.size()));
  for (const QuantileEstimator& e : state.estimators) {
    put(os, e.threshold);
    put(os, e.target);
    put(os, e.lr);
    put(os, e.count_noise);
    put(os, static_cast<std::uint64_t>(e.nominal_batch));
  }
  put(os, static_cast<std::int64_t>(state.grad_noise_events));
  put(os, static_cast<std::int64_t>(state.count_noise_draws));
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open checkpoint: " + path);
  if (get<std::uint32_t>(is) != kCheckpointMagic) throw FormatError("bad checkpoint magic");
  const std::uint32_t version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  TrainState state;
  state.seed = get<std::uint64_t>(is);
  state.step = get<std::int64_t>(is);

  state.policy.kind = static_cast<PolicyKind>(get<std::uint32_t>(is));
  state.policy.flat_threshold = get<double>(is);
  state.policy.target_quantile = get<double>(is);
  state.policy.quantile_lr = get<double>(is);
  state.policy.count_noise = get<double>(is);
  state.policy.rescale_global = get<double>(is);
  state.policy.thresholds.resize(get<std::uint32_t>(is));
  get_doubles(is, state.policy.thresholds);

  const std::uint32_t n_groups = get<std::uint32_t>(is);
  for (std::uint32_t g = 0; g < n_groups; ++g) {
    const int first = static_cast<int>(get<std::uint32_t>(is));
    const int last = static_cast<int>(get<std::uint32_t>(is));
    state.grouping.spans.emplace_back(first, last);
  }

  const std::uint32_t n_layers = get<std::uint32_t>(is);
  for (std::uint32_t p = 0; p < n_layers; ++p) {
    const std::uint32_t tag = get<std::uint32_t>(is);
    if (tag == 0) {
      const std::size_t out = get<std::uint32_t>(is);
      const std::size_t in = get<std::uint32_t>(is);
      LinearLayer lin;
      lin.w = Tensor({out, in});
      lin.b = Tensor({out});
      get_doubles(is, lin.w.data);
      get_doubles(is, lin.b.data);
      state.model.layers.emplace_back(std::move(lin));
    } else if (tag == 1) {
      state.model.layers.emplace_back(Activation::kRelu);
    } else if (tag == 2) {
      state.model.layers.emplace_back(Activation::kTanh);
    } else {
      throw FormatError("unknown layer tag " + std::to_string(tag));
    }
  }

  const int L = state.model.num_linear();
  for (int k = 1; k <= L; ++k) {
    const LinearLayer& lin = state.model.linear(k);
    state.mom_w.push_back(Tensor(lin.w.shape));
    state.mom_b.push_back(Tensor(lin.b.shape));
    state.vel_w.push_back(Tensor(lin.w.shape));
    state.vel_b.push_back(Tensor(lin.b.shape));
    get_doubles(is, state.mom_w.back().data);
    get_doubles(is, state.mom_b.back().data);
    get_doubles(is, state.vel_w.back().data);
    get_doubles(is, state.vel_b.back().data);
  }

  const std::uint32_t n_est = get<std::uint32_t>(is);
  for (std::uint32_t g = 0; g < n_est; ++g) {
    QuantileEstimator e;
    e.threshold = get<double>(is);
    e.target = get<double>(is);
    e.lr = get<double>(is);
    e.count_noise = get<double>(is);
    e.nominal_batch = get<std::uint64_t>(is);
    state.estimators.push_back(e);
  }
  state.grad_noise_events = get<std::int64_t>(is);
  state.count_noise_draws = get<std::int64_t>(is);
  return state;
}

}  // namespace groupclip
