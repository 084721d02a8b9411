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

#include "groupclip/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <tuple>

#include "groupclip/errors.hpp"

namespace groupclip {
namespace {

constexpr double kUnscheduled = -1.0;

struct Stage {
  StageKind kind = StageKind::kForward;
  int device = 0;  // 0 = barrier
  int microbatch = 0;
  double duration = 0.0;
  std::vector<int> deps;
  double start = kUnscheduled;
  double end = kUnscheduled;
};

int kind_rank(StageKind k) {
  // Device priority on ties: apply, then backward (drain), then forward.
  switch (k) {
    case StageKind::kApply: return 0;
    case StageKind::kBackward: return 1;
    case StageKind::kForward: return 2;
    case StageKind::kSync: return 3;
  }
  return 4;
}

// Greedy earliest-start list scheduler. Each device runs one stage at a
// time; barriers occupy no device. Retain-blocking: after a flat-mode
// backward the device may only run that microbatch's apply stage until it
// completes.
void schedule_stages(std::vector<Stage>& stages, int devices, bool retain_blocking) {
  std::vector<double> free_at(devices + 1, 0.0);
  std::vector<std::optional<int>> blocked_on(devices + 1);  // microbatch id
  std::size_t remaining = stages.size();

  auto deps_ready = [&](const Stage& s, double& dep_end) {
    dep_end = 0.0;
    for (int d : s.deps) {
      if (stages[d].end == kUnscheduled) return false;
      dep_end = std::max(dep_end, stages[d].end);
    }
    return true;
  };

  while (remaining > 0) {
    // Barriers schedule as soon as their dependencies resolve.
    bool progressed = true;
    while (progressed) {
      progressed = false;
      for (Stage& s : stages) {
        double dep_end = 0.0;
        if (s.device == 0 && s.start == kUnscheduled && deps_ready(s, dep_end)) {
          s.start = dep_end;
          s.end = dep_end + s.duration;
          --remaining;
          progressed = true;
        }
      }
    }
    if (remaining == 0) break;

    // Pick the device stage with the earliest feasible start.
    int best = -1;
    double best_start = std::numeric_limits<double>::infinity();
    for (int i = 0; i < static_cast<int>(stages.size()); ++i) {
      Stage& s = stages[i];
      if (s.device == 0 || s.start != kUnscheduled) continue;
      double dep_end = 0.0;
      if (!deps_ready(s, dep_end)) continue;
      if (blocked_on[s.device] &&
          !(s.kind == StageKind::kApply && s.microbatch == *blocked_on[s.device])) {
        continue;
      }
      const double est = std::max(dep_end, free_at[s.device]);
      if (best == -1 || est < best_start ||
          (est == best_start &&
           std::tuple(kind_rank(s.kind), s.microbatch, s.device) <
               std::tuple(kind_rank(stages[best].kind), stages[best].microbatch,
                          stages[best].device))) {
        best = i;
        best_start = est;
      }
    }
    if (best == -1) throw StateError("schedule deadlock; invalid stage graph");
    Stage& s = stages[best];
    s.start = best_start;
    s.end = best_start + s.duration;
    free_at[s.device] = s.end;
    --remaining;
    if (retain_blocking && s.kind == StageKind::kBackward) blocked_on[s.device] = s.microbatch;
    if (s.kind == StageKind::kApply && blocked_on[s.device] &&
        *blocked_on[s.device] == s.microbatch) {
      blocked_on[s.device].reset();
    }
  }
}

std::vector<ScheduleEvent> to_events(const std::vector<Stage>& stages) {
  std::vector<ScheduleEvent> events;
  events.reserve(stages.size());
  for (const Stage& s : stages) {
    events.push_back({s.start, s.end, s.device, s.microbatch, s.kind});
  }
  std::sort(events.begin(), events.end(), [](const ScheduleEvent& a, const ScheduleEvent& b) {
    return std::tuple(a.start, a.device, a.microbatch, kind_rank(a.kind)) <
           std::tuple(b.start, b.device, b.microbatch, kind_rank(b.kind));
  });
  return events;
}

// Chunks: each device takes its Linear layers plus the activation layers
// that follow them, up to the next device's first Linear layer.
std::vector<Model> partition_model(const Model& model, std::span<const int> linears_per_device) {
  std::vector<Model> chunks(linears_per_device.size());
  std::size_t layer = 0;
  for (std::size_t d = 0; d < linears_per_device.size(); ++d) {
    int need = linears_per_device[d];
    while (layer < model.layers.size()) {
      const bool is_linear = std::holds_alternative<LinearLayer>(model.layers[layer]);
      if (is_linear) {
        if (need == 0) break;
        --need;
      }
      chunks[d].layers.push_back(model.layers[layer]);
      ++layer;
    }
  }
  return chunks;
}

Tensor microbatch_slice(const Tensor& x, std::size_t first, std::size_t count) {
  std::vector<std::size_t> shape = x.shape;
  shape[0] = count;
  Tensor out(shape);
  const std::size_t stride = shape_product(shape) / count;
  std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(first * stride),
            x.data.begin() + static_cast<std::ptrdiff_t>((first + count) * stride),
            out.data.begin());
  return out;
}

// Shared execution for both clipping modes.
struct Execution {
  std::vector<DeviceState> devices;
  std::vector<std::vector<Tensor>> boundary_act;   // [device][microbatch] outputs
  std::vector<std::vector<Tensor>> boundary_grad;  // [device][microbatch] input grads
  std::vector<std::vector<double>> flat_scales;    // [microbatch] per-example scales
};

}  // namespace

Grouping PipelineConfig::grouping() const {
  return Grouping::consecutive(linears_per_device);
}

void PipelineConfig::validate(const Model& model, std::size_t batch) const {
  if (devices < 1) throw ConfigError("pipeline: need at least one device");
  if (static_cast<int>(linears_per_device.size()) != devices) {
    throw ConfigError("pipeline: partition arity does not match device count");
  }
  int total = 0;
  for (int n : linears_per_device) {
    if (n < 1) throw ConfigError("pipeline: every device must host at least one Linear layer");
    total += n;
  }
  if (total != model.num_linear()) {
    throw ConfigError("pipeline: partition covers " + std::to_string(total) +
                      " Linear layers, model has " + std::to_string(model.num_linear()));
  }
  if (microbatches < 1) throw ConfigError("pipeline: need at least one microbatch");
  if (batch % static_cast<std::size_t>(microbatches) != 0) {
    // Remainder policy: not supported; minibatch must split evenly.
    throw ConfigError("pipeline: microbatch count " + std::to_string(microbatches) +
                      " does not divide minibatch " + std::to_string(batch));
  }
  if (thresholds.size() != static_cast<std::size_t>(devices)) {
    throw ConfigError("pipeline: need one clipping threshold per device");
  }
  if (sigma < 0.0) throw ConfigError("pipeline: negative noise multiplier");
}

std::vector<ScheduleEvent> build_schedule(const PipelineConfig& config, PipelineMode mode,
                                          FlatWorkaround workaround) {
  const int K = config.devices;
  const int J = config.microbatches;
  if (K < 1 || J < 1) throw ConfigError("pipeline: invalid device or microbatch count");
  const CostModel& costs = config.costs;

  std::vector<Stage> stages;
  auto fwd_id = [&](int j, int k) { return (j - 1) * K + (k - 1); };
  auto bwd_id = [&](int j, int k) { return J * K + (j - 1) * K + (k - 1); };

  for (int j = 1; j <= J; ++j) {
    for (int k = 1; k <= K; ++k) {
      Stage f;
      f.kind = StageKind::kForward;
      f.device = k;
      f.microbatch = j;
      f.duration = costs.forward;
      if (k > 1) f.deps.push_back(fwd_id(j, k - 1));
      stages.push_back(f);
    }
  }
  for (int j = 1; j <= J; ++j) {
    for (int k = 1; k <= K; ++k) {
      Stage b;
      b.kind = StageKind::kBackward;
      b.device = k;
      b.microbatch = j;
      b.duration = costs.backward;
      if (mode == PipelineMode::kFlat && workaround == FlatWorkaround::kOffload) {
        b.duration += costs.offload;
      }
      if (k == K) {
        b.deps.push_back(fwd_id(j, K));
      } else {
        b.deps.push_back(bwd_id(j, k + 1));
      }
      stages.push_back(b);
    }
  }

  if (mode == PipelineMode::kPerDevice) {
    Stage sync;
    sync.kind = StageKind::kSync;
    sync.device = 0;
    sync.microbatch = 0;
    sync.duration = costs.sync;
    for (int k = 1; k <= K; ++k) sync.deps.push_back(bwd_id(J, k));
    stages.push_back(sync);
  } else {
    for (int j = 1; j <= J; ++j) {
      Stage sync;
      sync.kind = StageKind::kSync;
      sync.device = 0;
      sync.microbatch = j;
      sync.duration = costs.sync;
      for (int k = 1; k <= K; ++k) sync.deps.push_back(bwd_id(j, k));
      const int sync_id = static_cast<int>(stages.size());
      stages.push_back(sync);
      for (int k = 1; k <= K; ++k) {
        Stage apply;
        apply.kind = StageKind::kApply;
        apply.device = k;
        apply.microbatch = j;
        switch (workaround) {
          case FlatWorkaround::kRetain: apply.duration = 0.0; break;
          case FlatWorkaround::kOffload: apply.duration = costs.offload; break;
          case FlatWorkaround::kRematerialize: apply.duration = costs.rematerialize; break;
        }
        apply.deps.push_back(sync_id);
        stages.push_back(apply);
      }
    }
  }

  schedule_stages(stages, K,
                  mode == PipelineMode::kFlat && workaround == FlatWorkaround::kRetain);
  return to_events(stages);
}

std::size_t DeviceState::dim() const {
  std::size_t d = 0;
  for (const Tensor& t : acc_w) d += t.size();
  for (const Tensor& t : acc_b) d += t.size();
  return d;
}

Tensor local_forward(DeviceState& device, int microbatch, const Tensor& incoming) {
  if (static_cast<int>(device.stored_inputs.size()) < microbatch) {
    device.stored_inputs.resize(microbatch);
  }
  device.stored_inputs[microbatch - 1] = incoming;  // CPU-copy role
  return forward(device.chunk, incoming, nullptr);
}

Tensor local_backward(DeviceState& device, int microbatch, const Tensor& incoming_grad,
                      double threshold) {
  if (static_cast<int>(device.stored_inputs.size()) < microbatch ||
      device.stored_inputs[microbatch - 1].size() == 0) {
    throw StateError("local_backward: no stored activation for microbatch " +
                     std::to_string(microbatch));
  }
  // Rematerialize activations with an extra forward pass over the stored
  // input copy.
  LayerTape tape;
  forward(device.chunk, device.stored_inputs[microbatch - 1], &tape);
  Tensor input_grad;
  backward_per_layer(device.chunk, tape, incoming_grad, nullptr,
                     device.id > 1 ? &input_grad : nullptr);

  const std::size_t batch = tape.batch;
  const int L = device.chunk.num_linear();
  std::vector<double> norms(batch, 0.0);
  for (int l = 1; l <= L; ++l) {
    const std::vector<double> sq = ghost_norms(tape.activation_in(device.chunk, l),
                                               tape.output_grad(l));
    for (std::size_t i = 0; i < batch; ++i) norms[i] += sq[i];
  }
  std::vector<double> scales(batch);
  for (std::size_t i = 0; i < batch; ++i) scales[i] = clip_scale(std::sqrt(norms[i]), threshold);
  for (int l = 1; l <= L; ++l) {
    fused_clipped_sum(tape.activation_in(device.chunk, l), tape.output_grad(l), scales,
                      device.acc_w[l - 1], device.acc_b[l - 1]);
  }
  return input_grad;
}

namespace {

Execution make_execution(Model& model, const PipelineConfig& config, std::uint64_t seed,
                         long step, std::span<const double> noise_std) {
  Execution ex;
  std::vector<Model> chunks = partition_model(model, config.linears_per_device);
  const Rng master(seed);
  for (int k = 1; k <= config.devices; ++k) {
    DeviceState dev;
    dev.id = k;
    dev.chunk = std::move(chunks[k - 1]);
    const int L = dev.chunk.num_linear();
    for (int l = 1; l <= L; ++l) {
      dev.acc_w.push_back(Tensor(dev.chunk.linear(l).w.shape));
      dev.acc_b.push_back(Tensor(dev.chunk.linear(l).b.shape));
    }
    // Noise joins the accumulator at initialization; addition commutes with
    // the per-microbatch sums, and this keeps the draw independent of J.
    if (noise_std[k - 1] > 0.0) {
      Rng noise_rng = master.derive(rng_role::kGradNoise, static_cast<std::uint64_t>(step),
                                    static_cast<std::uint64_t>(k));
      for (int l = 0; l < L; ++l) {
        for (double& v : dev.acc_w[l].data) v += noise_rng.gaussian(noise_std[k - 1]);
        for (double& v : dev.acc_b[l].data) v += noise_rng.gaussian(noise_std[k - 1]);
      }
      dev.noise_added = true;
    }
    ex.devices.push_back(std::move(dev));
  }
  ex.boundary_act.assign(config.devices + 1, {});
  ex.boundary_grad.assign(config.devices + 1, {});
  for (auto& v : ex.boundary_act) v.resize(config.microbatches);
  for (auto& v : ex.boundary_grad) v.resize(config.microbatches);
  ex.flat_scales.resize(config.microbatches);
  return ex;
}

PipelineResult run_pipeline(Model& model, const PipelineConfig& config, const Batch& minibatch,
                            std::uint64_t seed, long step, PipelineMode mode,
                            FlatWorkaround workaround, double flat_threshold) {
  config.validate(model, minibatch.size());
  const int K = config.devices;
  const int J = config.microbatches;
  const std::size_t mb_size = minibatch.size() / static_cast<std::size_t>(J);

  std::vector<double> noise_std(K, 0.0);
  if (config.sigma > 0.0) {
    for (int k = 0; k < K; ++k) {
      // Equal-budget plan from device-local data only: S = sqrt(K), gamma_k =
      // C_k, so s_k = sigma * sqrt(K) * C_k. Flat mode's sensitivity is the
      // flat threshold itself.
      noise_std[k] = mode == PipelineMode::kPerDevice
                         ? config.sigma * std::sqrt(static_cast<double>(K)) * config.thresholds[k]
                         : config.sigma * flat_threshold;
    }
  }

  Execution ex = make_execution(model, config, seed, step, noise_std);
  PipelineResult result;
  result.log.trace = build_schedule(config, mode, workaround);
  result.log.makespan = 0.0;
  for (const ScheduleEvent& ev : result.log.trace) {
    result.log.makespan = std::max(result.log.makespan, ev.end);
  }

  // Flat mode keeps each microbatch's tape and local norms until its sync.
  std::vector<std::vector<LayerTape>> retained(K);
  std::vector<std::vector<std::vector<double>>> local_sq(K);
  std::vector<std::vector<Tensor>> pending_input_grad(K);
  for (int k = 0; k < K; ++k) {
    retained[k].resize(J);
    local_sq[k].resize(J);
    pending_input_grad[k].resize(J);
  }

  for (const ScheduleEvent& ev : result.log.trace) {
    const int j = ev.microbatch;
    const int k = ev.device;
    switch (ev.kind) {
      case StageKind::kForward: {
        Tensor incoming;
        if (k == 1) {
          incoming = microbatch_slice(minibatch.x, (j - 1) * mb_size, mb_size);
        } else {
          incoming = ex.boundary_act[k - 1][j - 1];
        }
        Tensor out = local_forward(ex.devices[k - 1], j, incoming);
        if (k < K) {
          result.log.activation_msgs += 1;
        }
        ex.boundary_act[k][j - 1] = std::move(out);
        break;
      }
      case StageKind::kBackward: {
        Tensor incoming_grad;
        if (k == K) {
          // Loss gradients for this microbatch from the final activations.
          Batch mb;
          mb.loss = minibatch.loss;
          if (minibatch.loss == LossKind::kCrossEntropy) {
            mb.labels.assign(minibatch.labels.begin() + (j - 1) * mb_size,
                             minibatch.labels.begin() + j * mb_size);
          } else {
            mb.targets = microbatch_slice(minibatch.targets, (j - 1) * mb_size, mb_size);
          }
          incoming_grad = batch_loss(ex.boundary_act[K][j - 1], mb).dlogits;
        } else {
          incoming_grad = ex.boundary_grad[k][j - 1];
        }
        DeviceState& dev = ex.devices[k - 1];
        if (mode == PipelineMode::kPerDevice) {
          Tensor up = local_backward(dev, j, incoming_grad, config.thresholds[k - 1]);
          if (k > 1) {
            result.log.gradient_msgs += 1;
            ex.boundary_grad[k - 1][j - 1] = std::move(up);
          }
        } else {
          // Flat: compute the tape and local squared norms now; clipping
          // waits for the global norms at this microbatch's sync.
          LayerTape tape;
          forward(dev.chunk, dev.stored_inputs.at(j - 1), &tape);
          Tensor input_grad;
          backward_per_layer(dev.chunk, tape, incoming_grad, nullptr,
                             k > 1 ? &input_grad : nullptr);
          const int L = dev.chunk.num_linear();
          std::vector<double> sq(tape.batch, 0.0);
          for (int l = 1; l <= L; ++l) {
            const std::vector<double> g =
                ghost_norms(tape.activation_in(dev.chunk, l), tape.output_grad(l));
            for (std::size_t i = 0; i < sq.size(); ++i) sq[i] += g[i];
          }
          local_sq[k - 1][j - 1] = std::move(sq);
          retained[k - 1][j - 1] = std::move(tape);
          if (k > 1) {
            result.log.gradient_msgs += 1;
            ex.boundary_grad[k - 1][j - 1] = std::move(input_grad);
          }
        }
        // The stored input copy is no longer needed.
        dev.stored_inputs[j - 1] = Tensor{};
        break;
      }
      case StageKind::kSync: {
        result.log.syncs += 1;
        if (mode == PipelineMode::kFlat) {
          // Each device reports its per-example local norms.
          result.log.norm_msgs += K;
          std::vector<double> total(mb_size, 0.0);
          for (int d = 0; d < K; ++d) {
            for (std::size_t i = 0; i < mb_size; ++i) total[i] += local_sq[d][j - 1][i];
          }
          std::vector<double> scales(mb_size);
          for (std::size_t i = 0; i < mb_size; ++i) {
            scales[i] = clip_scale(std::sqrt(total[i]), flat_threshold);
          }
          ex.flat_scales[j - 1] = std::move(scales);
        }
        break;
      }
      case StageKind::kApply: {
        DeviceState& dev = ex.devices[k - 1];
        LayerTape& tape = retained[k - 1][j - 1];
        const int L = dev.chunk.num_linear();
        for (int l = 1; l <= L; ++l) {
          fused_clipped_sum(tape.activation_in(dev.chunk, l), tape.output_grad(l),
                            ex.flat_scales[j - 1], dev.acc_w[l - 1], dev.acc_b[l - 1]);
        }
        retained[k - 1][j - 1] = LayerTape{};
        local_sq[k - 1][j - 1].clear();
        break;
      }
    }
  }

  // Parameter update and write-back of the hosted chunks.
  const double scale = config.lr / static_cast<double>(config.nominal_batch);
  std::size_t linear_ordinal = 1;
  for (int k = 0; k < K; ++k) {
    DeviceState& dev = ex.devices[k];
    const int L = dev.chunk.num_linear();
    for (int l = 1; l <= L; ++l) {
      LinearLayer& hosted = dev.chunk.linear(l);
      for (std::size_t i = 0; i < hosted.w.size(); ++i) {
        hosted.w.data[i] -= scale * dev.acc_w[l - 1].data[i];
      }
      for (std::size_t i = 0; i < hosted.b.size(); ++i) {
        hosted.b.data[i] -= scale * dev.acc_b[l - 1].data[i];
      }
      model.linear(static_cast<int>(linear_ordinal)) = hosted;
      ++linear_ordinal;
    }
    result.device_sums_w.push_back(dev.acc_w);
    result.device_sums_b.push_back(dev.acc_b);
  }
  return result;
}

}  // namespace

PipelineResult pipeline_step(Model& model, const PipelineConfig& config, const Batch& minibatch,
                             std::uint64_t seed, long step) {
  return run_pipeline(model, config, minibatch, seed, step, PipelineMode::kPerDevice,
                      FlatWorkaround::kRetain, 0.0);
}

PipelineResult flat_in_pipeline_step(Model& model, const PipelineConfig& config,
                                     const Batch& minibatch, std::uint64_t seed, long step,
                                     double flat_threshold, FlatWorkaround workaround) {
  if (!(flat_threshold > 0.0)) throw ConfigError("flat threshold must be positive");
  return run_pipeline(model, config, minibatch, seed, step, PipelineMode::kFlat, workaround,
                      flat_threshold);
}

void write_commlog_csv(const CommLog& log, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw StateError("cannot open " + path);
  os << "event_index,virtual_time,device,microbatch,stage,message_type\n";
  long index = 0;
  for (const ScheduleEvent& ev : log.trace) {
    const char* stage = "";
    const char* msg = "none";
    switch (ev.kind) {
      case StageKind::kForward:
        stage = "forward";
        msg = "activation";
        break;
      case StageKind::kBackward:
        stage = "backward";
        msg = "gradient";
        break;
      case StageKind::kSync:
        stage = "sync";
        msg = ev.microbatch > 0 ? "norms" : "none";
        break;
      case StageKind::kApply:
        stage = "apply";
        break;
    }
    char line[160];
    std::snprintf(line, sizeof(line), "%ld,%.6f,%d,%d,%s,%s\n", index, ev.start, ev.device,
                  ev.microbatch, stage, msg);
    os << line;
    ++index;
  }
}

}  // namespace groupclip
