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

#include "groupclip/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "groupclip/errors.hpp"
#include "groupclip/idx.hpp"
#include "groupclip/kernels.hpp"

namespace groupclip {
namespace {

Dataset dataset_from_idx(const std::string& images_path, const std::string& labels_path) {
  Tensor images = read_idx(images_path);
  Tensor labels = read_idx(labels_path);
  if (images.rank() != 3) throw FormatError("idx images must be rank 3");
  if (labels.rank() != 1) throw FormatError("idx labels must be rank 1");
  if (images.dim(0) != labels.dim(0)) {
    throw FormatError("idx image/label counts differ: " + std::to_string(images.dim(0)) + " vs " +
                      std::to_string(labels.dim(0)));
  }
  Dataset data;
  data.loss = LossKind::kCrossEntropy;
  const std::size_t n = images.dim(0);
  const std::size_t features = images.dim(1) * images.dim(2);
  data.x = Tensor({n, features});
  data.x.data = std::move(images.data);
  data.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) data.labels[i] = static_cast<int>(labels.data[i]);
  return data;
}

int class_count(const Dataset& data) {
  int c = 0;
  for (int y : data.labels) c = std::max(c, y + 1);
  return std::max(c, 2);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

int env_thread_cap() {
  const char* env = std::getenv("GROUPCLIP_THREADS");
  if (!env || !*env) return 0;
  const int v = std::atoi(env);
  return v > 0 ? v : 0;
}

ResolvedRun prepare_run(const RunConfig& cfg) {
  ResolvedRun run;

  switch (cfg.task) {
    case TaskKind::kMixture:
    case TaskKind::kDrift: {
      SyntheticData data =
          gen_synthetic(cfg.synth, cfg.data_seed != 0 ? cfg.data_seed : cfg.seed);
      run.train = std::move(data.train);
      run.test = std::move(data.test);
      break;
    }
    case TaskKind::kIdx:
      run.train = dataset_from_idx(cfg.idx_images, cfg.idx_labels);
      break;
  }
  const std::size_t n = run.train.size();
  const std::size_t classes = static_cast<std::size_t>(class_count(run.train));
  const std::size_t features = run.train.x.shape.back();

  Model model = make_mlp(cfg.widths(features, classes), cfg.activation, cfg.init_scale,
                         Rng(cfg.seed));
  const int K = model.num_linear();
  Grouping grouping = Grouping::per_layer(K);

  OptimizerConfig opt = cfg.opt;
  const std::size_t nominal = opt.nominal_batch(n);
  run.steps_per_epoch = (n + nominal - 1) / nominal;
  if (opt.steps == 0) opt.steps = cfg.epochs * static_cast<long>(run.steps_per_epoch);

  // Thresholds: flat clipping takes the global norm C; the per-layer modes
  // take the equivalent split C / sqrt(K).
  const double per_layer_c = cfg.clip_norm / std::sqrt(static_cast<double>(K));
  ClipPolicy policy;
  switch (cfg.mode) {
    case RunMode::kNonPrivate:
      policy = ClipPolicy::flat(kNoClipping);
      break;
    case RunMode::kFlat:
      policy = ClipPolicy::flat(cfg.clip_norm);
      break;
    case RunMode::kFixedPerLayer:
      policy = ClipPolicy::fixed_per_group(std::vector<double>(K, per_layer_c));
      break;
    case RunMode::kAdaptivePerLayer:
      policy = ClipPolicy::adaptive(std::vector<double>(K, per_layer_c), cfg.target_quantile,
                                    cfg.quantile_lr, 0.0);
      if (cfg.rescale_global) policy.rescale_global = cfg.clip_norm;
      break;
  }

  TrainOptions options;
  options.opt = opt;
  options.allocation = cfg.allocation;
  if (cfg.mode == RunMode::kNonPrivate) {
    options.noise_enabled = false;
  } else {
    // Accounting rate: Poisson uses the configured rate; fixed-size batches
    // are accounted at B/N (the standard approximation).
    const double rho = opt.batch_kind == BatchKind::kPoisson
                           ? opt.sampling_rate
                           : static_cast<double>(nominal) / static_cast<double>(n);
    const double fraction = cfg.mode == RunMode::kAdaptivePerLayer ? cfg.budget_fraction : 0.0;
    if (cfg.has_sigma) {
      PrivacySpec spec;
      spec.delta = cfg.delta;
      spec.rho = rho;
      spec.steps = opt.steps;
      spec.fraction = fraction;
      spec.sigma = cfg.sigma;
      if (fraction > 0.0) {
        spec.sigma_b = sigma_b_for_fraction(fraction, spec.sigma, K);
        spec.sigma_new = split_budget(spec.sigma, spec.sigma_b, K);
      } else {
        spec.sigma_new = spec.sigma;
      }
      options.privacy = spec;
    } else {
      options.privacy = resolve_privacy(cfg.epsilon, cfg.delta, rho, opt.steps, fraction, K);
    }
    if (cfg.mode == RunMode::kAdaptivePerLayer) {
      policy.count_noise = options.privacy.sigma_b;
    }
  }

  run.state = make_train_state(std::move(model), std::move(grouping), std::move(policy),
                               cfg.seed, nominal);
  run.options = options;
  return run;
}

TrainOutcome train_once(const RunConfig& cfg, StepSink* sink) {
  ResolvedRun run = prepare_run(cfg);
  train(run.state, run.train, run.options, sink);
  TrainOutcome out;
  out.privacy = run.options.privacy;
  out.steps = run.options.opt.steps;
  out.train_accuracy = evaluate_accuracy(run.state.model, run.train);
  out.final_loss = evaluate_loss(run.state.model, run.train);
  if (run.test.size() > 0) out.test_accuracy = evaluate_accuracy(run.state.model, run.test);
  return out;
}

TrainOutcome run_train(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  ResolvedRun run = prepare_run(cfg);
  CsvSink sink(out_dir, run.state.grouping.num_groups(),
               static_cast<double>(run.steps_per_epoch), cfg.timing);
  train(run.state, run.train, run.options, &sink);
  save_checkpoint(run.state, out_dir + "/checkpoint.bin");
  TrainOutcome out;
  out.privacy = run.options.privacy;
  out.steps = run.options.opt.steps;
  out.train_accuracy = evaluate_accuracy(run.state.model, run.train);
  out.final_loss = evaluate_loss(run.state.model, run.train);
  if (run.test.size() > 0) out.test_accuracy = evaluate_accuracy(run.state.model, run.test);
  return out;
}

CalibrateReport run_calibrate(double epsilon, double delta, double rho, long steps,
                              int num_groups, double fraction) {
  CalibrateReport rep;
  rep.sigma = calibrate_sigma(epsilon, delta, rho, steps);
  rep.fraction = fraction;
  if (fraction > 0.0) {
    rep.sigma_b = sigma_b_for_fraction(fraction, rep.sigma, num_groups);
    rep.sigma_new = split_budget(rep.sigma, rep.sigma_b, num_groups);
  } else {
    rep.sigma_b = 0.0;
    rep.sigma_new = rep.sigma;
  }
  rep.epsilon_check = eps_for_sigma(rep.sigma, rho, steps, delta);
  return rep;
}

const char* bench_mode_name(BenchMode mode) {
  switch (mode) {
    case BenchMode::kNonPrivate: return "nonprivate";
    case BenchMode::kNaiveFlat: return "naive-flat";
    case BenchMode::kTwoPhaseFlat: return "twophase-flat";
    case BenchMode::kFusedPerLayer: return "fused-perlayer";
  }
  return "?";
}

const BenchRow& BenchReport::row(BenchMode mode) const {
  for (const BenchRow& r : rows) {
    if (r.mode == mode) return r;
  }
  throw StateError("bench mode missing from report");
}

namespace {

// Opacus-style flat clipping: one batched backward, then every per-example
// gradient materialized from the cached (a, e) pairs before norms, scaling
// and summation. Peak memory is B * d by construction.
void naive_flat_region(const Model& model, LayerTape& tape, const Tensor& dlogits,
                       double threshold) {
  backward_per_layer(model, tape, dlogits, nullptr);
  const int K = model.num_linear();
  const std::size_t B = tape.batch;

  std::size_t d = 0;
  for (int k = 1; k <= K; ++k) d += model.linear(k).param_count();
  std::vector<double> grads(B * d);
  TrackedBytes track(MemPool::kParamGrad, grads.size() * sizeof(double));

  // Materialize per-example gradients.
  std::vector<std::size_t> layer_offset(K);
  {
    std::size_t off = 0;
    for (int k = 1; k <= K; ++k) {
      layer_offset[k - 1] = off;
      off += model.linear(k).param_count();
    }
  }
#pragma omp parallel for schedule(static)
  for (long i = 0; i < static_cast<long>(B); ++i) {
    for (int k = 1; k <= K; ++k) {
      const LinearLayer& lin = model.linear(k);
      const Tensor& a = tape.activation_in(model, k);
      const Tensor& e = tape.output_grad(k);
      const std::size_t in = lin.fan_in();
      const std::size_t out = lin.fan_out();
      const std::size_t seq = tape.sequence ? tape.seq_len : 1;
      double* gw = grads.data() + i * d + layer_offset[k - 1];
      double* gb = gw + out * in;
      kernels::serial::scaled_weight_grad(a.data.data() + i * seq * in,
                                          e.data.data() + i * seq * out, nullptr, gw, gb, seq,
                                          in, out);
    }
  }

  // Norms, scales, weighted sum.
  std::vector<double> sum(d, 0.0);
  TrackedBytes track_sum(MemPool::kParamGrad, sum.size() * sizeof(double));
  for (std::size_t i = 0; i < B; ++i) {
    double sq = 0.0;
    const double* g = grads.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) sq += g[j] * g[j];
    const double s = clip_scale(std::sqrt(sq), threshold);
    for (std::size_t j = 0; j < d; ++j) sum[j] += s * g[j];
  }
}

void nonprivate_region(const Model& model, LayerTape& tape, const Tensor& dlogits,
                       std::vector<Tensor>& gw, std::vector<Tensor>& gb) {
  backward_per_layer(model, tape, dlogits, [&](int k, const Tensor& a, const Tensor& e) {
    kernels::scaled_weight_grad(a.data.data(), e.data.data(), nullptr, gw[k - 1].data.data(),
                                gb[k - 1].data.data(),
                                tape.sequence ? tape.batch * tape.seq_len : tape.batch,
                                a.shape.back(), e.shape.back());
  });
}

}  // namespace

BenchReport run_bench(std::span<const std::size_t> widths, std::size_t batch, int warmup,
                      int measured, std::uint64_t seed) {
  if (measured < 1) throw InputError("run_bench: need at least one measured step");
  BenchReport report;
  report.batch = batch;
  report.widths.assign(widths.begin(), widths.end());

  const Rng root(seed);
  Model model = make_mlp(widths, Activation::kTanh, 0.5, root);
  const int K = model.num_linear();
  const Grouping grouping = Grouping::per_layer(K);
  const double flat_c = 1.0;
  const std::vector<double> per_layer_c(K, flat_c / std::sqrt(static_cast<double>(K)));

  Batch data;
  data.loss = LossKind::kCrossEntropy;
  data.x = Tensor({batch, widths.front()});
  Rng data_rng = root.derive(rng_role::kData, 7);
  for (double& v : data.x.data) v = data_rng.gaussian();
  data.labels.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    data.labels[i] = static_cast<int>(data_rng.below(widths.back()));
  }

  std::vector<std::vector<double>> times(4);
  std::vector<std::size_t> peak_grad(4, 0), peak_backprop(4, 0);

  // Modes are interleaved so clock-speed drift and neighbor load hit every
  // mode equally. The cache-thrashing naive mode runs first in each round and
  // the three light modes rotate behind it, so its pollution is spread evenly.
  for (int step = 0; step < warmup + measured; ++step) {
    const int rot = step % 3;
    const BenchMode light[3] = {BenchMode::kNonPrivate, BenchMode::kTwoPhaseFlat,
                                BenchMode::kFusedPerLayer};
    const BenchMode round_order[4] = {BenchMode::kNaiveFlat, light[rot],
                                      light[(rot + 1) % 3], light[(rot + 2) % 3]};
    for (const BenchMode mode : round_order) {
      const int m = mode == BenchMode::kNonPrivate     ? 0
                    : mode == BenchMode::kNaiveFlat    ? 1
                    : mode == BenchMode::kTwoPhaseFlat ? 2
                                                       : 3;
      LayerTape tape;
      const Tensor logits = forward(model, data.x, &tape);
      const LossResult loss = batch_loss(logits, data);
      gradmem::reset();

      const auto t0 = std::chrono::steady_clock::now();
      switch (mode) {
        case BenchMode::kNonPrivate: {
          std::vector<Tensor> gw, gb;
          for (int k = 1; k <= K; ++k) {
            gw.push_back(Tensor(model.linear(k).w.shape));
            gb.push_back(Tensor(model.linear(k).b.shape));
          }
          TrackedBytes track(MemPool::kParamGrad, model.param_count() * sizeof(double));
          nonprivate_region(model, tape, loss.dlogits, gw, gb);
          break;
        }
        case BenchMode::kNaiveFlat:
          naive_flat_region(model, tape, loss.dlogits, flat_c);
          break;
        case BenchMode::kTwoPhaseFlat: {
          backward_per_layer(model, tape, loss.dlogits, nullptr);
          auto states = flat_two_phase(model, tape, grouping, flat_c);
          break;
        }
        case BenchMode::kFusedPerLayer: {
          auto states = clipped_backward(model, tape, loss.dlogits, grouping, per_layer_c);
          break;
        }
      }
      const auto t1 = std::chrono::steady_clock::now();
      if (step >= warmup) {
        times[m].push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        peak_grad[m] = std::max(peak_grad[m], gradmem::peak(MemPool::kParamGrad));
        peak_backprop[m] = std::max(peak_backprop[m], gradmem::peak(MemPool::kBackprop));
      }
    }
  }
  const BenchMode by_index[4] = {BenchMode::kNonPrivate, BenchMode::kNaiveFlat,
                                 BenchMode::kTwoPhaseFlat, BenchMode::kFusedPerLayer};
  for (int m = 0; m < 4; ++m) {
    BenchRow row;
    row.mode = by_index[m];
    row.median_step_ms = median(times[m]);
    row.peak_grad_bytes = peak_grad[m];
    row.peak_backprop_bytes = peak_backprop[m];
    report.rows.push_back(row);
  }
  return report;
}

const CompareCell& CompareReport::cell(RunMode mode) const {
  for (const CompareCell& c : cells) {
    if (c.mode == mode) return c;
  }
  throw StateError("mode missing from compare report");
}

CompareReport run_compare(const RunConfig& base, std::span<const std::uint64_t> seeds,
                          std::span<const RunMode> modes) {
  struct Job {
    std::size_t mode_idx, seed_idx;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < modes.size(); ++m) {
    for (std::size_t s = 0; s < seeds.size(); ++s) jobs.push_back({m, s});
  }
  std::vector<std::vector<double>> acc(modes.size(), std::vector<double>(seeds.size(), 0.0));

  auto work = [&](const Job& job) {
    RunConfig cfg = base;
    cfg.mode = modes[job.mode_idx];
    cfg.seed = seeds[job.seed_idx];
    acc[job.mode_idx][job.seed_idx] = train_once(cfg, nullptr).test_accuracy;
  };

  const int cap = env_thread_cap();
  if (cap > 1) {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int workers = std::min<int>(cap, static_cast<int>(jobs.size()));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&]() {
        for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
          work(jobs[i]);
        }
      });
    }
    for (std::thread& t : pool) t.join();
  } else {
    for (const Job& job : jobs) work(job);
  }

  CompareReport report;
  for (std::size_t m = 0; m < modes.size(); ++m) {
    CompareCell cell;
    cell.mode = modes[m];
    cell.test_accuracy = acc[m];
    double mean = 0.0;
    for (double a : acc[m]) mean += a;
    mean /= static_cast<double>(acc[m].size());
    double var = 0.0;
    for (double a : acc[m]) var += (a - mean) * (a - mean);
    cell.mean = mean;
    cell.stddev = acc[m].size() > 1 ? std::sqrt(var / static_cast<double>(acc[m].size() - 1)) : 0.0;
    report.cells.push_back(std::move(cell));
  }
  return report;
}

PipelineSimReport run_pipeline_sim(const PipelineSimParams& params,
                                   const std::optional<std::string>& out_dir) {
  PipelineSimReport report;

  const Rng root(params.seed);
  Model model = make_mlp(params.widths, Activation::kTanh, 0.5, root);
  const int L = model.num_linear();

  PipelineConfig pc;
  pc.devices = params.devices;
  pc.linears_per_device = params.linears_per_device;
  if (pc.linears_per_device.empty()) {
    if (L % params.devices != 0) {
      throw ConfigError("pipeline-sim: " + std::to_string(L) + " Linear layers do not split over " +
                        std::to_string(params.devices) + " devices");
    }
    pc.linears_per_device.assign(params.devices, L / params.devices);
  }
  pc.microbatches = params.microbatches;
  pc.thresholds.assign(params.devices,
                       params.clip_norm / std::sqrt(static_cast<double>(params.devices)));
  pc.sigma = params.sigma;
  pc.lr = 0.1;
  pc.nominal_batch = params.batch;

  // One synthetic batch shared by all modes.
  Batch batch;
  batch.loss = LossKind::kCrossEntropy;
  batch.x = Tensor({params.batch, params.widths.front()});
  Rng data_rng = root.derive(rng_role::kData, 3);
  for (double& v : batch.x.data) v = data_rng.gaussian();
  batch.labels.resize(params.batch);
  for (std::size_t i = 0; i < params.batch; ++i) {
    batch.labels[i] = static_cast<int>(data_rng.below(params.widths.back()));
  }

  // Per-device run plus single-device reference with matched draws.
  {
    Model pipe_model = model;
    PipelineResult res = pipeline_step(pipe_model, pc, batch, params.seed, 0);
    report.per_device = std::move(res.log);

    Dataset ref_data;
    ref_data.loss = batch.loss;
    ref_data.x = batch.x;
    ref_data.labels = batch.labels;
    TrainState ref = make_train_state(model, pc.grouping(),
                                      ClipPolicy::fixed_per_group(pc.thresholds), params.seed,
                                      params.batch);
    TrainOptions opts;
    opts.opt.rule = Rule::kSgd;
    opts.opt.lr = pc.lr;
    opts.opt.batch_kind = BatchKind::kFixed;
    opts.opt.batch_size = params.batch;
    opts.opt.steps = 1;
    opts.allocation = Allocation::kEqualBudget;
    opts.privacy.sigma_new = params.sigma;
    std::vector<std::size_t> idx(params.batch);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    dp_step(ref, ref_data, idx, opts);

    double diff = 0.0;
    for (int k = 1; k <= L; ++k) {
      diff = std::max(diff, max_abs_diff(pipe_model.linear(k).w, ref.model.linear(k).w));
      diff = std::max(diff, max_abs_diff(pipe_model.linear(k).b, ref.model.linear(k).b));
    }
    report.per_device_vs_reference = diff;
  }

  const double flat_c = params.clip_norm;
  {
    Model m2 = model;
    report.flat_retain =
        flat_in_pipeline_step(m2, pc, batch, params.seed, 0, flat_c, FlatWorkaround::kRetain).log;
  }
  {
    Model m2 = model;
    report.flat_offload =
        flat_in_pipeline_step(m2, pc, batch, params.seed, 0, flat_c, FlatWorkaround::kOffload).log;
  }
  {
    Model m2 = model;
    report.flat_rematerialize =
        flat_in_pipeline_step(m2, pc, batch, params.seed, 0, flat_c,
                              FlatWorkaround::kRematerialize)
            .log;
  }

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_commlog_csv(report.per_device, *out_dir + "/commlog.csv");
    write_commlog_csv(report.flat_retain, *out_dir + "/commlog_flat_retain.csv");
    write_commlog_csv(report.flat_offload, *out_dir + "/commlog_flat_offload.csv");
    write_commlog_csv(report.flat_rematerialize, *out_dir + "/commlog_flat_rematerialize.csv");
  }
  return report;
}

}  // namespace groupclip
