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

#include <optional>
#include <string>
#include <vector>

#include "groupclip/config.hpp"
#include "groupclip/metrics.hpp"
#include "groupclip/pipeline.hpp"

namespace groupclip {

// Orchestration shared by the CLI and the acceptance suite.

struct ResolvedRun {
  Dataset train;
  Dataset test;  // empty when the task has no test split
  TrainState state;
  TrainOptions options;
  std::size_t steps_per_epoch = 0;
};

// Builds data, model, policy, and resolved privacy parameters for a config.
ResolvedRun prepare_run(const RunConfig& cfg);

struct TrainOutcome {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double final_loss = 0.0;
  PrivacySpec privacy;
  long steps = 0;
};

// Trains in-memory; sink may be null.
TrainOutcome train_once(const RunConfig& cfg, StepSink* sink);

// Full `train` subcommand: metrics.csv, norms.csv, checkpoint.bin under
// out_dir.
TrainOutcome run_train(const RunConfig& cfg, const std::string& out_dir);

struct CalibrateReport {
  double sigma = 0.0;
  double sigma_b = 0.0;
  double sigma_new = 0.0;
  double fraction = 0.0;
  double epsilon_check = 0.0;  // accountant epsilon at the returned sigma
};

CalibrateReport run_calibrate(double epsilon, double delta, double rho, long steps,
                              int num_groups, double fraction);

enum class BenchMode { kNonPrivate, kNaiveFlat, kTwoPhaseFlat, kFusedPerLayer };
const char* bench_mode_name(BenchMode mode);

struct BenchRow {
  BenchMode mode = BenchMode::kNonPrivate;
  double median_step_ms = 0.0;
  std::size_t peak_grad_bytes = 0;      // parameter-gradient pool
  std::size_t peak_backprop_bytes = 0;  // activation-gradient workspace
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::size_t batch = 0;
  std::vector<std::size_t> widths;
  const BenchRow& row(BenchMode mode) const;
};

// Clipping-mode benchmark: times the backward+clip region only (forward and
// update excluded), over `measured` steps after `warmup` steps, reporting the
// median and the allocation-hook peaks.
BenchReport run_bench(std::span<const std::size_t> widths, std::size_t batch, int warmup,
                      int measured, std::uint64_t seed);

struct CompareCell {
  RunMode mode;
  std::vector<double> test_accuracy;  // per seed
  double mean = 0.0;
  double stddev = 0.0;
};

struct CompareReport {
  std::vector<CompareCell> cells;
  const CompareCell& cell(RunMode mode) const;
};

// Multi-seed accuracy comparison across clipping modes at matched privacy.
CompareReport run_compare(const RunConfig& base, std::span<const std::uint64_t> seeds,
                          std::span<const RunMode> modes);

struct PipelineSimReport {
  CommLog per_device;
  CommLog flat_retain;
  CommLog flat_offload;
  CommLog flat_rematerialize;
  double per_device_vs_reference = 0.0;  // max |update diff| against dp_step
};

struct PipelineSimParams {
  int devices = 4;
  int microbatches = 8;
  std::size_t batch = 32;
  std::vector<std::size_t> widths = {16, 16, 16, 16, 4};
  std::vector<int> linears_per_device;  // default: one Linear per device
  double sigma = 0.5;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
};

PipelineSimReport run_pipeline_sim(const PipelineSimParams& params,
                                   const std::optional<std::string>& out_dir);

// Worker cap from GROUPCLIP_THREADS (0 = unset).
int env_thread_cap();

}  // namespace groupclip
