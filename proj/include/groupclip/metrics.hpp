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

#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "groupclip/optim.hpp"

namespace groupclip {

// Per-group norm quantiles emitted per step.
struct NormHistogram {
  long step = 0;
  int group = 0;  // 1-based
  double q05 = 0, q25 = 0, q50 = 0, q75 = 0, q85 = 0, q95 = 0;
};

// Exact order-statistics quantile with linear interpolation between adjacent
// ranks (the median of 1..100 is 50.5).
double order_quantile(std::span<const double> values, double p);

NormHistogram norm_histogram(long step, int group, std::span<const double> norms);

// metrics.csv. Columns, in order:
//   step,epoch,loss,accuracy,c_1..c_K,clipfrac_1..c_K,noise_std_1..K,
//   wall_time_ms,peak_grad_bytes
// wall_time_ms is written as 0 unless timing is enabled: wall time is the
// one nondeterministic column and run artifacts must be byte-reproducible by
// default.
class MetricsWriter : public StepSink {
 public:
  MetricsWriter(const std::string& path, int groups, double steps_per_epoch, bool timing);
  void on_step(const StepRecord& rec) override;

 private:
  std::ofstream os_;
  int groups_;
  double steps_per_epoch_;
  bool timing_;
  double wall_ms_last_ = 0.0;
  double t_prev_ = 0.0;
};

// norms.csv: step,group,q05,q25,q50,q75,q85,q95 (one row per group per step).
class NormWriter {
 public:
  NormWriter(const std::string& path);
  void emit(long step, std::span<const std::vector<double>> group_norms);

 private:
  std::ofstream os_;
};

// Fans a StepRecord out to the metrics and norms writers.
class CsvSink : public StepSink {
 public:
  CsvSink(const std::string& out_dir, int groups, double steps_per_epoch, bool timing);
  void on_step(const StepRecord& rec) override;

 private:
  MetricsWriter metrics_;
  NormWriter norms_;
};

// In-memory sink for tests and report assembly.
class RecordingSink : public StepSink {
 public:
  void on_step(const StepRecord& rec) override { records.push_back(rec); }
  std::vector<StepRecord> records;
};

}  // namespace groupclip
