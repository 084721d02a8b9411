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

#include "groupclip/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "groupclip/errors.hpp"

namespace groupclip {
namespace {

void append_num(std::string& line, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  line += buf;
}

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

double order_quantile(std::span<const double> values, double p) {
  if (values.empty()) throw InputError("order_quantile: empty sample");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.size() == 1) return sorted[0];
  const double h = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

NormHistogram norm_histogram(long step, int group, std::span<const double> norms) {
  if (norms.empty()) throw InputError("norm_histogram: empty norms");
  NormHistogram h;
  h.step = step;
  h.group = group;
  h.q05 = order_quantile(norms, 0.05);
  h.q25 = order_quantile(norms, 0.25);
  h.q50 = order_quantile(norms, 0.50);
  h.q75 = order_quantile(norms, 0.75);
  h.q85 = order_quantile(norms, 0.85);
  h.q95 = order_quantile(norms, 0.95);
  return h;
}

MetricsWriter::MetricsWriter(const std::string& path, int groups, double steps_per_epoch,
                             bool timing)
    : os_(path, std::ios::trunc), groups_(groups), steps_per_epoch_(steps_per_epoch),
      timing_(timing) {
  if (!os_) throw StateError("cannot open " + path);
  std::string header = "step,epoch,loss,accuracy";
  for (int g = 1; g <= groups_; ++g) header += ",c_" + std::to_string(g);
  for (int g = 1; g <= groups_; ++g) header += ",clipfrac_" + std::to_string(g);
  for (int g = 1; g <= groups_; ++g) header += ",noise_std_" + std::to_string(g);
  header += ",wall_time_ms,peak_grad_bytes\n";
  os_ << header;
  t_prev_ = now_ms();
}

void MetricsWriter::on_step(const StepRecord& rec) {
  if (timing_) {
    const double t = now_ms();
    wall_ms_last_ = t - t_prev_;
    t_prev_ = t;
  }
  std::string line;
  line += std::to_string(rec.step);
  line += ",";
  append_num(line, steps_per_epoch_ > 0 ? static_cast<double>(rec.step) / steps_per_epoch_ : 0.0);
  line += ",";
  append_num(line, rec.loss);
  line += ",";
  append_num(line, rec.accuracy);
  for (int g = 0; g < groups_; ++g) {
    line += ",";
    append_num(line, g < static_cast<int>(rec.thresholds.size()) ? rec.thresholds[g] : 0.0);
  }
  for (int g = 0; g < groups_; ++g) {
    line += ",";
    append_num(line, g < static_cast<int>(rec.clipped_fraction.size()) ? rec.clipped_fraction[g] : 0.0);
  }
  for (int g = 0; g < groups_; ++g) {
    line += ",";
    append_num(line, g < static_cast<int>(rec.noise_std.size()) ? rec.noise_std[g] : 0.0);
  }
  line += ",";
  append_num(line, timing_ ? wall_ms_last_ : 0.0);
  line += "," + std::to_string(rec.peak_grad_bytes) + "\n";
  os_ << line;
}

NormWriter::NormWriter(const std::string& path) : os_(path, std::ios::trunc) {
  if (!os_) throw StateError("cannot open " + path);
  os_ << "step,group,q05,q25,q50,q75,q85,q95\n";
}

void NormWriter::emit(long step, std::span<const std::vector<double>> group_norms) {
  for (std::size_t g = 0; g < group_norms.size(); ++g) {
    if (group_norms[g].empty()) continue;
    const NormHistogram h = norm_histogram(step, static_cast<int>(g) + 1, group_norms[g]);
    std::string line = std::to_string(h.step) + "," + std::to_string(h.group);
    for (double v : {h.q05, h.q25, h.q50, h.q75, h.q85, h.q95}) {
      line += ",";
      append_num(line, v);
    }
    line += "\n";
    os_ << line;
  }
}

CsvSink::CsvSink(const std::string& out_dir, int groups, double steps_per_epoch, bool timing)
    : metrics_(out_dir + "/metrics.csv", groups, steps_per_epoch, timing),
      norms_(out_dir + "/norms.csv") {}

void CsvSink::on_step(const StepRecord& rec) {
  metrics_.on_step(rec);
  norms_.emit(rec.step, rec.group_norms);
}

}  // namespace groupclip
