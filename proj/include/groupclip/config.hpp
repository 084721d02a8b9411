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

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "groupclip/optim.hpp"
#include "groupclip/synthetic.hpp"

namespace groupclip {

// Run configuration document. Grammar: '[section]' headers, 'key = value'
// pairs, '#' comments; a top-level 'version' key is required. See the README
// for the full key reference.
struct ConfigDoc {
  std::map<std::string, std::map<std::string, std::string>> sections;

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key) const;
  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key) const;
  double get_double_or(const std::string& section, const std::string& key, double fallback) const;
  long get_long_or(const std::string& section, const std::string& key, long fallback) const;
  bool get_bool_or(const std::string& section, const std::string& key, bool fallback) const;
};

ConfigDoc parse_config_doc(const std::string& text);

enum class TaskKind { kMixture, kDrift, kIdx };
enum class RunMode { kFlat, kFixedPerLayer, kAdaptivePerLayer, kNonPrivate };

RunMode parse_run_mode(const std::string& s);
const char* run_mode_name(RunMode mode);

// Schema-validated run configuration.
struct RunConfig {
  int version = 1;

  TaskKind task = TaskKind::kMixture;
  SyntheticSpec synth;
  std::string idx_images, idx_labels;

  std::vector<std::size_t> hidden = {32, 32};
  Activation activation = Activation::kTanh;
  double init_scale = 0.5;

  RunMode mode = RunMode::kAdaptivePerLayer;
  double clip_norm = 1.0;  // global C; per-layer runs use C/sqrt(K)
  double target_quantile = 0.5;
  double quantile_lr = 0.3;
  bool rescale_global = true;

  bool has_epsilon = false;
  double epsilon = 0.0;
  double delta = 1e-5;
  double budget_fraction = 0.01;  // r
  bool has_sigma = false;
  double sigma = 0.0;

  OptimizerConfig opt;
  long epochs = 0;  // when > 0, steps are derived as epochs * ceil(N / B)
  Allocation allocation = Allocation::kGlobal;

  std::uint64_t seed = 1;
  // Dataset generation seed, separate from the run seed so multi-seed
  // comparisons hold the task fixed; 0 means "follow the run seed".
  std::uint64_t data_seed = 0;
  bool timing = false;

  // Widths of the full model for a dataset with the given feature/class
  // counts: {in, hidden..., classes}.
  std::vector<std::size_t> widths(std::size_t in, std::size_t classes) const;
};

RunConfig run_config_from_doc(const ConfigDoc& doc);
RunConfig load_run_config(const std::string& path);

}  // namespace groupclip
