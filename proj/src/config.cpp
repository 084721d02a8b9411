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

#include "groupclip/config.hpp"

#include <fstream>
#include <sstream>

#include "groupclip/errors.hpp"

namespace groupclip {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

}  // namespace

bool ConfigDoc::has(const std::string& section, const std::string& key) const {
  auto it = sections.find(section);
  return it != sections.end() && it->second.count(key) > 0;
}

std::string ConfigDoc::get(const std::string& section, const std::string& key) const {
  if (!has(section, key)) {
    throw ConfigError("missing config key [" + section + "] " + key);
  }
  return sections.at(section).at(key);
}

std::string ConfigDoc::get_or(const std::string& section, const std::string& key,
                              const std::string& fallback) const {
  return has(section, key) ? get(section, key) : fallback;
}

double ConfigDoc::get_double(const std::string& section, const std::string& key) const {
  const std::string v = get(section, key);
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key [" + section + "] " + key + " = '" + v + "' is not a number");
  }
}

double ConfigDoc::get_double_or(const std::string& section, const std::string& key,
                                double fallback) const {
  return has(section, key) ? get_double(section, key) : fallback;
}

long ConfigDoc::get_long_or(const std::string& section, const std::string& key,
                            long fallback) const {
  if (!has(section, key)) return fallback;
  const double d = get_double(section, key);
  const long l = static_cast<long>(d);
  if (static_cast<double>(l) != d) {
    throw ConfigError("config key [" + section + "] " + key + " must be an integer");
  }
  return l;
}

bool ConfigDoc::get_bool_or(const std::string& section, const std::string& key,
                            bool fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get(section, key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key [" + section + "] " + key + " must be a boolean");
}

ConfigDoc parse_config_doc(const std::string& text) {
  ConfigDoc doc;
  std::string section;
  std::stringstream ss(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(ss, raw)) {
    ++lineno;
    std::string line = raw;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
      }
      section = trim(line.substr(1, line.size() - 2));
      doc.sections[section];
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    }
    doc.sections[section][key] = value;
  }
  return doc;
}

RunMode parse_run_mode(const std::string& s) {
  if (s == "flat") return RunMode::kFlat;
  if (s == "fixed-perlayer") return RunMode::kFixedPerLayer;
  if (s == "adaptive-perlayer") return RunMode::kAdaptivePerLayer;
  if (s == "nonprivate") return RunMode::kNonPrivate;
  throw ConfigError("unknown mode '" + s +
                    "' (expected flat, fixed-perlayer, adaptive-perlayer, nonprivate)");
}

const char* run_mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::kFlat: return "flat";
    case RunMode::kFixedPerLayer: return "fixed-perlayer";
    case RunMode::kAdaptivePerLayer: return "adaptive-perlayer";
    case RunMode::kNonPrivate: return "nonprivate";
  }
  return "?";
}

std::vector<std::size_t> RunConfig::widths(std::size_t in, std::size_t classes) const {
  std::vector<std::size_t> w;
  w.push_back(in);
  for (std::size_t h : hidden) w.push_back(h);
  w.push_back(classes);
  return w;
}

RunConfig run_config_from_doc(const ConfigDoc& doc) {
  RunConfig cfg;
  cfg.version = static_cast<int>(doc.get_long_or("", "version", -1));
  if (cfg.version != 1) {
    throw ConfigError("config requires 'version = 1' at top level");
  }

  const std::string task = doc.get_or("task", "kind", "mixture");
  if (task == "mixture") {
    cfg.task = TaskKind::kMixture;
  } else if (task == "drift") {
    cfg.task = TaskKind::kDrift;
  } else if (task == "idx") {
    cfg.task = TaskKind::kIdx;
  } else {
    throw ConfigError("unknown task kind '" + task + "'");
  }
  cfg.synth.n = static_cast<std::size_t>(doc.get_long_or("task", "n", 4000));
  cfg.synth.n_test = static_cast<std::size_t>(doc.get_long_or("task", "n_test", 1000));
  cfg.synth.dim = static_cast<std::size_t>(doc.get_long_or("task", "dim", 20));
  cfg.synth.classes = static_cast<int>(doc.get_long_or("task", "classes", 4));
  cfg.synth.separation = doc.get_double_or("task", "separation", 3.0);
  cfg.synth.drift = cfg.task == TaskKind::kDrift;
  cfg.synth.signal_scale = doc.get_double_or("task", "signal_scale", 0.05);
  cfg.synth.nuisance_scale = doc.get_double_or("task", "nuisance_scale", 4.0);
  cfg.idx_images = doc.get_or("task", "images", "");
  cfg.idx_labels = doc.get_or("task", "labels", "");
  if (cfg.task == TaskKind::kIdx && (cfg.idx_images.empty() || cfg.idx_labels.empty())) {
    throw ConfigError("idx task requires [task] images and labels paths");
  }

  if (doc.has("model", "hidden")) {
    cfg.hidden.clear();
    for (const std::string& s : split(doc.get("model", "hidden"), ',')) {
      const long v = std::stol(s);
      if (v < 1) throw ConfigError("model hidden widths must be positive");
      cfg.hidden.push_back(static_cast<std::size_t>(v));
    }
  }
  const std::string act = doc.get_or("model", "activation", "tanh");
  if (act == "tanh") {
    cfg.activation = Activation::kTanh;
  } else if (act == "relu") {
    cfg.activation = Activation::kRelu;
  } else {
    throw ConfigError("unknown activation '" + act + "'");
  }
  cfg.init_scale = doc.get_double_or("model", "init_scale", 0.5);

  cfg.mode = parse_run_mode(doc.get_or("policy", "mode", "adaptive-perlayer"));
  cfg.clip_norm = doc.get_double_or("policy", "clip_norm", 1.0);
  cfg.target_quantile = doc.get_double_or("policy", "target_quantile", 0.5);
  cfg.quantile_lr = doc.get_double_or("policy", "quantile_lr", 0.3);
  cfg.rescale_global = doc.get_bool_or("policy", "rescale_global", true);

  cfg.has_epsilon = doc.has("privacy", "epsilon");
  cfg.has_sigma = doc.has("privacy", "sigma");
  if (cfg.mode != RunMode::kNonPrivate) {
    if (cfg.has_epsilon == cfg.has_sigma) {
      throw ConfigError("exactly one of [privacy] epsilon or [privacy] sigma must be set");
    }
  }
  cfg.epsilon = doc.get_double_or("privacy", "epsilon", 0.0);
  cfg.delta = doc.get_double_or("privacy", "delta", 1e-5);
  cfg.budget_fraction = doc.get_double_or("privacy", "budget_fraction", 0.01);
  cfg.sigma = doc.get_double_or("privacy", "sigma", 0.0);

  const std::string rule = doc.get_or("optimizer", "rule", "sgd");
  if (rule == "sgd") {
    cfg.opt.rule = Rule::kSgd;
  } else if (rule == "adam") {
    cfg.opt.rule = Rule::kAdam;
  } else {
    throw ConfigError("unknown optimizer rule '" + rule + "'");
  }
  cfg.opt.momentum = doc.get_double_or("optimizer", "momentum", 0.0);
  cfg.opt.beta1 = doc.get_double_or("optimizer", "beta1", 0.9);
  cfg.opt.beta2 = doc.get_double_or("optimizer", "beta2", 0.999);
  cfg.opt.adam_eps = doc.get_double_or("optimizer", "adam_eps", 1e-8);
  cfg.opt.lr = doc.get_double_or("optimizer", "lr", 0.5);
  const std::string sched = doc.get_or("optimizer", "schedule", "constant");
  if (sched == "constant") {
    cfg.opt.schedule = Schedule::kConstant;
  } else if (sched == "linear-decay") {
    cfg.opt.schedule = Schedule::kLinearDecay;
  } else {
    throw ConfigError("unknown schedule '" + sched + "'");
  }
  const std::string batch = doc.get_or("optimizer", "batch", "fixed");
  if (batch == "fixed") {
    cfg.opt.batch_kind = BatchKind::kFixed;
  } else if (batch == "poisson") {
    cfg.opt.batch_kind = BatchKind::kPoisson;
  } else {
    throw ConfigError("unknown batch kind '" + batch + "'");
  }
  cfg.opt.batch_size = static_cast<std::size_t>(doc.get_long_or("optimizer", "batch_size", 250));
  cfg.opt.sampling_rate = doc.get_double_or("optimizer", "sampling_rate", 0.0);
  cfg.opt.steps = doc.get_long_or("optimizer", "steps", 0);
  cfg.epochs = doc.get_long_or("optimizer", "epochs", 0);
  if ((cfg.opt.steps == 0) == (cfg.epochs == 0)) {
    throw ConfigError("exactly one of [optimizer] steps or epochs must be set");
  }

  const std::string alloc = doc.get_or("run", "allocation", "global");
  if (alloc == "global") {
    cfg.allocation = Allocation::kGlobal;
  } else if (alloc == "equal-budget") {
    cfg.allocation = Allocation::kEqualBudget;
  } else if (alloc == "equal-snr") {
    cfg.allocation = Allocation::kEqualSnr;
  } else {
    throw ConfigError("unknown allocation '" + alloc + "'");
  }
  cfg.seed = static_cast<std::uint64_t>(doc.get_long_or("run", "seed", 1));
  cfg.data_seed = static_cast<std::uint64_t>(doc.get_long_or("task", "data_seed", 0));
  cfg.timing = doc.get_bool_or("run", "timing", false);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return run_config_from_doc(parse_config_doc(buf.str()));
}

}  // namespace groupclip
