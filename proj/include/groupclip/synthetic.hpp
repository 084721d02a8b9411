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

#include "groupclip/optim.hpp"

namespace groupclip {

// Seeded Gaussian-mixture classification data. The drift variant hides the
// class signal in a few small-scale features under large-scale nuisance
// dimensions: the first layer must learn large weights to recover it, so its
// gradient norms start small (attenuated through a small-init stack) and
// grow as the upper layers organize -- the regime where fixed per-layer
// thresholds go stale.
struct SyntheticSpec {
  std::size_t n = 1000;
  std::size_t n_test = 0;
  std::size_t dim = 16;
  int classes = 3;
  double separation = 2.0;
  bool drift = false;
  double signal_scale = 0.05;   // drift: scale of the informative features
  double nuisance_scale = 4.0;  // drift: scale of the nuisance features
};

struct SyntheticData {
  Dataset train;
  Dataset test;
};

SyntheticData gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace groupclip
