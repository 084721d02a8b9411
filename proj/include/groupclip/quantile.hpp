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

#include <cstddef>
#include <span>

namespace groupclip {

// Online threshold tracking for one clipping group: the threshold follows a
// target quantile of the group's per-example gradient norms via a geometric
// update driven by noisy clip counts. Pure value semantics; the count noise
// is drawn by the caller so randomness provenance stays in one place.
struct QuantileEstimator {
  double threshold = 1.0;   // current C, strictly positive
  double target = 0.5;      // q in (0,1)
  double lr = 0.3;          // eta
  double count_noise = 0.0; // sigma_b
  std::size_t nominal_batch = 1;

  // C * exp(-eta * ((count + noise)/B - q)); multiplicative, so the result
  // stays positive for any count.
  double updated(long count_below, double noise) const;
  void update(long count_below, double noise) { threshold = updated(count_below, noise); }
};

// Number of norms <= c, ties inclusive (a tied example counts as un-clipped).
long count_below(std::span<const double> norms, double c);

}  // namespace groupclip
