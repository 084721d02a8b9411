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

#include "groupclip/quantile.hpp"

#include <cmath>

#include "groupclip/errors.hpp"

namespace groupclip {

double QuantileEstimator::updated(long count, double noise) const {
  // Poisson batches can exceed the nominal B, so only negative counts are
  // rejected; the fraction is always taken against the nominal batch size.
  if (count < 0) throw InputError("negative clip count");
  const double fraction = (static_cast<double>(count) + noise) / static_cast<double>(nominal_batch);
  return threshold * std::exp(-lr * (fraction - target));
}

long count_below(std::span<const double> norms, double c) {
  if (!(c > 0.0)) throw InputError("count_below: threshold must be positive");
  long n = 0;
  for (double v : norms) {
    if (v <= c) ++n;
  }
  return n;
}

}  // namespace groupclip
