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

namespace groupclip {

// Deterministic PRNG built on SplitMix64. std::normal_distribution is
// implementation-defined, so Gaussians are produced here via Box-Muller:
// every Gaussian consumes exactly two raw draws and nothing is cached,
// which keeps draw accounting exact and streams bit-reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1).
  double uniform();

  // Standard normal; two raw draws, no spare caching.
  double gaussian();
  double gaussian(double stddev) { return stddev == 0.0 ? 0.0 : stddev * gaussian(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Independent substream keyed on (root seed, a, b, c). The derivation is
  // pure: it ignores how much this stream has been consumed, so callers can
  // address noise draws by (step, role, group) and replay them exactly.
  Rng derive(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const;

  std::uint64_t root_seed() const { return seed_; }
  std::uint64_t state() const { return state_; }
  void restore(std::uint64_t state) { state_ = state; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

// Stream roles used to key derived substreams. Fixed constants are part of
// the reproducibility contract (checkpoints replay against them).
namespace rng_role {
inline constexpr std::uint64_t kInit = 0x1;
inline constexpr std::uint64_t kBatch = 0x2;
inline constexpr std::uint64_t kGradNoise = 0x3;
inline constexpr std::uint64_t kCountNoise = 0x4;
inline constexpr std::uint64_t kData = 0x5;
}  // namespace rng_role

}  // namespace groupclip
