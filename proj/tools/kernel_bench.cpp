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

// Serial vs OpenMP kernel benchmark. The parallel entry points must agree
// bitwise with the serial reference; this tool reports the speedups.

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "groupclip/kernels.hpp"
#include "groupclip/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using Clock = std::chrono::steady_clock;
using groupclip::Rng;
namespace kernels = groupclip::kernels;

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm
  const auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r) fn();
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void fill(std::vector<double>& v, Rng& rng) {
  for (double& x : v) x = rng.gaussian();
}

}  // namespace

int main() {
  const std::size_t B = 256, in = 512, out = 512;
  Rng rng(42);

  std::vector<double> x(B * in), w(out * in), b(out), y(B * out), e(B * out), ein(B * in);
  std::vector<double> gw(out * in), gb(out), wsq(B), bsq(B), scale(B, 0.5);
  fill(x, rng);
  fill(w, rng);
  fill(b, rng);
  fill(e, rng);

  struct Case {
    const char* name;
    std::function<void()> serial;
    std::function<void()> parallel;
  };
  const Case cases[] = {
      {"linear_forward",
       [&] { kernels::serial::linear_forward(x.data(), w.data(), b.data(), y.data(), B, in, out); },
       [&] { kernels::linear_forward(x.data(), w.data(), b.data(), y.data(), B, in, out); }},
      {"backward_input",
       [&] { kernels::serial::linear_backward_input(e.data(), w.data(), ein.data(), B, in, out); },
       [&] { kernels::linear_backward_input(e.data(), w.data(), ein.data(), B, in, out); }},
      {"scaled_weight_grad",
       [&] {
         kernels::serial::scaled_weight_grad(x.data(), e.data(), scale.data(), gw.data(),
                                             gb.data(), B, in, out);
       },
       [&] {
         kernels::scaled_weight_grad(x.data(), e.data(), scale.data(), gw.data(), gb.data(), B,
                                     in, out);
       }},
      {"ghost_norms_2d",
       [&] { kernels::serial::ghost_norms_2d(x.data(), e.data(), wsq.data(), bsq.data(), B, in, out); },
       [&] { kernels::ghost_norms_2d(x.data(), e.data(), wsq.data(), bsq.data(), B, in, out); }},
  };

#ifdef _OPENMP
  std::printf("threads: %d\n", omp_get_max_threads());
#else
  std::printf("threads: 1 (OpenMP disabled)\n");
#endif
  std::printf("B=%zu in=%zu out=%zu\n", B, in, out);
  std::printf("%-20s %12s %12s %9s\n", "kernel", "serial ms", "openmp ms", "speedup");
  for (const Case& c : cases) {
    const double ts = time_ms(c.serial, 10);
    const double tp = time_ms(c.parallel, 10);
    std::printf("%-20s %12.3f %12.3f %8.2fx\n", c.name, ts, tp, ts / tp);
  }
  return 0;
}
