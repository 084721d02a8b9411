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

namespace groupclip::kernels {

// Batched dense kernels. The top-level entry points parallelize with OpenMP
// over independent output elements only: every output element is reduced
// serially in a fixed order by exactly one thread, so results are
// bit-identical to the serial reference regardless of thread count.
//
// Layouts (row-major):
//   x: rows x in      W: out x in      b: out
//   y: rows x out     e: rows x out
// For sequence inputs callers flatten (B, T, *) into rows = B*T and expand
// per-example scales to per-row scales.

// y = x W^T + b
void linear_forward(const double* x, const double* w, const double* b, double* y,
                    std::size_t rows, std::size_t in, std::size_t out);

// e_in = e_out W
void linear_backward_input(const double* e_out, const double* w, double* e_in,
                           std::size_t rows, std::size_t in, std::size_t out);

// gw += sum_r scale[r] * e[r]^T a[r];  gb += sum_r scale[r] * e[r]
// scale == nullptr means all-ones. Never materializes a rows x (out*in)
// intermediate.
void scaled_weight_grad(const double* a, const double* e, const double* scale,
                        double* gw, double* gb, std::size_t rows, std::size_t in,
                        std::size_t out);

// Per-example squared gradient norms of a Linear layer from activations and
// output gradients, without materializing per-example gradients.
// 2-D: wsq[i] = |a_i|^2 |e_i|^2, bsq[i] = |e_i|^2.
void ghost_norms_2d(const double* a, const double* e, double* wsq, double* bsq,
                    std::size_t batch, std::size_t in, std::size_t out);

// Sequence case: wsq[i] = <a_i a_i^T, e_i e_i^T>_F, bsq[i] = |sum_t e_{i,t}|^2.
void ghost_norms_seq(const double* a, const double* e, double* wsq, double* bsq,
                     std::size_t batch, std::size_t seq, std::size_t in,
                     std::size_t out);

// Serial reference implementations, kept for testing and benchmarked against
// the parallel entry points.
namespace serial {

void linear_forward(const double* x, const double* w, const double* b, double* y,
                    std::size_t rows, std::size_t in, std::size_t out);
void linear_backward_input(const double* e_out, const double* w, double* e_in,
                           std::size_t rows, std::size_t in, std::size_t out);
void scaled_weight_grad(const double* a, const double* e, const double* scale,
                        double* gw, double* gb, std::size_t rows, std::size_t in,
                        std::size_t out);
void ghost_norms_2d(const double* a, const double* e, double* wsq, double* bsq,
                    std::size_t batch, std::size_t in, std::size_t out);
void ghost_norms_seq(const double* a, const double* e, double* wsq, double* bsq,
                     std::size_t batch, std::size_t seq, std::size_t in,
                     std::size_t out);

}  // namespace serial

}  // namespace groupclip::kernels
