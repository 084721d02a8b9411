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

#include "groupclip/kernels.hpp"

namespace groupclip::kernels {
namespace {

// Shared per-element loops. Serial and parallel entry points both route
// through these so the two paths execute identical reduction code.

inline double dot_n(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void row_forward(const double* xr, const double* w, const double* b, double* yr,
                        std::size_t in, std::size_t out) {
  for (std::size_t o = 0; o < out; ++o) yr[o] = dot_n(xr, w + o * in, in) + b[o];
}

inline void row_backward_input(const double* er, const double* w, double* gr,
                               std::size_t in, std::size_t out) {
  for (std::size_t n = 0; n < in; ++n) gr[n] = 0.0;
  for (std::size_t o = 0; o < out; ++o) {
    const double eo = er[o];
    const double* wo = w + o * in;
    for (std::size_t n = 0; n < in; ++n) gr[n] += eo * wo[n];
  }
}

inline void elem_ghost_2d(const double* ar, const double* er, double* wsq, double* bsq,
                          std::size_t in, std::size_t out) {
  const double an = dot_n(ar, ar, in);
  const double en = dot_n(er, er, out);
  *wsq = an * en;
  *bsq = en;
}

inline void elem_ghost_seq(const double* ai, const double* ei, double* wsq, double* bsq,
                           std::size_t seq, std::size_t in, std::size_t out) {
  // <a a^T, e e^T>_F over the T x T Gram matrices; symmetric, so off-diagonal
  // terms are doubled.
  double w = 0.0;
  for (std::size_t t = 0; t < seq; ++t) {
    const double gaa = dot_n(ai + t * in, ai + t * in, in);
    const double gee = dot_n(ei + t * out, ei + t * out, out);
    w += gaa * gee;
    for (std::size_t u = t + 1; u < seq; ++u) {
      const double ga = dot_n(ai + t * in, ai + u * in, in);
      const double ge = dot_n(ei + t * out, ei + u * out, out);
      w += 2.0 * ga * ge;
    }
  }
  *wsq = w;
  double b = 0.0;
  for (std::size_t o = 0; o < out; ++o) {
    double s = 0.0;
    for (std::size_t t = 0; t < seq; ++t) s += ei[t * out + o];
    b += s * s;
  }
  *bsq = b;
}

inline void weight_grad_for_out(const double* a, const double* e, const double* scale,
                                double* gw, double* gb, std::size_t o, std::size_t rows,
                                std::size_t in, std::size_t out) {
  double* gwo = gw + o * in;
  double gbo = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double se = (scale ? scale[r] : 1.0) * e[r * out + o];
    if (se != 0.0) {
      const double* ar = a + r * in;
      for (std::size_t n = 0; n < in; ++n) gwo[n] += se * ar[n];
    }
    gbo += se;
  }
  gb[o] += gbo;
}

}  // namespace

void linear_forward(const double* x, const double* w, const double* b, double* y,
                    std::size_t rows, std::size_t in, std::size_t out) {
#pragma omp parallel for schedule(static)
  for (long r = 0; r < static_cast<long>(rows); ++r)
    row_forward(x + r * in, w, b, y + r * out, in, out);
}

void linear_backward_input(const double* e_out, const double* w, double* e_in,
                           std::size_t rows, std::size_t in, std::size_t out) {
#pragma omp parallel for schedule(static)
  for (long r = 0; r < static_cast<long>(rows); ++r)
    row_backward_input(e_out + r * out, w, e_in + r * in, in, out);
}

void scaled_weight_grad(const double* a, const double* e, const double* scale,
                        double* gw, double* gb, std::size_t rows, std::size_t in,
                        std::size_t out) {
#pragma omp parallel for schedule(static)
  for (long o = 0; o < static_cast<long>(out); ++o)
    weight_grad_for_out(a, e, scale, gw, gb, static_cast<std::size_t>(o), rows, in, out);
}

void ghost_norms_2d(const double* a, const double* e, double* wsq, double* bsq,
                    std::size_t batch, std::size_t in, std::size_t out) {
#pragma omp parallel for schedule(static)
  for (long i = 0; i < static_cast<long>(batch); ++i)
    elem_ghost_2d(a + i * in, e + i * out, wsq + i, bsq + i, in, out);
}

void ghost_norms_seq(const double* a, const double* e, double* wsq, double* bsq,
                     std::size_t batch, std::size_t seq, std::size_t in,
                     std::size_t out) {
#pragma omp parallel for schedule(static)
  for (long i = 0; i < static_cast<long>(batch); ++i)
    elem_ghost_seq(a + i * seq * in, e + i * seq * out, wsq + i, bsq + i, seq, in, out);
}

namespace serial {

void linear_forward(const double* x, const double* w, const double* b, double* y,
                    std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r)
    row_forward(x + r * in, w, b, y + r * out, in, out);
}

void linear_backward_input(const double* e_out, const double* w, double* e_in,
                           std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r)
    row_backward_input(e_out + r * out, w, e_in + r * in, in, out);
}

void scaled_weight_grad(const double* a, const double* e, const double* scale,
                        double* gw, double* gb, std::size_t rows, std::size_t in,
                        std::size_t out) {
  for (std::size_t o = 0; o < out; ++o)
    weight_grad_for_out(a, e, scale, gw, gb, o, rows, in, out);
}

void ghost_norms_2d(const double* a, const double* e, double* wsq, double* bsq,
                    std::size_t batch, std::size_t in, std::size_t out) {
  for (std::size_t i = 0; i < batch; ++i)
    elem_ghost_2d(a + i * in, e + i * out, wsq + i, bsq + i, in, out);
}

void ghost_norms_seq(const double* a, const double* e, double* wsq, double* bsq,
                     std::size_t batch, std::size_t seq, std::size_t in,
                     std::size_t out) {
  for (std::size_t i = 0; i < batch; ++i)
    elem_ghost_seq(a + i * seq * in, e + i * seq * out, wsq + i, bsq + i, seq, in, out);
}

}  // namespace serial

}  // namespace groupclip::kernels
