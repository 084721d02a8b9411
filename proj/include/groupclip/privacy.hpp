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
#include <vector>

#include "groupclip/clip.hpp"
#include "groupclip/rng.hpp"

namespace groupclip {

// Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism on the
// integer order grid {2..64}, sigma calibration by bisection, the noise
// budget split between gradient release and quantile-count release, and
// per-group noise planning.

inline constexpr int kMinRdpOrder = 2;
inline constexpr int kMaxRdpOrder = 64;

// Renyi divergence of order alpha for the subsampled Gaussian mechanism at
// sampling rate rho, evaluated in log-space.
double rdp_sgm(int alpha, double sigma, double rho);

// RDP curve over the default order grid; index i holds order kMinRdpOrder+i.
std::vector<double> rdp_curve(double sigma, double rho);

// (epsilon, delta) conversion after T-fold composition:
// min_alpha [ T * rdp(alpha) + ln(1/delta) / (alpha - 1) ].
double eps_from_rdp(std::span<const double> curve, long steps, double delta);

double eps_for_sigma(double sigma, double rho, long steps, double delta);

// Conversion floor of the finite grid: the epsilon of a zero-RDP mechanism,
// ln(1/delta) / (kMaxRdpOrder - 1). Targets below it are infeasible.
double conversion_floor(double delta);

inline constexpr double kSigmaLo = 0.3;
inline constexpr double kSigmaHi = 50.0;
inline constexpr double kSigmaTol = 1e-3;

// Smallest sigma in [kSigmaLo, kSigmaHi] (bisection, absolute tolerance
// kSigmaTol) with eps_for_sigma(...) <= epsilon.
double calibrate_sigma(double epsilon, double delta, double rho, long steps);

// New gradient noise multiplier once quantile counts (sensitivity 1/2 each,
// K groups) share the budget: (sigma^-2 - K/(4 sigma_b^2))^-1/2.
double split_budget(double sigma, double sigma_b, int num_groups);

// Fraction of budget consumed by quantile estimation: K sigma^2 / (4 sigma_b^2).
double budget_fraction(double sigma, double sigma_b, int num_groups);

// Inverse of budget_fraction in sigma_b: sigma * sqrt(K / (4 r)).
double sigma_b_for_fraction(double fraction, double sigma, int num_groups);

// Minimal sigma_b for which the split is feasible at this (sigma, K).
double min_feasible_sigma_b(double sigma, int num_groups);

enum class Allocation { kGlobal, kEqualBudget, kEqualSnr };

// Per-group noise specification. Scaling group k by gamma_k before the
// Gaussian mechanism and unscaling afterwards yields per-group noise std
// s_k = sigma_new * S * gamma_k with S = sqrt(sum_k C_k^2 / gamma_k^2).
struct NoisePlan {
  Allocation strategy = Allocation::kGlobal;
  std::vector<double> gamma;
  double sensitivity = 0.0;          // S
  std::vector<double> stddev;        // s_k
  double expected_sq_norm = 0.0;     // V = sum_k s_k^2 d_k
};

NoisePlan make_noise_plan(Allocation strategy, std::span<const ParamGroup> groups,
                          double sigma_new);

// Independent Gaussian noise per group, flat buffers of the group dims, in
// group order; deterministic given the rng.
std::vector<std::vector<double>> draw_noise(const NoisePlan& plan,
                                            std::span<const std::size_t> dims, Rng& rng);

// Resolved privacy configuration for a run.
struct PrivacySpec {
  double epsilon = 0.0;
  double delta = 0.0;
  double rho = 0.0;        // sampling rate B/N
  long steps = 0;          // T
  double fraction = 0.0;   // r, budget share for quantile estimation
  double sigma = 0.0;      // accountant output
  double sigma_b = 0.0;    // count noise multiplier
  double sigma_new = 0.0;  // gradient noise multiplier after the split
};

// Calibrates sigma for (epsilon, delta, rho, T) and, when fraction > 0,
// derives (sigma_b, sigma_new) for K groups; fraction == 0 leaves
// sigma_new = sigma and sigma_b = 0 (no quantile release).
PrivacySpec resolve_privacy(double epsilon, double delta, double rho, long steps,
                            double fraction, int num_groups);

}  // namespace groupclip
