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

#include "groupclip/privacy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "groupclip/errors.hpp"

namespace groupclip {
namespace {

double log_binom(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

double rdp_sgm(int alpha, double sigma, double rho) {
  if (alpha < kMinRdpOrder) throw InputError("rdp_sgm: order must be >= 2");
  if (!(sigma > 0.0)) throw InputError("rdp_sgm: sigma must be positive");
  if (rho < 0.0 || rho > 1.0) throw InputError("rdp_sgm: sampling rate must be in [0,1]");
  if (rho == 0.0) return 0.0;
  if (rho == 1.0) return alpha / (2.0 * sigma * sigma);

  const double log_rho = std::log(rho);
  const double log_1m_rho = std::log1p(-rho);
  std::vector<double> terms(alpha + 1);
  for (int j = 0; j <= alpha; ++j) {
    terms[j] = log_binom(alpha, j) + (alpha - j) * log_1m_rho + j * log_rho +
               j * (j - 1) / (2.0 * sigma * sigma);
  }
  const double lse = log_sum_exp(terms);
  if (!std::isfinite(lse)) {
    throw NumericError("rdp_sgm overflow at alpha=" + std::to_string(alpha) +
                       " sigma=" + std::to_string(sigma));
  }
  // The binomial sum is >= 1, so the divergence is nonnegative; clamp tiny
  // negative round-off.
  return std::max(0.0, lse / (alpha - 1.0));
}

std::vector<double> rdp_curve(double sigma, double rho) {
  std::vector<double> curve;
  curve.reserve(kMaxRdpOrder - kMinRdpOrder + 1);
  for (int a = kMinRdpOrder; a <= kMaxRdpOrder; ++a) curve.push_back(rdp_sgm(a, sigma, rho));
  return curve;
}

double eps_from_rdp(std::span<const double> curve, long steps, double delta) {
  if (curve.empty()) throw InputError("eps_from_rdp: empty order grid");
  if (!(delta > 0.0 && delta < 1.0)) throw InputError("eps_from_rdp: delta must be in (0,1)");
  if (steps < 0) throw InputError("eps_from_rdp: negative step count");
  if (steps == 0) return 0.0;
  const double log_inv_delta = std::log(1.0 / delta);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const int alpha = kMinRdpOrder + static_cast<int>(i);
    best = std::min(best, steps * curve[i] + log_inv_delta / (alpha - 1.0));
  }
  return best;
}

double eps_for_sigma(double sigma, double rho, long steps, double delta) {
  const std::vector<double> curve = rdp_curve(sigma, rho);
  return eps_from_rdp(curve, steps, delta);
}

double conversion_floor(double delta) {
  return std::log(1.0 / delta) / (kMaxRdpOrder - 1.0);
}

double calibrate_sigma(double epsilon, double delta, double rho, long steps) {
  if (!(epsilon > 0.0)) throw InputError("calibrate_sigma: epsilon must be positive");
  if (steps < 1) throw InputError("calibrate_sigma: need at least one step");
  if (eps_for_sigma(kSigmaHi, rho, steps, delta) > epsilon) {
    throw InfeasibleError(
        "epsilon=" + std::to_string(epsilon) + " is unreachable at sigma=" +
        std::to_string(kSigmaHi) + "; the conversion floor for delta=" + std::to_string(delta) +
        " is " + std::to_string(conversion_floor(delta)));
  }
  if (eps_for_sigma(kSigmaLo, rho, steps, delta) <= epsilon) return kSigmaLo;
  double lo = kSigmaLo, hi = kSigmaHi;
  while (hi - lo > kSigmaTol) {
    const double mid = 0.5 * (lo + hi);
    if (eps_for_sigma(mid, rho, steps, delta) <= epsilon) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

double split_budget(double sigma, double sigma_b, int num_groups) {
  if (!(sigma > 0.0) || !(sigma_b > 0.0)) throw InputError("split_budget: multipliers must be positive");
  if (num_groups < 0) throw InputError("split_budget: negative group count");
  const double inv = 1.0 / (sigma * sigma) - num_groups / (4.0 * sigma_b * sigma_b);
  if (!(inv > 0.0)) {
    throw InfeasibleError("sigma_b=" + std::to_string(sigma_b) +
                          " leaves no gradient budget; needs sigma_b > " +
                          std::to_string(min_feasible_sigma_b(sigma, num_groups)));
  }
  return 1.0 / std::sqrt(inv);
}

double budget_fraction(double sigma, double sigma_b, int num_groups) {
  if (!(sigma > 0.0) || !(sigma_b > 0.0)) throw InputError("budget_fraction: multipliers must be positive");
  if (num_groups < 0) throw InputError("budget_fraction: negative group count");
  return num_groups * sigma * sigma / (4.0 * sigma_b * sigma_b);
}

double sigma_b_for_fraction(double fraction, double sigma, int num_groups) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InputError("budget fraction must be in (0,1)");
  if (num_groups < 1) throw InputError("need at least one group");
  return sigma * std::sqrt(num_groups / (4.0 * fraction));
}

double min_feasible_sigma_b(double sigma, int num_groups) {
  return sigma * std::sqrt(static_cast<double>(num_groups)) / 2.0;
}

NoisePlan make_noise_plan(Allocation strategy, std::span<const ParamGroup> groups,
                          double sigma_new) {
  if (sigma_new < 0.0) throw InputError("make_noise_plan: negative noise multiplier");
  NoisePlan plan;
  plan.strategy = strategy;
  plan.gamma.reserve(groups.size());
  for (const ParamGroup& g : groups) {
    if (!(g.threshold > 0.0)) throw InputError("make_noise_plan: thresholds must be positive");
    switch (strategy) {
      case Allocation::kGlobal:
        plan.gamma.push_back(1.0);
        break;
      case Allocation::kEqualBudget:
        plan.gamma.push_back(g.threshold);
        break;
      case Allocation::kEqualSnr:
        plan.gamma.push_back(g.threshold / std::sqrt(static_cast<double>(g.dim)));
        break;
    }
  }
  double s_sq = 0.0;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const double ratio = groups[k].threshold / plan.gamma[k];
    s_sq += ratio * ratio;
  }
  plan.sensitivity = std::sqrt(s_sq);
  plan.stddev.reserve(groups.size());
  plan.expected_sq_norm = 0.0;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const double s = sigma_new * plan.sensitivity * plan.gamma[k];
    plan.stddev.push_back(s);
    plan.expected_sq_norm += s * s * static_cast<double>(groups[k].dim);
  }
  return plan;
}

std::vector<std::vector<double>> draw_noise(const NoisePlan& plan,
                                            std::span<const std::size_t> dims, Rng& rng) {
  if (plan.stddev.size() != dims.size()) {
    throw InputError("draw_noise: plan arity does not match group dims");
  }
  std::vector<std::vector<double>> out(dims.size());
  for (std::size_t k = 0; k < dims.size(); ++k) {
    out[k].resize(dims[k]);
    const double s = plan.stddev[k];
    for (double& v : out[k]) v = rng.gaussian(s);
  }
  return out;
}

PrivacySpec resolve_privacy(double epsilon, double delta, double rho, long steps,
                            double fraction, int num_groups) {
  PrivacySpec spec;
  spec.epsilon = epsilon;
  spec.delta = delta;
  spec.rho = rho;
  spec.steps = steps;
  spec.fraction = fraction;
  spec.sigma = calibrate_sigma(epsilon, delta, rho, steps);
  if (fraction > 0.0) {
    spec.sigma_b = sigma_b_for_fraction(fraction, spec.sigma, num_groups);
    spec.sigma_new = split_budget(spec.sigma, spec.sigma_b, num_groups);
  } else {
    spec.sigma_b = 0.0;
    spec.sigma_new = spec.sigma;
  }
  return spec;
}

}  // namespace groupclip
