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

// Test-only oracles, independent of the library's implementation paths:
// central finite differences for gradients and numerical quadrature for the
// subsampled-Gaussian Renyi divergence.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "groupclip/clip.hpp"
#include "groupclip/nn.hpp"

namespace oracles {

// Sum of per-example losses at the current parameters.
inline double summed_loss(const groupclip::Model& model, const groupclip::Batch& batch) {
  const groupclip::Tensor logits = groupclip::forward(model, batch.x, nullptr);
  return groupclip::batch_loss(logits, batch).value * static_cast<double>(batch.size());
}

// Central finite-difference gradient of the summed loss w.r.t. every
// parameter of Linear layer k (1-based), W first (row-major) then b.
inline std::vector<double> fd_layer_gradient(groupclip::Model model,
                                             const groupclip::Batch& batch, int k,
                                             double h = 1e-5) {
  groupclip::LinearLayer& lin = model.linear(k);
  std::vector<double*> params;
  for (double& v : lin.w.data) params.push_back(&v);
  for (double& v : lin.b.data) params.push_back(&v);
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = *params[i];
    *params[i] = orig + h;
    const double up = summed_loss(model, batch);
    *params[i] = orig - h;
    const double down = summed_loss(model, batch);
    *params[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// log(sum_i exp(v_i)) without overflow.
inline double log_sum_exp(const std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Renyi divergence of the subsampled Gaussian mechanism by direct Simpson
// quadrature of E_{z~mu0}[(mu1/mu0)^alpha] in log space, where
// mu0 = N(0, sigma^2) and mu1 = (1-rho) N(0, sigma^2) + rho N(1, sigma^2).
inline double rdp_quadrature(int alpha, double sigma, double rho, int points = 40001) {
  if (rho == 0.0) return 0.0;
  const double lo = -12.0 * sigma - 2.0;
  const double hi = static_cast<double>(alpha) + 12.0 * sigma + 2.0;
  const double dz = (hi - lo) / static_cast<double>(points - 1);
  const double log_norm = -0.5 * std::log(2.0 * M_PI * sigma * sigma);

  auto log_integrand = [&](double z) {
    const double log_mu0 = log_norm - z * z / (2.0 * sigma * sigma);
    // mu1/mu0 = (1 - rho) + rho * exp((2z - 1) / (2 sigma^2))
    const double expo = (2.0 * z - 1.0) / (2.0 * sigma * sigma);
    double log_ratio;
    if (expo > 0.0) {
      log_ratio = expo + std::log(rho + (1.0 - rho) * std::exp(-expo));
    } else {
      log_ratio = std::log((1.0 - rho) + rho * std::exp(expo));
    }
    return log_mu0 + alpha * log_ratio;
  };

  std::vector<double> terms(points);
  for (int i = 0; i < points; ++i) {
    const double z = lo + dz * i;
    double w = (i == 0 || i == points - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    terms[i] = log_integrand(z) + std::log(w * dz / 3.0);
  }
  const double log_a = log_sum_exp(terms);
  return std::max(0.0, log_a / (alpha - 1.0));
}

// Composition + conversion on the quadrature curve (same conversion rule as
// the library, different divergence route).
inline double eps_quadrature(double sigma, double rho, long steps, double delta) {
  double best = std::numeric_limits<double>::infinity();
  for (int alpha = 2; alpha <= 64; ++alpha) {
    const double rdp = rdp_quadrature(alpha, sigma, rho);
    best = std::min(best, steps * rdp + std::log(1.0 / delta) / (alpha - 1.0));
  }
  return best;
}

// Flattened contents of a group state (layer order, W then b per layer).
inline std::vector<double> flatten(const groupclip::GroupGradState& st) {
  std::vector<double> out;
  for (std::size_t l = 0; l < st.gw.size(); ++l) {
    out.insert(out.end(), st.gw[l].data.begin(), st.gw[l].data.end());
    out.insert(out.end(), st.gb[l].data.begin(), st.gb[l].data.end());
  }
  return out;
}

inline double max_abs_diff(const std::vector<groupclip::GroupGradState>& a,
                           const std::vector<groupclip::GroupGradState>& b) {
  double m = 0.0;
  for (std::size_t g = 0; g < a.size(); ++g) {
    const std::vector<double> fa = flatten(a[g]);
    const std::vector<double> fb = flatten(b[g]);
    for (std::size_t i = 0; i < fa.size(); ++i) m = std::max(m, std::fabs(fa[i] - fb[i]));
  }
  return m;
}

// Random test instances.
struct RandomInstance {
  groupclip::Model model;
  groupclip::Batch batch;
};

// Smallest |pre-activation| feeding a ReLU; finite differences are only
// trusted away from the kink.
inline double min_relu_margin(const groupclip::Model& model, const groupclip::Tensor& x) {
  groupclip::LayerTape tape;
  groupclip::forward(model, x, &tape);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p + 1 < model.layers.size(); ++p) {
    const auto* act = std::get_if<groupclip::Activation>(&model.layers[p + 1]);
    if (act && *act == groupclip::Activation::kRelu) {
      for (double v : tape.outs[p].data) margin = std::min(margin, std::fabs(v));
    }
  }
  return margin;
}

inline RandomInstance random_instance(std::uint64_t seed, int max_depth = 4,
                                      std::size_t max_width = 32, std::size_t max_batch = 16,
                                      bool allow_sequence = true) {
  groupclip::Rng rng(seed);
  const int depth = 1 + static_cast<int>(rng.below(max_depth));
  std::vector<std::size_t> widths;
  for (int i = 0; i <= depth; ++i) widths.push_back(2 + rng.below(max_width - 1));
  groupclip::Activation act =
      rng.below(2) == 0 ? groupclip::Activation::kTanh : groupclip::Activation::kRelu;

  RandomInstance inst;
  for (std::uint64_t attempt = 0;; ++attempt) {
    if (attempt == 16) {
      act = groupclip::Activation::kTanh;  // smooth everywhere; always valid
    }
    inst.model = groupclip::make_mlp(widths, act, 0.8, rng.derive(77, seed, attempt));
    // Random biases keep ReLU pre-activations away from exact zero (which
    // zero-filled rows would otherwise hit), so the FD oracle stays valid.
    groupclip::Rng bias_rng = rng.derive(79, seed, attempt);
    for (int l = 1; l <= inst.model.num_linear(); ++l) {
      for (double& v : inst.model.linear(l).b.data) v = bias_rng.gaussian(0.2);
    }

    const std::size_t batch = 1 + rng.below(max_batch);
    const bool seq = allow_sequence && rng.below(3) == 0;
    groupclip::Rng data_rng = rng.derive(78, seed, attempt);
    if (seq) {
      const std::size_t t = 2 + rng.below(3);
      inst.batch.x = groupclip::Tensor({batch, t, widths.front()});
    } else {
      inst.batch.x = groupclip::Tensor({batch, widths.front()});
    }
    for (double& v : inst.batch.x.data) v = data_rng.gaussian();
    if (rng.below(4) == 0) {
      inst.batch.loss = groupclip::LossKind::kMse;
      inst.batch.targets = groupclip::Tensor(
          seq ? std::vector<std::size_t>{batch, inst.batch.x.dim(1), widths.back()}
              : std::vector<std::size_t>{batch, widths.back()});
      for (double& v : inst.batch.targets.data) v = data_rng.gaussian();
    } else {
      inst.batch.loss = groupclip::LossKind::kCrossEntropy;
      inst.batch.labels.resize(batch);
      for (std::size_t i = 0; i < batch; ++i) {
        inst.batch.labels[i] = static_cast<int>(data_rng.below(widths.back()));
      }
    }
    if (act == groupclip::Activation::kTanh || min_relu_margin(inst.model, inst.batch.x) > 1e-3) {
      break;
    }
  }
  return inst;
}

}  // namespace oracles
