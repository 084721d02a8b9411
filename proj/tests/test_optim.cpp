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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "groupclip/errors.hpp"
#include "groupclip/metrics.hpp"
#include "groupclip/optim.hpp"
#include "groupclip/synthetic.hpp"
#include "oracles.hpp"

using namespace groupclip;

namespace {

Dataset small_dataset(std::uint64_t seed, std::size_t n = 64, std::size_t dim = 6,
                      int classes = 3) {
  SyntheticSpec spec;
  spec.n = n;
  spec.dim = dim;
  spec.classes = classes;
  spec.separation = 2.0;
  return gen_synthetic(spec, seed).train;
}

TrainState fresh_state(const Dataset& data, ClipPolicy policy, std::uint64_t seed,
                       std::size_t nominal, std::vector<std::size_t> hidden = {8, 8}) {
  std::vector<std::size_t> widths;
  widths.push_back(data.x.shape.back());
  for (std::size_t h : hidden) widths.push_back(h);
  int classes = 0;
  for (int y : data.labels) classes = std::max(classes, y + 1);
  widths.push_back(static_cast<std::size_t>(classes));
  Model model = make_mlp(widths, Activation::kTanh, 0.8, Rng(seed));
  const Grouping grouping = Grouping::per_layer(model.num_linear());
  return make_train_state(std::move(model), grouping, std::move(policy), seed, nominal);
}

std::vector<double> flat_params(const Model& model) {
  std::vector<double> out;
  for (int k = 1; k <= model.num_linear(); ++k) {
    out.insert(out.end(), model.linear(k).w.data.begin(), model.linear(k).w.data.end());
    out.insert(out.end(), model.linear(k).b.data.begin(), model.linear(k).b.data.end());
  }
  return out;
}

double params_diff(const Model& a, const Model& b) {
  const std::vector<double> fa = flat_params(a), fb = flat_params(b);
  double m = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) m = std::max(m, std::fabs(fa[i] - fb[i]));
  return m;
}

}  // namespace

TEST_CASE("sample_minibatch: poisson and fixed contracts") {
  OptimizerConfig poisson;
  poisson.batch_kind = BatchKind::kPoisson;
  poisson.sampling_rate = 1.0;
  CHECK(sample_minibatch(10, poisson, Rng(1)).size() == 10);
  poisson.sampling_rate = 0.0;
  CHECK(sample_minibatch(10, poisson, Rng(1)).empty());

  // Mean batch size within 3 sigma of rho * N over 100 draws.
  poisson.sampling_rate = 0.5;
  const std::size_t n = 10000;
  double total = 0.0;
  Rng rng(77);
  for (int rep = 0; rep < 100; ++rep) {
    total += static_cast<double>(sample_minibatch(n, poisson, rng.derive(5, rep)).size());
  }
  const double mean = total / 100.0;
  const double sigma = std::sqrt(0.25 * n / 100.0);
  CHECK(std::fabs(mean - 5000.0) < 3.0 * sigma);

  OptimizerConfig fixed;
  fixed.batch_kind = BatchKind::kFixed;
  fixed.batch_size = 11;
  CHECK_THROWS_AS(sample_minibatch(10, fixed, Rng(1)), InputError);
  fixed.batch_size = 5;
  const auto idx = sample_minibatch(10, fixed, Rng(1));
  CHECK(idx.size() == 5);
  // Without replacement.
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = i + 1; j < idx.size(); ++j) CHECK(idx[i] != idx[j]);
  }
}

TEST_CASE("degenerate dp_step equals vanilla minibatch SGD") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Dataset data = small_dataset(seed);
    const std::size_t B = 16;

    TrainState dp = fresh_state(data, ClipPolicy::flat(kNoClipping), seed, B);
    TrainState plain = fresh_state(data, ClipPolicy::flat(kNoClipping), seed, B);

    TrainOptions opt;
    opt.opt.lr = 0.3;
    opt.opt.batch_kind = BatchKind::kFixed;
    opt.opt.batch_size = B;
    opt.opt.steps = 3;
    opt.noise_enabled = false;

    train(dp, data, opt, nullptr);

    // Manual SGD on the mean loss with the same batch stream.
    const Rng master(plain.seed);
    for (long t = 0; t < 3; ++t) {
      const auto idx = sample_minibatch(data.size(), opt.opt, master.derive(rng_role::kBatch, t));
      const Batch batch = data.select(idx);
      const Tensor logits = forward(plain.model, batch.x, nullptr);
      const LossResult loss = batch_loss(logits, batch);
      const LayerGrads grads = model_gradient(plain.model, batch.x, loss.dlogits);
      for (int k = 1; k <= plain.model.num_linear(); ++k) {
        LinearLayer& lin = plain.model.linear(k);
        for (std::size_t i = 0; i < lin.w.size(); ++i) {
          lin.w.data[i] -= 0.3 * grads.gw[k - 1].data[i] / static_cast<double>(B);
        }
        for (std::size_t i = 0; i < lin.b.size(); ++i) {
          lin.b.data[i] -= 0.3 * grads.gb[k - 1].data[i] / static_cast<double>(B);
        }
      }
    }
    CHECK(params_diff(dp.model, plain.model) < 1e-12);
  }
}

TEST_CASE("clipping-path equivalence: fused training equals naive-oracle training") {
  // 50 steps; the naive path recomputes each step's clipped sums and applies
  // the same update with the same noise draws.
  const Dataset data = small_dataset(5, 48, 5, 3);
  const std::size_t B = 12;
  const std::vector<double> init_c = {0.8, 0.6, 0.7};

  TrainState fused = fresh_state(data, ClipPolicy::adaptive(init_c, 0.5, 0.3, 2.0), 5, B);
  TrainState naive = fresh_state(data, ClipPolicy::adaptive(init_c, 0.5, 0.3, 2.0), 5, B);

  TrainOptions opt;
  opt.opt.lr = 0.2;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = B;
  opt.opt.steps = 50;
  opt.allocation = Allocation::kGlobal;
  opt.privacy.sigma_new = 0.4;
  opt.privacy.sigma_b = 2.0;

  const Rng master(naive.seed);
  for (long t = 0; t < opt.opt.steps; ++t) {
    const auto idx = sample_minibatch(data.size(), opt.opt, master.derive(rng_role::kBatch, t));
    // Fused path via dp_step.
    dp_step(fused, data, idx, opt);

    // Naive path: materialized clipping, then the same update rule.
    const Batch batch = data.select(idx);
    const std::vector<double> thresholds = naive.effective_thresholds();
    const auto states = naive_oracle(naive.model, batch, naive.grouping,
                                     ClipPolicy::fixed_per_group(thresholds));
    const NoisePlan plan =
        make_noise_plan(Allocation::kGlobal, naive.param_groups(), opt.privacy.sigma_new);
    for (int g = 0; g < naive.grouping.num_groups(); ++g) {
      Rng noise_rng = master.derive(rng_role::kGradNoise, t, g + 1);
      LinearLayer& lin = naive.model.linear(g + 1);
      std::vector<double> zw(lin.w.size()), zb(lin.b.size());
      for (double& v : zw) v = noise_rng.gaussian(plan.stddev[g]);
      for (double& v : zb) v = noise_rng.gaussian(plan.stddev[g]);
      for (std::size_t i = 0; i < lin.w.size(); ++i) {
        lin.w.data[i] -= 0.2 * (states[g].gw[0].data[i] + zw[i]) / static_cast<double>(B);
      }
      for (std::size_t i = 0; i < lin.b.size(); ++i) {
        lin.b.data[i] -= 0.2 * (states[g].gb[0].data[i] + zb[i]) / static_cast<double>(B);
      }
    }
    for (int g = 0; g < naive.grouping.num_groups(); ++g) {
      Rng count_rng = master.derive(rng_role::kCountNoise, t, g + 1);
      naive.estimators[g].update(states[g].clipped_below, count_rng.gaussian(2.0));
    }
    CHECK(params_diff(fused.model, naive.model) < 1e-10);
    for (int g = 0; g < naive.grouping.num_groups(); ++g) {
      CHECK(std::fabs(fused.estimators[g].threshold - naive.estimators[g].threshold) < 1e-10);
    }
  }
}

TEST_CASE("privacy bookkeeping: T gradient draws and T*K count draws") {
  const Dataset data = small_dataset(3);
  const std::size_t B = 8;
  const long T = 17;
  TrainState st = fresh_state(data, ClipPolicy::adaptive({0.5, 0.5, 0.5}, 0.5, 0.3, 1.0), 3, B);
  const int K = st.grouping.num_groups();
  TrainOptions opt;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = B;
  opt.opt.steps = T;
  opt.privacy.sigma_new = 0.5;
  opt.privacy.sigma_b = 1.0;
  train(st, data, opt, nullptr);
  CHECK(st.grad_noise_events == T);
  CHECK(st.count_noise_draws == T * K);
}

TEST_CASE("learning rate schedules") {
  OptimizerConfig cfg;
  cfg.lr = 0.8;
  cfg.steps = 10;
  cfg.schedule = Schedule::kConstant;
  CHECK(cfg.lr_at(0) == 0.8);
  CHECK(cfg.lr_at(9) == 0.8);
  cfg.schedule = Schedule::kLinearDecay;
  CHECK(cfg.lr_at(0) == 0.8);
  CHECK(cfg.lr_at(5) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(cfg.lr_at(9) == doctest::Approx(0.08).epsilon(1e-12));
}

TEST_CASE("non-finite gradients raise a numeric error naming the group") {
  const Dataset data = small_dataset(81);
  TrainState st = fresh_state(data, ClipPolicy::fixed_per_group({1, 1, 1}), 81, 8);
  st.model.linear(2).w.data[0] = std::numeric_limits<double>::infinity();
  TrainOptions opt;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = 8;
  opt.opt.steps = 1;
  std::vector<std::size_t> idx = {0, 1, 2, 3, 4, 5, 6, 7};
  CHECK_THROWS_WITH_AS(dp_step(st, data, idx, opt), doctest::Contains("group"), NumericError);
}

TEST_CASE("train: zero steps returns the initial state unchanged") {
  const Dataset data = small_dataset(9);
  TrainState st = fresh_state(data, ClipPolicy::flat(1.0), 9, 8);
  const std::vector<double> before = flat_params(st.model);
  TrainOptions opt;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = 8;
  opt.opt.steps = 0;
  opt.privacy.sigma_new = 1.0;
  train(st, data, opt, nullptr);
  CHECK(flat_params(st.model) == before);
  CHECK(st.step == 0);
}

TEST_CASE("train: separable data reaches full training accuracy without privacy") {
  SyntheticSpec spec;
  spec.n = 200;
  spec.dim = 8;
  spec.classes = 2;
  spec.separation = 12.0;  // essentially separable
  const Dataset data = gen_synthetic(spec, 11).train;

  TrainState st = fresh_state(data, ClipPolicy::flat(kNoClipping), 11, 32);
  TrainOptions opt;
  opt.opt.lr = 0.8;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = 32;
  opt.opt.steps = 200;
  opt.noise_enabled = false;
  train(st, data, opt, nullptr);
  CHECK(evaluate_accuracy(st.model, data) == 1.0);
}

TEST_CASE("train: identical seeds give identical metric streams") {
  const Dataset data = small_dataset(21);
  TrainOptions opt;
  opt.opt.lr = 0.2;
  opt.opt.batch_kind = BatchKind::kPoisson;
  opt.opt.sampling_rate = 0.3;
  opt.opt.steps = 25;
  opt.privacy.sigma_new = 0.8;
  opt.privacy.sigma_b = 3.0;

  RecordingSink a, b;
  TrainState sa = fresh_state(data, ClipPolicy::adaptive({1, 1, 1}, 0.5, 0.3, 3.0), 21, 19);
  TrainState sb = fresh_state(data, ClipPolicy::adaptive({1, 1, 1}, 0.5, 0.3, 3.0), 21, 19);
  train(sa, data, opt, &a);
  train(sb, data, opt, &b);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].loss == b.records[i].loss);
    CHECK(a.records[i].thresholds == b.records[i].thresholds);
    CHECK(a.records[i].clipped_fraction == b.records[i].clipped_fraction);
    CHECK(a.records[i].realized_batch == b.records[i].realized_batch);
  }
}

TEST_CASE("dp_step: empty Poisson batch is a pure noise step") {
  const Dataset data = small_dataset(31);
  TrainState st = fresh_state(data, ClipPolicy::fixed_per_group({1, 1, 1}), 31, 8);
  TrainOptions opt;
  opt.opt.batch_kind = BatchKind::kPoisson;
  opt.opt.sampling_rate = 0.5;
  opt.opt.lr = 0.1;
  opt.opt.steps = 1;
  opt.privacy.sigma_new = 1.0;
  const std::vector<double> before = flat_params(st.model);
  const StepRecord rec = dp_step(st, data, {}, opt);
  CHECK(rec.realized_batch == 0);
  CHECK(st.step == 1);
  // Parameters moved by noise alone.
  CHECK(params_diff(st.model, fresh_state(data, ClipPolicy::fixed_per_group({1, 1, 1}), 31, 8)
                                 .model) > 0.0);

  // Empty batch under a fixed spec is a state error.
  TrainState st2 = fresh_state(data, ClipPolicy::fixed_per_group({1, 1, 1}), 31, 8);
  TrainOptions fixed = opt;
  fixed.opt.batch_kind = BatchKind::kFixed;
  fixed.opt.batch_size = 8;
  CHECK_THROWS_AS(dp_step(st2, data, {}, fixed), StateError);
}

TEST_CASE("dp-adam: moments consume the privatized gradient and move parameters") {
  const Dataset data = small_dataset(41);
  TrainState sgd = fresh_state(data, ClipPolicy::flat(1.0), 41, 16);
  TrainState adam = fresh_state(data, ClipPolicy::flat(1.0), 41, 16);
  TrainOptions opt;
  opt.opt.lr = 0.01;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = 16;
  opt.opt.steps = 5;
  opt.privacy.sigma_new = 0.5;
  TrainOptions adam_opt = opt;
  adam_opt.opt.rule = Rule::kAdam;
  train(sgd, data, opt, nullptr);
  train(adam, data, adam_opt, nullptr);
  // Same draws, different update rules.
  CHECK(params_diff(sgd.model, adam.model) > 1e-8);
  CHECK(adam.model.linear(1).w.all_finite());
  // Second moment accumulated something.
  double v = 0.0;
  for (const Tensor& t : adam.vel_w) v += squared_norm(t);
  CHECK(v > 0.0);
}

TEST_CASE("checkpoint: round trip resumes bit-identically") {
  const Dataset data = small_dataset(51);
  const std::size_t B = 10;
  TrainOptions opt;
  opt.opt.lr = 0.15;
  opt.opt.rule = Rule::kAdam;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = B;
  opt.opt.steps = 6;
  opt.privacy.sigma_new = 0.7;
  opt.privacy.sigma_b = 2.5;

  TrainState full = fresh_state(data, ClipPolicy::adaptive({1, 1, 1}, 0.5, 0.3, 2.5), 51, B);
  TrainState half = fresh_state(data, ClipPolicy::adaptive({1, 1, 1}, 0.5, 0.3, 2.5), 51, B);

  train(full, data, opt, nullptr);  // all 6 steps

  TrainOptions first3 = opt;
  first3.opt.steps = 3;
  train(half, data, first3, nullptr);
  const std::string path = std::filesystem::temp_directory_path() / "groupclip_ckpt_test.bin";
  save_checkpoint(half, path);
  TrainState resumed = load_checkpoint(path);
  CHECK(resumed.step == 3);
  train(resumed, data, opt, nullptr);  // continues t = 3..5

  CHECK(params_diff(full.model, resumed.model) == 0.0);
  for (int g = 0; g < full.grouping.num_groups(); ++g) {
    CHECK(full.estimators[g].threshold == resumed.estimators[g].threshold);
  }
  CHECK(full.grad_noise_events == resumed.grad_noise_events);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: corrupted file raises format error") {
  const std::string path = std::filesystem::temp_directory_path() / "groupclip_bad_ckpt.bin";
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    const char junk[] = "not a checkpoint";
    std::fwrite(junk, 1, sizeof(junk), f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("flat_train_reference requires a flat policy") {
  const Dataset data = small_dataset(61);
  TrainState st = fresh_state(data, ClipPolicy::fixed_per_group({1, 1, 1}), 61, 8);
  TrainOptions opt;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = 8;
  opt.opt.steps = 1;
  CHECK_THROWS_AS(flat_train_reference(st, data, opt, nullptr), InputError);
}

TEST_CASE("adaptive thresholds move toward the clipped-fraction target during training") {
  const Dataset data = small_dataset(71, 128, 6, 3);
  const std::size_t B = 32;
  TrainState st = fresh_state(data, ClipPolicy::adaptive({5.0, 5.0, 5.0}, 0.5, 0.3, 0.0), 71, B);
  TrainOptions opt;
  opt.opt.lr = 0.05;
  opt.opt.batch_kind = BatchKind::kFixed;
  opt.opt.batch_size = B;
  opt.opt.steps = 120;
  opt.noise_enabled = false;
  RecordingSink sink;
  train(st, data, opt, &sink);
  // After burn-in, the un-clipped fraction tracks q within a wide band.
  double frac = 0.0;
  int n = 0;
  for (std::size_t i = 60; i < sink.records.size(); ++i) {
    for (double f : sink.records[i].clipped_fraction) frac += 1.0 - f;
    n += static_cast<int>(sink.records[i].clipped_fraction.size());
  }
  frac /= n;
  CHECK(std::fabs(frac - 0.5) < 0.1);
}
