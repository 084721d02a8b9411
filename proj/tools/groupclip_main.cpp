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

#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "groupclip/runner.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using namespace groupclip;

void apply_cli_overrides(RunConfig& cfg, const std::optional<std::uint64_t>& seed,
                         const std::optional<std::string>& mode,
                         const std::optional<double>& epsilon,
                         const std::optional<double>& delta,
                         const std::optional<double>& target_quantile,
                         const std::optional<double>& quantile_lr,
                         const std::optional<double>& budget_fraction) {
  if (seed) cfg.seed = *seed;
  if (mode) cfg.mode = parse_run_mode(*mode);
  if (epsilon) {
    cfg.epsilon = *epsilon;
    cfg.has_epsilon = true;
    cfg.has_sigma = false;
  }
  if (delta) cfg.delta = *delta;
  if (target_quantile) cfg.target_quantile = *target_quantile;
  if (quantile_lr) cfg.quantile_lr = *quantile_lr;
  if (budget_fraction) cfg.budget_fraction = *budget_fraction;
}

void print_commlog_summary(const char* name, const CommLog& log) {
  std::printf("%-22s syncs=%-4ld norm_msgs=%-5ld act_msgs=%-5ld grad_msgs=%-5ld makespan=%.2f\n",
              name, log.syncs, log.norm_msgs, log.activation_msgs, log.gradient_msgs,
              log.makespan);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"groupclip: differentially private training with group-wise clipping"};
  app.require_subcommand(1);

  const int cap = env_thread_cap();
#ifdef _OPENMP
  if (cap > 0) omp_set_num_threads(cap);
#endif

  // Shared options.
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<double> epsilon, delta, target_quantile, quantile_lr, budget_fraction;

  // calibrate
  auto* calibrate = app.add_subcommand("calibrate", "derive sigma, sigma_b, sigma_new, r");
  double cal_eps = 3.0, cal_delta = 1e-5, cal_rho = 0.01, cal_r = 0.01;
  long cal_steps = 1000;
  int cal_groups = 1;
  calibrate->add_option("--epsilon", cal_eps, "target epsilon")->required();
  calibrate->add_option("--delta", cal_delta, "target delta")->required();
  calibrate->add_option("--rho", cal_rho, "sampling rate B/N")->required();
  calibrate->add_option("--steps", cal_steps, "iterations T")->required();
  calibrate->add_option("--groups", cal_groups, "number of clipping groups K");
  calibrate->add_option("--budget-fraction", cal_r, "budget fraction r for quantile estimation");

  // train
  auto* train_cmd = app.add_subcommand("train", "run a training config");
  std::string train_config;
  std::string train_out = "out";
  train_cmd->add_option("--config", train_config, "run configuration file")->required();
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--seed", seed, "seed override");
  train_cmd->add_option("--mode", mode, "flat|fixed-perlayer|adaptive-perlayer|nonprivate");
  train_cmd->add_option("--epsilon", epsilon, "epsilon override");
  train_cmd->add_option("--delta", delta, "delta override");
  train_cmd->add_option("--target-quantile", target_quantile, "adaptive target quantile");
  train_cmd->add_option("--quantile-lr", quantile_lr, "quantile learning rate");
  train_cmd->add_option("--budget-fraction", budget_fraction, "quantile budget fraction r");

  // bench
  auto* bench = app.add_subcommand("bench", "clipping-mode throughput/memory benchmark");
  std::size_t bench_batch = 256;
  std::vector<std::size_t> bench_widths = {512, 512, 512, 10};
  int bench_warmup = 20, bench_steps = 100;
  std::uint64_t bench_seed = 1;
  bench->add_option("--batch", bench_batch, "batch size");
  bench->add_option("--widths", bench_widths, "model widths, input..output");
  bench->add_option("--warmup", bench_warmup, "warmup steps (excluded)");
  bench->add_option("--steps", bench_steps, "measured steps");
  bench->add_option("--seed", bench_seed, "seed");

  // pipeline-sim
  auto* psim = app.add_subcommand("pipeline-sim", "per-device vs flat-in-pipeline report");
  PipelineSimParams pparams;
  std::string psim_out;
  psim->add_option("--devices", pparams.devices, "device count K");
  psim->add_option("--microbatches", pparams.microbatches, "microbatches J");
  psim->add_option("--batch", pparams.batch, "minibatch size");
  psim->add_option("--widths", pparams.widths, "model widths");
  psim->add_option("--sigma", pparams.sigma, "noise multiplier");
  psim->add_option("--clip-norm", pparams.clip_norm, "global clip norm");
  psim->add_option("--seed", pparams.seed, "seed");
  psim->add_option("--out", psim_out, "directory for commlog CSVs");

  // compare
  auto* compare = app.add_subcommand("compare", "multi-seed adaptive vs fixed vs flat table");
  std::string compare_config;
  std::vector<std::uint64_t> compare_seeds = {1, 2, 3};
  compare->add_option("--config", compare_config, "run configuration file")->required();
  compare->add_option("--seeds", compare_seeds, "seeds");
  compare->add_option("--epsilon", epsilon, "epsilon override");
  compare->add_option("--delta", delta, "delta override");
  compare->add_option("--target-quantile", target_quantile, "adaptive target quantile");
  compare->add_option("--quantile-lr", quantile_lr, "quantile learning rate");
  compare->add_option("--budget-fraction", budget_fraction, "quantile budget fraction r");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*calibrate) {
      const CalibrateReport rep =
          run_calibrate(cal_eps, cal_delta, cal_rho, cal_steps, cal_groups, cal_r);
      std::printf("sigma      = %.6f\n", rep.sigma);
      std::printf("sigma_b    = %.6f\n", rep.sigma_b);
      std::printf("sigma_new  = %.6f\n", rep.sigma_new);
      std::printf("r          = %.6f\n", rep.fraction);
      std::printf("epsilon(sigma) = %.6f (target %.6f)\n", rep.epsilon_check, cal_eps);
    } else if (*train_cmd) {
      RunConfig cfg = load_run_config(train_config);
      apply_cli_overrides(cfg, seed, mode, epsilon, delta, target_quantile, quantile_lr,
                          budget_fraction);
      const TrainOutcome out = run_train(cfg, train_out);
      std::printf("steps=%ld sigma=%.4f sigma_new=%.4f sigma_b=%.4f\n", out.steps,
                  out.privacy.sigma, out.privacy.sigma_new, out.privacy.sigma_b);
      std::printf("final: loss=%.4f train_acc=%.4f test_acc=%.4f\n", out.final_loss,
                  out.train_accuracy, out.test_accuracy);
      std::printf("artifacts: %s/{metrics.csv,norms.csv,checkpoint.bin}\n", train_out.c_str());
    } else if (*bench) {
      const BenchReport rep = run_bench(bench_widths, bench_batch, bench_warmup, bench_steps,
                                        bench_seed);
      std::printf("widths=");
      for (std::size_t w : rep.widths) std::printf("%zu ", w);
      std::printf(" batch=%zu  (timing: backward+clip region, median of %d steps)\n", rep.batch,
                  bench_steps);
      std::printf("%-16s %14s %18s %18s\n", "mode", "median ms/step", "peak grad bytes",
                  "peak backprop bytes");
      for (const BenchRow& row : rep.rows) {
        std::printf("%-16s %14.3f %18zu %18zu\n", bench_mode_name(row.mode), row.median_step_ms,
                    row.peak_grad_bytes, row.peak_backprop_bytes);
      }
      const double fused = rep.row(BenchMode::kFusedPerLayer).median_step_ms;
      const double nonpriv = rep.row(BenchMode::kNonPrivate).median_step_ms;
      const double naive = rep.row(BenchMode::kNaiveFlat).median_step_ms;
      std::printf("fused/nonprivate = %.3f   naive/fused = %.3f\n", fused / nonpriv,
                  naive / fused);
    } else if (*psim) {
      const std::optional<std::string> out =
          psim_out.empty() ? std::nullopt : std::optional<std::string>(psim_out);
      const PipelineSimReport rep = run_pipeline_sim(pparams, out);
      std::printf("K=%d J=%d batch=%zu\n", pparams.devices, pparams.microbatches, pparams.batch);
      print_commlog_summary("per-device", rep.per_device);
      print_commlog_summary("flat/retain", rep.flat_retain);
      print_commlog_summary("flat/offload", rep.flat_offload);
      print_commlog_summary("flat/rematerialize", rep.flat_rematerialize);
      std::printf("per-device vs single-device reference: max |diff| = %.3e\n",
                  rep.per_device_vs_reference);
    } else if (*compare) {
      RunConfig cfg = load_run_config(compare_config);
      apply_cli_overrides(cfg, std::nullopt, std::nullopt, epsilon, delta, target_quantile,
                          quantile_lr, budget_fraction);
      const RunMode modes[] = {RunMode::kFlat, RunMode::kFixedPerLayer,
                               RunMode::kAdaptivePerLayer};
      const CompareReport rep = run_compare(cfg, compare_seeds, modes);
      std::printf("%-20s %10s %10s   per-seed\n", "mode", "mean acc", "stddev");
      for (const CompareCell& cell : rep.cells) {
        std::printf("%-20s %10.4f %10.4f   ", run_mode_name(cell.mode), cell.mean, cell.stddev);
        for (double a : cell.test_accuracy) std::printf("%.4f ", a);
        std::printf("\n");
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
