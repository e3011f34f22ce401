// damsgrad: run, tune, compare and analyze d-AmsGrad experiments.
//
//   damsgrad run config.json [--seed S ...] [--jobs N] [--out DIR]
//            [--stop-after K] [--resume DIR]
//   damsgrad tune config.json [--out DIR]
//   damsgrad compare config.json --modes adam amsgrad 0.99999 [--jobs N]
//   damsgrad analyze-replacement config.json [--out DIR]
//
// Without --out, files go to the config's output_dir, else
// $DAMSGRAD_OUTPUT_ROOT/<benchmark>-<optimizer>, else ./damsgrad-out/...

#include <iostream>

#include <CLI11.hpp>

#include "damsgrad/errors.hpp"
#include "damsgrad/experiment.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
  int jobs = 1;
  std::string out;
};

void add_common(CLI::App *cmd, Common &c) {
  cmd->add_option("config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seeds, "replace the config's seeds with these");
  cmd->add_option("--jobs,-j", c.jobs, "seeds run in parallel")->check(CLI::PositiveNumber);
  cmd->add_option("--out,-o", c.out, "output directory");
}

damsgrad::ExperimentConfig load(const Common &c) {
  auto cfg = damsgrad::load_config(c.config);
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  return cfg;
}

damsgrad::RunOptions options_of(const Common &c) {
  damsgrad::RunOptions o;
  if (!c.out.empty()) o.output_dir = c.out;
  o.jobs = c.jobs;
  return o;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"d-AmsGrad experiment runner"};
  app.require_subcommand(1);

  Common run_args, tune_args, compare_args, analyze_args;
  std::int64_t stop_after = 0;
  std::string resume;
  std::vector<std::string> modes;

  auto *run = app.add_subcommand("run", "run every seed and write per-seed CSVs and summary.json");
  add_common(run, run_args);
  run->add_option("--stop-after", stop_after, "stop after K steps and write checkpoints")
      ->check(CLI::NonNegativeNumber);
  run->add_option("--resume", resume, "directory of checkpoint-seed<S>.json files")->check(CLI::ExistingDirectory);

  auto *tune = app.add_subcommand("tune", "random search over the tuner section");
  add_common(tune, tune_args);

  auto *compare = app.add_subcommand("compare", "paired comparison of beta3 modes");
  add_common(compare, compare_args);
  compare->add_option("--modes", modes, "adam, amsgrad, d-amsgrad or a beta3 value")->required();

  auto *analyze = app.add_subcommand("analyze-replacement", "predicted vs simulated first replacement");
  add_common(analyze, analyze_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      auto cfg = load(run_args);
      auto opts = options_of(run_args);
      if (run->count("--stop-after")) opts.stop_after = stop_after;
      if (!resume.empty()) opts.resume_from = resume;
      const auto result = damsgrad::run_experiment(cfg, opts);
      for (const auto &s : result.seeds) {
        if (s.ok) {
          std::cout << "seed " << s.seed << ": " << s.file.string() << "\n";
        } else {
          std::cerr << "seed " << s.seed << " failed: " << s.error << "\n";
        }
      }
      if (!opts.stop_after) std::cout << "summary: " << (result.output_dir / "summary.json").string() << "\n";
      return result.exit_status;
    }
    if (*tune) {
      const auto out = damsgrad::tune_experiment(load(tune_args), options_of(tune_args));
      if (out.result.best) {
        std::cout << "best alpha " << damsgrad::format_double(out.result.best->alpha) << " objective "
                  << damsgrad::format_double(out.result.best_objective) << " (trial " << out.result.best_index
                  << ")\n";
      } else {
        std::cerr << "no winner: every trial diverged\n";
      }
      std::cout << "trials: " << (out.output_dir / "tune-trials.csv").string() << "\n";
      return out.exit_status;
    }
    if (*compare) {
      const auto cfg = load(compare_args);
      const auto report = damsgrad::compare_experiment(cfg, modes, options_of(compare_args));
      std::cout << report.summary["final_loss_median"].dump() << "\n";
      if (report.summary.contains("recovery_wins")) std::cout << "recovery wins " << report.summary["recovery_wins"].dump() << "\n";
      return 0;
    }
    if (*analyze) {
      const auto cfg = load(analyze_args);
      const auto rows = damsgrad::analyze_experiment(cfg, options_of(analyze_args));
      std::cout << damsgrad::replacement_csv(rows);
      return 0;
    }
  } catch (const damsgrad::ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
