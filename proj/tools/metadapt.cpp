// metadapt: train, sweep, eval, compare.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metadapt/cli.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* config_opt = nullptr;

  void attach(CLI::App* app) {
    config_opt = app->add_option("--config", config, "configuration file (key = value)");
    seed_opt = app->add_option("--seed", seed, "overrides the configured seed");
    app->add_option("--set", overrides, "override one key, e.g. --set inner.alpha=0")->take_all();
  }

  [[nodiscard]] metadapt::cli::CommonArgs args() const {
    metadapt::cli::CommonArgs a;
    if (config_opt->count()) a.config_path = config;
    if (seed_opt->count()) a.seed = seed;
    a.overrides = overrides;
    return a;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Second-order MAML on point-mass tasks with a negative-adaptation audit"};
  app.require_subcommand(1);

  metadapt::cli::TrainArgs train;
  CommonFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "meta-train and write final.ckpt, train.csv, config.resolved");
  train_flags.attach(train_cmd);
  train_cmd->add_option("--out", train.out_dir, "output directory")->required();
  train_cmd->add_option("--progress", train.progress_every, "print a progress line every N iterations");

  metadapt::cli::SweepArgs sweep;
  CommonFlags sweep_flags;
  auto* sweep_cmd = app.add_subcommand("sweep", "evaluate pre/post adaptation over the task grid");
  sweep_flags.attach(sweep_cmd);
  sweep_cmd->add_option("--checkpoint", sweep.checkpoint, "policy checkpoint")->required();
  sweep_cmd->add_option("--out", sweep.out_csv, "output CSV")->required();

  metadapt::cli::EvalArgs eval;
  CommonFlags eval_flags;
  auto* eval_cmd = app.add_subcommand("eval", "print one task's adaptation report as key=value lines");
  eval_flags.attach(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "policy checkpoint")->required();
  eval_cmd->add_option("--task", eval.task_param, "task parameter (goal velocity, or direction -1/1)")->required();

  metadapt::cli::CompareArgs compare;
  CommonFlags compare_flags;
  auto* compare_cmd = app.add_subcommand("compare", "sweep two checkpoints into one CSV with _a/_b columns");
  compare_flags.attach(compare_cmd);
  compare_cmd->add_option("--checkpoint-a", compare.checkpoint_a, "first checkpoint")->required();
  compare_cmd->add_option("--checkpoint-b", compare.checkpoint_b, "second checkpoint")->required();
  compare_cmd->add_option("--out", compare.out_csv, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : metadapt::cli::kUsage;
  }

  if (train_cmd->parsed()) {
    train.common = train_flags.args();
    return metadapt::cli::cmd_train(train, std::cout, std::cerr);
  }
  if (sweep_cmd->parsed()) {
    sweep.common = sweep_flags.args();
    return metadapt::cli::cmd_sweep(sweep, std::cout, std::cerr);
  }
  if (eval_cmd->parsed()) {
    eval.common = eval_flags.args();
    return metadapt::cli::cmd_eval(eval, std::cout, std::cerr);
  }
  compare.common = compare_flags.args();
  return metadapt::cli::cmd_compare(compare, std::cout, std::cerr);
}
