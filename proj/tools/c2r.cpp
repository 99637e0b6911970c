// SPDX-License-Identifier: Apache-2.0
#include "c2r/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"c2r: robust dataset distillation toolkit"};
  app.require_subcommand(1);
  c2r::CommandOptions opt;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, std::string("output directory; relative paths resolve under $") + c2r::kOutRootEnv);
    sub->add_option("--seed", seed, "override the config seed");
  };

  auto* distill = app.add_subcommand("distill", "distill a synthetic set");
  common(distill);
  distill->add_flag("--trace", opt.trace, "dump per-epoch perturbation scores to scores.csv");

  auto* eval = app.add_subcommand("eval", "train a student on a checkpoint and attack it");
  common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "synthetic checkpoint")->required();

  auto* bench = app.add_subcommand("attack-bench", "PGD vs LS-PGD gradient-call and timing benchmark");
  common(bench);

  auto* report = app.add_subcommand("report", "aggregate eval directories into DR tables");
  report->add_option("inputs", opt.inputs, "eval output directories")->required();
  report->add_option("--out", opt.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : c2r::kExitConfig;
  }
  for (auto* sub : {distill, eval, bench})
    if (sub->parsed() && sub->count("--seed")) opt.seed = seed;

  if (distill->parsed()) return c2r::cmd_distill(opt, std::cout, std::cerr);
  if (eval->parsed()) return c2r::cmd_eval(opt, std::cout, std::cerr);
  if (bench->parsed()) return c2r::cmd_attack_bench(opt, std::cout, std::cerr);
  return c2r::cmd_report(opt, std::cout, std::cerr);
}
