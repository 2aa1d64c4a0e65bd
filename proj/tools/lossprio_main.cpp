#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lossprio/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Loss-based example prioritization experiments"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::size_t threads = 1;

  auto add_run_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "Experiment config (YAML)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "Output directory (created if missing)");
    cmd->add_option("--seed", seeds, "Comma-separated run seeds, overriding the config")
        ->delimiter(',');
    cmd->add_option("--threads", threads, "Concurrent runs")->check(CLI::PositiveNumber);
  };

  auto* train = app.add_subcommand("train", "Run one prioritizer for each seed");
  add_run_flags(train);
  auto* benchmark = app.add_subcommand("benchmark", "Run the corruption x prioritizer grid");
  add_run_flags(benchmark);
  auto* selftest = app.add_subcommand("selftest", "Run the fast property checks");

  CLI11_PARSE(app, argc, argv);

  lossprio::CliOverrides overrides;
  if (!out.empty()) overrides.output_dir = out;
  if (!seeds.empty()) overrides.seeds = seeds;
  overrides.threads = threads;

  if (train->parsed()) return lossprio::cmd_train(config, overrides, std::cerr);
  if (benchmark->parsed()) return lossprio::cmd_benchmark(config, overrides, std::cerr);
  if (selftest->parsed()) return lossprio::cmd_selftest(std::cout);
  return lossprio::kExitConfigError;
}
