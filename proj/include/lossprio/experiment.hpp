#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "lossprio/config.hpp"
#include "lossprio/harness.hpp"

namespace lossprio {

struct DatasetPair {
  Dataset train;
  Dataset test;
};

/// Builds the clean train/test splits and corrupts the train split.
DatasetPair build_datasets(const DatasetConfig& dataset, const CorruptionSpec& corruption);

/// Runs `count` independent jobs on up to `threads` workers. Jobs must not share
/// mutable state; the first exception thrown by any job is rethrown after all finish.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job);

/// One run per seed. Each run uses the seed for both trainer and prioritizer.
std::vector<RunMetrics> run_seeds(const DatasetPair& data, const TrainerConfig& trainer,
                                  const PrioritizerConfig& prioritizer,
                                  const std::vector<std::uint64_t>& seeds, std::size_t eval_every,
                                  std::size_t threads);

/// Command-line flags that take precedence over the config file.
struct CliOverrides {
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::size_t threads = 1;
};

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "LOSSPRIO_OUTPUT_ROOT";

/// Output directory: --out, then the config's output_dir, then
/// $LOSSPRIO_OUTPUT_ROOT/<config stem>, then ./runs/<config stem>.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config,
                                         const CliOverrides& overrides,
                                         const std::filesystem::path& config_path);

/// Exit codes shared by the subcommands.
enum ExitCode : int { kExitOk = 0, kExitConfigError = 1, kExitDiverged = 2, kExitFailed = 3 };

int cmd_train(const std::filesystem::path& config_path, const CliOverrides& overrides,
              std::ostream& log);
int cmd_benchmark(const std::filesystem::path& config_path, const CliOverrides& overrides,
                  std::ostream& log);
int cmd_selftest(std::ostream& log);

}  // namespace lossprio
