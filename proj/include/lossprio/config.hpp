#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lossprio/dataset.hpp"
#include "lossprio/errors.hpp"
#include "lossprio/model.hpp"
#include "lossprio/prioritizer.hpp"

namespace lossprio {

/// A configuration problem tied to a line of the config file.
class ConfigFileError : public ConfigError {
 public:
  ConfigFileError(const std::string& file, std::size_t line, const std::string& message)
      : ConfigError(file + ":" + std::to_string(line) + ": " + message), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

enum class DatasetSource { synthetic, idx };

struct DatasetConfig {
  DatasetSource source = DatasetSource::synthetic;
  std::size_t train_size = 5000;
  std::size_t test_size = 1000;
  std::size_t num_classes = 10;
  std::size_t feature_dim = 32;
  std::uint64_t seed = 1;
  SyntheticOptions synthetic;

  std::filesystem::path train_images;
  std::filesystem::path train_labels;
  std::filesystem::path test_images;
  std::filesystem::path test_labels;
};

struct Variant {
  std::string name;
  PrioritizerConfig prioritizer;
};

struct BenchmarkConfig {
  std::vector<CorruptionKind> corruptions{CorruptionKind::none, CorruptionKind::random_label,
                                          CorruptionKind::shuffled_pixels,
                                          CorruptionKind::gaussian};
  std::vector<double> fractions{0.25, 0.5};
  double slack = 1.2;
  /// Compared against the uniform baseline in every grid cell.
  std::vector<Variant> variants = default_variants();

  static std::vector<Variant> default_variants();
};

/// Run seeds drive model init, data order and prioritizer draws; the trainer
/// and prioritizer seed fields are overwritten per run.
struct ExperimentConfig {
  DatasetConfig dataset;
  CorruptionSpec corruption;
  TrainerConfig trainer;
  PrioritizerConfig prioritizer;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir;
  std::size_t eval_every = 1280;
  BenchmarkConfig benchmark;

  void validate() const;
};

/// Parses a YAML config. Unknown keys and bad values raise ConfigFileError with
/// the offending line; omitted keys keep their defaults.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text, const std::string& source_name = "<config>");

/// Every field, defaults included; parse_config(to_yaml(c)) reproduces c.
std::string to_yaml(const ExperimentConfig& config);

}  // namespace lossprio
