#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "lossprio/random.hpp"

namespace lossprio {

enum class CorruptionKind { none, random_label, shuffled_pixels, gaussian };

std::string_view to_string(CorruptionKind kind);
/// Throws ConfigError on an unknown name.
CorruptionKind parse_corruption_kind(std::string_view name);

enum class Split { train, test };

struct Example {
  std::size_t id = 0;
  std::vector<double> features;
  std::size_t label = 0;
  CorruptionKind corruption = CorruptionKind::none;

  bool corrupted() const noexcept { return corruption != CorruptionKind::none; }
};

/// Ordered collection of examples. Example ids equal their position.
struct Dataset {
  std::vector<Example> examples;
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;
  Split split = Split::train;

  std::size_t size() const noexcept { return examples.size(); }
  std::size_t corrupted_count() const;
};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::none;
  double fraction = 0.0;
  std::uint64_t seed = 0;
};

/// Shape of the synthetic task. Each class is a mixture of Gaussian modes whose
/// centres are drawn once per task seed; later modes are rarer, which gives every
/// class a tail of atypical examples.
struct SyntheticOptions {
  /// Standard deviation of mode centres around the origin. Smaller means more overlap.
  double separation = 1.0;
  std::size_t modes_per_class = 3;
  /// Relative frequency of mode m is decay^m.
  double mode_decay = 0.35;
  /// Per-coordinate standard deviation of points around their mode centre.
  double noise = 1.0;
};

/// Draws `num_examples` points of the synthetic task. Train and test splits
/// generated with the same seed share the task (class centres) but not samples.
Dataset generate_synthetic(std::size_t num_examples, std::size_t num_classes,
                           std::size_t feature_dim, std::uint64_t seed,
                           Split split = Split::train, const SyntheticOptions& options = {});

/// Reads an IDX image file (unsigned byte, 3 dims) and matching IDX label file.
/// Pixels are scaled to [0,1]. `limit` is clamped to the file count.
/// num_classes == 0 infers K as the largest label + 1.
Dataset load_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t limit, Split split = Split::train,
                        std::size_t num_classes = 0);

Example corrupt_random_label(Example example, std::size_t num_classes, Rng& rng);

std::vector<std::size_t> make_task_permutation(std::size_t feature_dim, std::uint64_t seed);

/// features'[j] = features[perm[j]].
Example corrupt_shuffle_pixels(Example example, std::span<const std::size_t> perm);

struct GaussianParams {
  double mean = 0.0;
  double variance = 0.0;  // population variance
};

GaussianParams moment_match(std::span<const double> features);

/// Replaces every feature with an i.i.d. draw from N(params.mean, params.variance).
Example corrupt_gaussian_with(Example example, const GaussianParams& params, Rng& rng);

/// corrupt_gaussian_with using the example's own moments.
Example corrupt_gaussian(Example example, Rng& rng);

/// Corrupts exactly floor(fraction * N) distinct train examples. The chosen subset
/// depends only on spec.seed, so every corruption kind hits the same ids.
Dataset apply_corruption(Dataset dataset, const CorruptionSpec& spec);

/// CSV with header `id,label,corrupted,kind`.
void write_snapshot_csv(const Dataset& dataset, std::ostream& out);

}  // namespace lossprio
