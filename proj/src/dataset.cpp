#include "lossprio/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <string>

#include <fmt/format.h>

#include "lossprio/errors.hpp"

namespace lossprio {

namespace {

constexpr std::uint64_t kCentreStream = 0;
constexpr std::uint64_t kTrainSampleStream = 1;
constexpr std::uint64_t kTestSampleStream = 2;
constexpr std::uint64_t kSubsetStream = 10;
constexpr std::uint64_t kContentStream = 11;
constexpr std::uint64_t kPermutationStream = 12;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IngestionError("cannot open " + path.string(), 0);
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw IngestionError("truncated IDX header in " + path.string(), offset);
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
};

// Magic: two zero bytes, type code (0x08 = unsigned byte), number of dimensions.
IdxHeader parse_idx_header(const std::vector<std::uint8_t>& bytes, std::size_t expected_rank,
                           const std::filesystem::path& path) {
  const std::uint32_t magic = read_be32(bytes, 0, path);
  const std::uint32_t expected_magic = 0x00000800u | static_cast<std::uint32_t>(expected_rank);
  if (magic != expected_magic) {
    throw IngestionError(fmt::format("bad IDX magic number 0x{:08x} in {} (expected 0x{:08x})",
                                     magic, path.string(), expected_magic),
                         0);
  }
  IdxHeader header;
  for (std::size_t d = 0; d < expected_rank; ++d) {
    header.dims.push_back(read_be32(bytes, 4 + 4 * d, path));
  }
  header.payload_offset = 4 + 4 * expected_rank;
  std::size_t payload = 1;
  for (auto dim : header.dims) payload *= dim;
  if (bytes.size() < header.payload_offset + payload) {
    throw IngestionError(fmt::format("truncated IDX payload in {}: need {} bytes, have {}",
                                     path.string(), header.payload_offset + payload, bytes.size()),
                         bytes.size());
  }
  return header;
}

}  // namespace

std::string_view to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::random_label: return "random_label";
    case CorruptionKind::shuffled_pixels: return "shuffled_pixels";
    case CorruptionKind::gaussian: return "gaussian";
  }
  return "none";
}

CorruptionKind parse_corruption_kind(std::string_view name) {
  for (auto kind : {CorruptionKind::none, CorruptionKind::random_label,
                    CorruptionKind::shuffled_pixels, CorruptionKind::gaussian}) {
    if (name == to_string(kind)) return kind;
  }
  throw ConfigError(fmt::format("unknown corruption kind '{}'", name));
}

std::size_t Dataset::corrupted_count() const {
  return static_cast<std::size_t>(std::count_if(
      examples.begin(), examples.end(), [](const Example& e) { return e.corrupted(); }));
}

Dataset generate_synthetic(std::size_t num_examples, std::size_t num_classes,
                           std::size_t feature_dim, std::uint64_t seed, Split split,
                           const SyntheticOptions& options) {
  if (num_classes < 2 || feature_dim < 2 || num_examples < num_classes) {
    throw ConfigError(fmt::format(
        "synthetic task needs K >= 2, D >= 2 and N >= K (got N={}, K={}, D={})", num_examples,
        num_classes, feature_dim));
  }
  if (options.modes_per_class == 0 || !(options.separation >= 0.0) ||
      !(options.noise > 0.0) || !(options.mode_decay > 0.0)) {
    throw ConfigError("synthetic options need modes_per_class >= 1, separation >= 0, noise > 0 "
                      "and mode_decay > 0");
  }

  std::normal_distribution<double> gauss(0.0, 1.0);

  Rng centre_rng = make_rng(seed, kCentreStream);
  const std::size_t modes = options.modes_per_class;
  std::vector<std::vector<double>> centres(num_classes * modes, std::vector<double>(feature_dim));
  for (auto& centre : centres) {
    for (auto& c : centre) c = options.separation * gauss(centre_rng);
  }

  std::vector<double> mode_weights(modes);
  for (std::size_t m = 0; m < modes; ++m) mode_weights[m] = std::pow(options.mode_decay, m);
  std::discrete_distribution<std::size_t> pick_mode(mode_weights.begin(), mode_weights.end());

  Rng sample_rng =
      make_rng(seed, split == Split::train ? kTrainSampleStream : kTestSampleStream);

  Dataset ds;
  ds.num_classes = num_classes;
  ds.feature_dim = feature_dim;
  ds.split = split;
  ds.examples.resize(num_examples);
  for (std::size_t i = 0; i < num_examples; ++i) {
    Example& ex = ds.examples[i];
    ex.id = i;
    ex.label = i % num_classes;
    const auto& centre = centres[ex.label * modes + pick_mode(sample_rng)];
    ex.features.resize(feature_dim);
    for (std::size_t j = 0; j < feature_dim; ++j) {
      ex.features[j] = centre[j] + options.noise * gauss(sample_rng);
    }
  }
  return ds;
}

Dataset load_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t limit, Split split, std::size_t num_classes) {
  if (limit < 1) throw ConfigError("IDX limit must be >= 1");

  const auto image_bytes = read_file(images);
  const auto label_bytes = read_file(labels);
  const IdxHeader ih = parse_idx_header(image_bytes, 3, images);
  const IdxHeader lh = parse_idx_header(label_bytes, 1, labels);
  if (ih.dims[0] != lh.dims[0]) {
    // Offset of the label count field.
    throw IngestionError(fmt::format("label/image count mismatch: {} images in {}, {} labels in {}",
                                     ih.dims[0], images.string(), lh.dims[0], labels.string()),
                         4);
  }

  const std::size_t count = std::min<std::size_t>(limit, ih.dims[0]);
  const std::size_t dim = std::size_t{ih.dims[1]} * ih.dims[2];
  if (dim == 0) throw IngestionError("IDX images have zero pixels in " + images.string(), 8);

  Dataset ds;
  ds.feature_dim = dim;
  ds.split = split;
  ds.examples.resize(count);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    Example& ex = ds.examples[i];
    ex.id = i;
    ex.label = label_bytes[lh.payload_offset + i];
    max_label = std::max(max_label, ex.label);
    ex.features.resize(dim);
    const std::uint8_t* px = image_bytes.data() + ih.payload_offset + i * dim;
    for (std::size_t j = 0; j < dim; ++j) ex.features[j] = px[j] / 255.0;
  }

  if (num_classes == 0) {
    num_classes = max_label + 1;
  } else if (max_label >= num_classes) {
    throw IngestionError(fmt::format("label {} out of range for K={} in {}", max_label,
                                     num_classes, labels.string()),
                         lh.payload_offset);
  }
  ds.num_classes = num_classes;
  return ds;
}

Example corrupt_random_label(Example example, std::size_t num_classes, Rng& rng) {
  if (num_classes == 0 || example.label >= num_classes) {
    throw ConfigError(fmt::format("label {} out of range for K={}", example.label, num_classes));
  }
  example.label = std::uniform_int_distribution<std::size_t>(0, num_classes - 1)(rng);
  example.corruption = CorruptionKind::random_label;
  return example;
}

std::vector<std::size_t> make_task_permutation(std::size_t feature_dim, std::uint64_t seed) {
  std::vector<std::size_t> perm(feature_dim);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

Example corrupt_shuffle_pixels(Example example, std::span<const std::size_t> perm) {
  if (perm.size() != example.features.size()) {
    throw ConfigError(fmt::format("permutation length {} does not match feature dimension {}",
                                  perm.size(), example.features.size()));
  }
  std::vector<double> shuffled(perm.size());
  for (std::size_t j = 0; j < perm.size(); ++j) shuffled[j] = example.features.at(perm[j]);
  example.features = std::move(shuffled);
  example.corruption = CorruptionKind::shuffled_pixels;
  return example;
}

GaussianParams moment_match(std::span<const double> features) {
  if (features.empty()) return {};
  // Rounding in sum / n would otherwise leave a constant input with a tiny variance.
  if (std::all_of(features.begin(), features.end(),
                  [&](double v) { return v == features.front(); })) {
    return {features.front(), 0.0};
  }
  const double n = static_cast<double>(features.size());
  double sum = 0.0;
  for (double v : features) sum += v;
  const double mean = sum / n;
  double sq = 0.0;
  for (double v : features) sq += (v - mean) * (v - mean);
  return {mean, sq / n};
}

Example corrupt_gaussian_with(Example example, const GaussianParams& params, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double stddev = std::sqrt(params.variance);
  for (auto& v : example.features) v = params.mean + stddev * gauss(rng);
  example.corruption = CorruptionKind::gaussian;
  return example;
}

Example corrupt_gaussian(Example example, Rng& rng) {
  const GaussianParams params = moment_match(example.features);
  return corrupt_gaussian_with(std::move(example), params, rng);
}

Dataset apply_corruption(Dataset dataset, const CorruptionSpec& spec) {
  if (!(spec.fraction >= 0.0 && spec.fraction <= 1.0)) {
    throw ConfigError(fmt::format("corruption fraction {} outside [0, 1]", spec.fraction));
  }
  if (dataset.split != Split::train) {
    throw ConfigError("corruption applies to the train split only");
  }
  if (spec.kind == CorruptionKind::none || spec.fraction == 0.0) return dataset;

  const std::size_t n = dataset.size();
  // The epsilon keeps e.g. 0.29 * 100 from flooring to 28.
  const auto count = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::floor(spec.fraction * static_cast<double>(n) + 1e-9)));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng subset_rng = make_rng(spec.seed, kSubsetStream);
  std::shuffle(order.begin(), order.end(), subset_rng);
  order.resize(count);
  std::sort(order.begin(), order.end());

  Rng content_rng = make_rng(spec.seed, kContentStream);
  std::vector<std::size_t> perm;
  if (spec.kind == CorruptionKind::shuffled_pixels) {
    perm = make_task_permutation(dataset.feature_dim, derive_seed(spec.seed, kPermutationStream));
  }

  for (std::size_t idx : order) {
    Example& ex = dataset.examples[idx];
    switch (spec.kind) {
      case CorruptionKind::random_label:
        ex = corrupt_random_label(std::move(ex), dataset.num_classes, content_rng);
        break;
      case CorruptionKind::shuffled_pixels:
        ex = corrupt_shuffle_pixels(std::move(ex), perm);
        break;
      case CorruptionKind::gaussian:
        ex = corrupt_gaussian(std::move(ex), content_rng);
        break;
      case CorruptionKind::none:
        break;
    }
  }
  return dataset;
}

void write_snapshot_csv(const Dataset& dataset, std::ostream& out) {
  out << "id,label,corrupted,kind\n";
  for (const auto& ex : dataset.examples) {
    out << ex.id << ',' << ex.label << ',' << (ex.corrupted() ? 1 : 0) << ','
        << to_string(ex.corruption) << '\n';
  }
}

}  // namespace lossprio
