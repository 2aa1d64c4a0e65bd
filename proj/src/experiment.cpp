#include "lossprio/experiment.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"

namespace lossprio {

namespace {

std::filesystem::path seed_dir(const std::filesystem::path& root, std::uint64_t seed) {
  return root / fmt::format("seed_{}", seed);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
}

void write_snapshot(const Dataset& train, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  write_snapshot_csv(train, out);
}

/// Per-seed run directories plus the seed aggregate. Single-seed runs write
/// straight into `dir`.
void write_runs(const std::vector<RunMetrics>& runs, const std::filesystem::path& dir) {
  if (runs.size() == 1) {
    write_run_directory(runs.front(), dir);
    return;
  }
  for (const auto& r : runs) write_run_directory(r, seed_dir(dir, r.seed));
  const auto agg = aggregate_seeds(runs);
  std::filesystem::create_directories(dir);
  std::ofstream eval_out(dir / "aggregate.csv", std::ios::binary);
  write_aggregate_csv(agg, eval_out);
  std::ofstream batch_out(dir / "aggregate_batches.csv", std::ios::binary);
  write_aggregate_batches_csv(agg, batch_out);
}

bool any_diverged(const std::vector<RunMetrics>& runs) {
  for (const auto& r : runs) {
    if (r.diverged) return true;
  }
  return false;
}

double mean_best_error(const std::vector<RunMetrics>& runs) {
  double sum = 0.0;
  for (const auto& r : runs) sum += r.best_test_error();
  return sum / static_cast<double>(runs.size());
}

double mean_gate_fraction(const std::vector<RunMetrics>& runs) {
  double sum = 0.0;
  for (const auto& r : runs) sum += r.gate_on_fraction();
  return sum / static_cast<double>(runs.size());
}

struct Cell {
  CorruptionSpec corruption;
  std::string name;
};

std::vector<Cell> benchmark_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> cells;
  for (auto kind : cfg.benchmark.corruptions) {
    if (kind == CorruptionKind::none) {
      cells.push_back({{CorruptionKind::none, 0.0, cfg.corruption.seed}, "pristine"});
      continue;
    }
    for (double f : cfg.benchmark.fractions) {
      cells.push_back({{kind, f, cfg.corruption.seed},
                       fmt::format("{}_{}", to_string(kind), fmt::format("{:g}", f * 100.0))});
    }
  }
  return cells;
}

std::string speedup_text(const SpeedupReport& r) {
  return r.speedup ? fmt::format("{:.2f}", *r.speedup) : "-";
}

}  // namespace

DatasetPair build_datasets(const DatasetConfig& dataset, const CorruptionSpec& corruption) {
  DatasetPair pair;
  if (dataset.source == DatasetSource::synthetic) {
    pair.train = generate_synthetic(dataset.train_size, dataset.num_classes, dataset.feature_dim,
                                    dataset.seed, Split::train, dataset.synthetic);
    pair.test = generate_synthetic(dataset.test_size, dataset.num_classes, dataset.feature_dim,
                                   dataset.seed, Split::test, dataset.synthetic);
  } else {
    pair.train = load_idx_images(dataset.train_images, dataset.train_labels, dataset.train_size,
                                 Split::train);
    pair.test = load_idx_images(dataset.test_images, dataset.test_labels, dataset.test_size,
                                Split::test, pair.train.num_classes);
  }
  pair.train = apply_corruption(std::move(pair.train), corruption);
  return pair;
}

void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<RunMetrics> run_seeds(const DatasetPair& data, const TrainerConfig& trainer,
                                  const PrioritizerConfig& prioritizer,
                                  const std::vector<std::uint64_t>& seeds, std::size_t eval_every,
                                  std::size_t threads) {
  std::vector<RunMetrics> runs(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t i) {
    TrainerConfig t = trainer;
    PrioritizerConfig p = prioritizer;
    t.seed = seeds[i];
    p.seed = seeds[i];
    runs[i] = run_training(data.train, data.test, t, p, {.eval_every = eval_every}).metrics;
  });
  return runs;
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config,
                                         const CliOverrides& overrides,
                                         const std::filesystem::path& config_path) {
  if (overrides.output_dir) return *overrides.output_dir;
  if (!config.output_dir.empty()) return config.output_dir;
  const auto stem = config_path.stem();
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
    return std::filesystem::path(root) / stem;
  }
  return std::filesystem::path("runs") / stem;
}

int cmd_train(const std::filesystem::path& config_path, const CliOverrides& overrides,
              std::ostream& log) {
  ExperimentConfig cfg;
  std::filesystem::path out;
  DatasetPair data;
  try {
    cfg = load_config(config_path);
    if (overrides.seeds) cfg.seeds = *overrides.seeds;
    out = resolve_output_dir(cfg, overrides, config_path);
    cfg.output_dir = out;
    cfg.validate();
    data = build_datasets(cfg.dataset, cfg.corruption);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfigError;
  }

  std::filesystem::create_directories(out);
  write_text(out / "resolved_config.yaml", to_yaml(cfg));
  write_snapshot(data.train, out / "dataset.csv");

  log << fmt::format("train: {} prioritizer, {} seed(s), N={}, corrupted={} -> {}\n",
                     to_string(cfg.prioritizer.kind), cfg.seeds.size(), data.train.size(),
                     data.train.corrupted_count(), out.string());
  std::vector<RunMetrics> runs;
  try {
    runs = run_seeds(data, cfg.trainer, cfg.prioritizer, cfg.seeds, cfg.eval_every,
                     overrides.threads);
    write_runs(runs, out);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFailed;
  }

  for (const auto& r : runs) {
    log << fmt::format("  seed {}: backprops={} best_test_error={:.4f}{}\n", r.seed,
                       r.total_backprops(), r.best_test_error(), r.diverged ? " DIVERGED" : "");
  }
  return any_diverged(runs) ? kExitDiverged : kExitOk;
}

int cmd_benchmark(const std::filesystem::path& config_path, const CliOverrides& overrides,
                  std::ostream& log) {
  ExperimentConfig cfg;
  std::filesystem::path out;
  std::vector<Cell> cells;
  std::vector<DatasetPair> data;
  try {
    cfg = load_config(config_path);
    if (overrides.seeds) cfg.seeds = *overrides.seeds;
    out = resolve_output_dir(cfg, overrides, config_path);
    cfg.output_dir = out;
    cfg.validate();
    cells = benchmark_cells(cfg);
    for (const auto& cell : cells) data.push_back(build_datasets(cfg.dataset, cell.corruption));
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitConfigError;
  }
  std::filesystem::create_directories(out);
  write_text(out / "resolved_config.yaml", to_yaml(cfg));

  PrioritizerConfig standard;
  standard.kind = PrioritizerKind::uniform;
  const auto& variants = cfg.benchmark.variants;
  const std::size_t n_seeds = cfg.seeds.size();

  // results[cell][0] is the baseline, results[cell][1 + v] variant v.
  std::vector<std::vector<std::vector<RunMetrics>>> results(
      cells.size(), std::vector<std::vector<RunMetrics>>(variants.size() + 1,
                                                         std::vector<RunMetrics>(n_seeds)));
  auto run_phase = [&](std::size_t first_slot, std::size_t slots) {
    parallel_for(cells.size() * slots * n_seeds, overrides.threads, [&](std::size_t job) {
      const std::size_t seed_index = job % n_seeds;
      const std::size_t slot = first_slot + (job / n_seeds) % slots;
      const std::size_t cell = job / (n_seeds * slots);
      TrainerConfig t = cfg.trainer;
      PrioritizerConfig p = slot == 0 ? standard : variants[slot - 1].prioritizer;
      t.seed = cfg.seeds[seed_index];
      p.seed = cfg.seeds[seed_index];
      results[cell][slot][seed_index] =
          run_training(data[cell].train, data[cell].test, t, p, {.eval_every = cfg.eval_every})
              .metrics;
    });
  };

  try {
    log << fmt::format("benchmark: {} cells x ({} variants + standard) x {} seeds -> {}\n",
                       cells.size(), variants.size(), n_seeds, out.string());
    run_phase(0, 1);
    if (!variants.empty()) run_phase(1, variants.size());
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFailed;
  }

  bool diverged = false;
  try {
    std::ofstream summary(out / "summary.csv", std::ios::binary);
    summary << "corruption,fraction,variant,threshold_error,baseline_backprops,method_backprops,"
               "speedup,best_error,gate_on_fraction\n";
    std::ofstream jsonl(out / "speedups.jsonl", std::ios::binary);

    // Table layout: one row per algorithm, one column per cell.
    std::vector<std::string> table_rows(variants.size() + 1);
    std::string table_header = "algorithm";
    table_rows[0] = "standard";
    for (std::size_t v = 0; v < variants.size(); ++v) table_rows[v + 1] = variants[v].name;

    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell_dir = out / cells[c].name;
      write_snapshot(data[c].train, cell_dir / "dataset.csv");
      const auto& baseline_runs = results[c][0];
      diverged = diverged || any_diverged(baseline_runs);
      write_runs(baseline_runs, cell_dir / "standard");
      const RunMetrics baseline = aggregate_seeds(baseline_runs).mean_curve();

      table_header += "," + cells[c].name;
      table_rows[0] += fmt::format(",1.00x ({:.2f}%)", 100.0 * mean_best_error(baseline_runs));

      for (std::size_t v = 0; v < variants.size(); ++v) {
        const auto& runs = results[c][v + 1];
        diverged = diverged || any_diverged(runs);
        const auto variant_dir = cell_dir / variants[v].name;
        write_runs(runs, variant_dir);

        SpeedupReport report =
            compute_speedup(baseline, aggregate_seeds(runs).mean_curve(), cfg.benchmark.slack);
        // Reported error is the per-seed best averaged over seeds.
        report.best_error = mean_best_error(runs);
        write_text(variant_dir / "speedup.json", to_json_line(report) + "\n");

        summary << fmt::format("{},{},{},{},{},{},{},{},{}\n", to_string(cells[c].corruption.kind),
                               cells[c].corruption.fraction, variants[v].name,
                               report.threshold_error, report.baseline_backprops,
                               report.method_backprops ? fmt::format("{}", *report.method_backprops)
                                                       : "-",
                               speedup_text(report), report.best_error, mean_gate_fraction(runs));
        nlohmann::ordered_json row;
        row["corruption"] = std::string(to_string(cells[c].corruption.kind));
        row["fraction"] = cells[c].corruption.fraction;
        row["variant"] = variants[v].name;
        row["report"] = nlohmann::ordered_json::parse(to_json_line(report));
        jsonl << row.dump() << '\n';

        const std::string cell_text =
            report.speedup ? fmt::format("{:.2f}x ({:.2f}%)", *report.speedup,
                                         100.0 * report.best_error)
                           : fmt::format("- ({:.2f}%)", 100.0 * report.best_error);
        table_rows[v + 1] += "," + cell_text;
        log << fmt::format("  {:>22} {:>10}: speedup {:>5}  best error {:.4f}\n", cells[c].name,
                           variants[v].name, speedup_text(report), report.best_error);
      }
    }

    std::ofstream table(out / "summary_table.csv", std::ios::binary);
    table << table_header << '\n';
    for (const auto& row : table_rows) table << row << '\n';
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFailed;
  }
  return diverged ? kExitDiverged : kExitOk;
}

}  // namespace lossprio
