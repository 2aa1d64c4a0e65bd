// Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "lossprio/experiment.hpp"
#include "lossprio/stats.hpp"

using namespace lossprio;
namespace fs = std::filesystem;

namespace {

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

struct Outcome {
  bool passed = false;
  std::string measured;
};

struct Criterion {
  int number;
  std::string name;
  double time_limit_s;
  std::function<Outcome()> check;
};

ExperimentConfig default_task(CorruptionKind kind = CorruptionKind::none, double fraction = 0.0) {
  ExperimentConfig cfg;
  cfg.corruption.kind = kind;
  cfg.corruption.fraction = fraction;
  return cfg;
}

PrioritizerConfig prioritizer(PrioritizerKind kind, double beta = 1.0) {
  PrioritizerConfig p;
  p.kind = kind;
  p.beta = beta;
  return p;
}

std::vector<RunMetrics> run(const ExperimentConfig& cfg, const DatasetPair& data,
                            const PrioritizerConfig& p) {
  return run_seeds(data, cfg.trainer, p, kSeeds, cfg.eval_every, 1);
}

double mean_best(const std::vector<RunMetrics>& runs) {
  double sum = 0.0;
  for (const auto& r : runs) sum += r.best_test_error();
  return sum / static_cast<double>(runs.size());
}

double sb_rate(double beta, std::uint64_t seed) {
  Rng scores(seed);
  Rng coins(seed + 100);
  ScoreHistogram hist(1024);
  CandidateBuffer buf(128);
  std::vector<ScoredId> scored(100000);
  for (std::size_t i = 0; i < scored.size(); ++i) scored[i] = {i, uniform01(scores)};
  const auto batches = sb_step(scored, hist, buf, beta, coins, 128);
  return static_cast<double>(batches.size() * 128 + buf.size()) / 100000.0;
}

Outcome selectivity_law() {
  Outcome o{true, ""};
  for (double beta : {0.0, 1.0, 2.0}) {
    const double rate = sb_rate(beta, 40 + static_cast<std::uint64_t>(beta));
    const double expected = 1.0 / (beta + 1.0);
    o.passed = o.passed && std::abs(rate - expected) <= 0.01;
    o.measured += fmt::format("beta={} rate={:.4f} (want {:.4f}) ", beta, rate, expected);
  }
  return o;
}

Outcome gradient_correctness() {
  const std::vector<std::size_t> widths{8, 16, 4};
  const Mlp net = make_mlp(widths, 17);
  Rng rng(18);
  std::normal_distribution<double> gauss;
  Batch batch;
  batch.inputs.resize(8, 8);
  for (Eigen::Index i = 0; i < batch.inputs.size(); ++i) batch.inputs.data()[i] = gauss(rng);
  for (std::size_t i = 0; i < 8; ++i) batch.labels.push_back(i % 4);
  const double err = gradient_check(net, batch, 1e-4, net.parameter_count());
  return {err < 1e-4, fmt::format("max relative error {:.3e} over all {} parameters", err,
                                  net.parameter_count())};
}

Outcome sgd_equivalence() {
  const ExperimentConfig cfg = default_task();
  const DatasetPair data = build_datasets(cfg.dataset, cfg.corruption);
  RunOptions opts;
  opts.record_batches = true;
  const RunResult uniform = run_training(data.train, data.test, cfg.trainer,
                                         prioritizer(PrioritizerKind::uniform), opts);
  const RunResult sb = run_training(data.train, data.test, cfg.trainer,
                                    prioritizer(PrioritizerKind::sb_loss, 0.0), opts);
  bool params_equal = uniform.model.parameter_count() == sb.model.parameter_count();
  for (std::size_t p = 0; params_equal && p < uniform.model.parameter_count(); ++p) {
    params_equal = uniform.model.parameter(p) == sb.model.parameter(p);
  }
  const bool batches_equal = uniform.batch_log == sb.batch_log;
  return {params_equal && batches_equal,
          fmt::format("{} batches identical={} final parameters identical={}",
                      uniform.batch_log.size(), batches_equal, params_equal)};
}

Outcome clean_speedup() {
  const ExperimentConfig cfg = default_task();
  const DatasetPair data = build_datasets(cfg.dataset, cfg.corruption);
  const auto base = run(cfg, data, prioritizer(PrioritizerKind::uniform));
  const auto sb = run(cfg, data, prioritizer(PrioritizerKind::sb_loss, 1.0));
  const SpeedupReport r =
      compute_speedup(aggregate_seeds(base).mean_curve(), aggregate_seeds(sb).mean_curve());
  const bool ok = r.speedup && *r.speedup > 1.0;
  return {ok, fmt::format("threshold {:.4f}: standard {} backprops, SB {} -> speedup {}",
                          r.threshold_error, r.baseline_backprops,
                          r.method_backprops ? fmt::format("{}", *r.method_backprops) : "-",
                          r.speedup ? fmt::format("{:.2f}x", *r.speedup) : "-")};
}

struct LateCounts {
  std::uint64_t corrupted = 0;
  std::uint64_t total = 0;
  double fraction() const { return static_cast<double>(corrupted) / static_cast<double>(total); }
};

// Corrupted examples among back-propagated examples over the second half of each run.
LateCounts late_corruption(const std::vector<RunMetrics>& runs, std::size_t batch_size) {
  LateCounts c;
  for (const auto& r : runs) {
    for (std::size_t i = r.batches.size() / 2; i < r.batches.size(); ++i) {
      c.corrupted += static_cast<std::uint64_t>(
          std::llround(r.batches[i].corrupted_fraction * static_cast<double>(batch_size)));
      c.total += batch_size;
    }
  }
  return c;
}

Outcome corrupted_oversampling() {
  const ExperimentConfig cfg = default_task(CorruptionKind::random_label, 0.25);
  const DatasetPair data = build_datasets(cfg.dataset, cfg.corruption);
  const auto base = late_corruption(run(cfg, data, prioritizer(PrioritizerKind::uniform)),
                                    cfg.trainer.batch_size);
  const auto sb = late_corruption(run(cfg, data, prioritizer(PrioritizerKind::sb_loss, 1.0)),
                                  cfg.trainer.batch_size);
  const double p = binomial_upper_tail(sb.corrupted, sb.total, 0.25);
  const bool ok = sb.fraction() > 0.30 && std::abs(base.fraction() - 0.25) <= 0.02 && p < 0.001;
  return {ok, fmt::format("SB {:.4f} ({} of {}), standard {:.4f}, binomial p={:.3g}", sb.fraction(),
                          sb.corrupted, sb.total, base.fraction(), p)};
}

Outcome corruption_degradation() {
  const ExperimentConfig cfg = default_task(CorruptionKind::random_label, 0.5);
  const DatasetPair data = build_datasets(cfg.dataset, cfg.corruption);
  const double base = mean_best(run(cfg, data, prioritizer(PrioritizerKind::uniform)));
  const double sb = mean_best(run(cfg, data, prioritizer(PrioritizerKind::sb_loss, 2.0)));
  return {sb - base > 0.0,
          fmt::format("best error SB(beta=2) {:.4f} vs standard {:.4f}, difference {:+.4f}", sb,
                      base, sb - base)};
}

Outcome vr_gate() {
  Rng rng(31);
  std::vector<std::uint64_t> counts(4, 0);
  bool gate_on = false;
  for (int i = 0; i < 100000; ++i) {
    SamplingPool pool(4, 0.0);
    for (std::size_t id = 0; id < 4; ++id) pool.push(id, 0.7);
    const PoolDraw d = draw_from_pool(pool, 1, rng);
    gate_on = gate_on || d.gate_on;
    ++counts[d.ids.front()];
  }
  const double chi_p = chi_square_uniform_pvalue(counts);

  std::uint64_t heavy = 0;
  bool gate_off = false;
  for (int i = 0; i < 100000; ++i) {
    SamplingPool pool(2, 0.0);
    pool.push(0, 4.0);
    pool.push(1, 1.0);
    const PoolDraw d = draw_from_pool(pool, 1, rng);
    gate_off = gate_off || !d.gate_on;
    heavy += d.ids.front() == 0 ? 1 : 0;
  }
  const double freq = static_cast<double>(heavy) / 100000.0;
  const bool ok = !gate_on && chi_p > 0.01 && !gate_off && std::abs(freq - 0.8) <= 0.01 &&
                  std::abs((1.0 - freq) - 0.2) <= 0.01;
  return {ok, fmt::format("constant: gate off={} chi-square p={:.4f}; 4:1: gate on={} "
                          "freq {:.4f}/{:.4f} (want 0.8/0.2)",
                          !gate_on, chi_p, !gate_off, freq, 1.0 - freq)};
}

Outcome sbe_vs_sb() {
  const ExperimentConfig cfg = default_task(CorruptionKind::random_label, 0.5);
  const DatasetPair data = build_datasets(cfg.dataset, cfg.corruption);
  const auto sb = run(cfg, data, prioritizer(PrioritizerKind::sb_loss, 1.0));
  const auto sbe = run(cfg, data, prioritizer(PrioritizerKind::sb_entropy, 1.0));
  double sb_sum = 0.0;
  double sbe_sum = 0.0;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    const std::size_t budget = std::min(sb[i].total_backprops(), sbe[i].total_backprops());
    sb_sum += best_error_within(sb[i], budget);
    sbe_sum += best_error_within(sbe[i], budget);
  }
  const double n = static_cast<double>(kSeeds.size());
  return {sbe_sum / n <= sb_sum / n,
          fmt::format("best error at equal budget: SBE {:.4f} vs SB {:.4f}", sbe_sum / n,
                      sb_sum / n)};
}

Outcome corruption_invariants() {
  const Dataset ds = generate_synthetic(500, 10, 64, 21);
  const auto perm = make_task_permutation(64, 22);
  bool multiset = true;
  bool moments = true;
  for (const auto& ex : ds.examples) {
    auto a = corrupt_shuffle_pixels(ex, perm).features;
    auto b = ex.features;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    multiset = multiset && a == b;

    double sum = 0.0;
    for (double v : ex.features) sum += v;
    const double mean = sum / 64.0;
    double sq = 0.0;
    for (double v : ex.features) sq += (v - mean) * (v - mean);
    const GaussianParams p = moment_match(ex.features);
    moments = moments && p.mean == mean && p.variance == sq / 64.0;
  }
  Rng rng(23);
  Example probe;
  probe.label = 6;
  std::vector<std::uint64_t> counts(10, 0);
  for (int i = 0; i < 100000; ++i) ++counts[corrupt_random_label(probe, 10, rng).label];
  const double p = chi_square_uniform_pvalue(counts);
  return {multiset && moments && p > 0.001,
          fmt::format("multisets preserved={} gaussian params exact={} label chi-square p={:.4f}",
                      multiset, moments, p)};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "lossprio_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "det.yaml";
  std::ofstream(config) << "corruption: {kind: random_label, fraction: 0.25}\n"
                           "trainer: {epochs: 4}\n"
                           "prioritizer: {kind: sb_loss, beta: 1}\n"
                           "seeds: [1, 2, 3, 4]\n";
  std::ostringstream log;
  const auto train = [&](const std::string& name, std::size_t threads) {
    return cmd_train(config, {.output_dir = root / name, .threads = threads}, log);
  };
  if (train("a", 1) != kExitOk || train("b", 1) != kExitOk || train("c", 4) != kExitOk) {
    return {false, "cmd_train failed: " + log.str()};
  }
  std::size_t compared = 0;
  bool repeat_equal = true;
  bool threads_equal = true;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (entry.path().extension() != ".csv") continue;
    const fs::path rel = fs::relative(entry.path(), root / "a");
    const std::string a = slurp(entry.path());
    repeat_equal = repeat_equal && a == slurp(root / "b" / rel);
    threads_equal = threads_equal && a == slurp(root / "c" / rel);
    ++compared;
  }
  return {repeat_equal && threads_equal && compared >= 9,
          fmt::format("{} CSV files: repeat identical={} threads 1 vs 4 identical={}", compared,
                      repeat_equal, threads_equal)};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "selectivity law", 10, selectivity_law},
      {2, "gradient correctness", 5, gradient_correctness},
      {3, "SGD equivalence at beta=0", 30, sgd_equivalence},
      {4, "clean-data speedup", 300, clean_speedup},
      {5, "corrupted oversampling", 300, corrupted_oversampling},
      {6, "corruption degradation", 600, corruption_degradation},
      {7, "VR gate", 10, vr_gate},
      {8, "SBE vs SB under label noise", 600, sbe_vs_sb},
      {9, "corruption-transform invariants", 10, corruption_invariants},
      {10, "determinism", 600, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.time_limit_s;
    const bool passed = o.passed && in_time;
    failures += passed ? 0 : 1;
    std::cout << fmt::format("{} criterion {:>2} {:<32} {} [{:.1f}s, limit {:.0f}s]\n",
                             passed ? "PASS" : "FAIL", c.number, c.name, o.measured, secs,
                             c.time_limit_s)
              << std::flush;
  }
  std::cout << fmt::format("{} of {} criteria passed\n", criteria.size() - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
