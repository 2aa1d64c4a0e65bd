#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "lossprio/experiment.hpp"
#include "lossprio/stats.hpp"

namespace lossprio {

namespace {

struct Property {
  std::string name;
  std::string measured;
  bool passed = false;
};

double sb_acceptance_rate(const std::vector<double>& scores, double beta, std::uint64_t seed) {
  ScoreHistogram hist(1024);
  CandidateBuffer buffer(128);
  Rng rng(seed);
  std::vector<ScoredId> scored;
  scored.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scored.push_back({i, scores[i]});
  const auto batches = sb_step(scored, hist, buffer, beta, rng, 128);
  const double admitted = static_cast<double>(batches.size() * 128 + buffer.size());
  return admitted / static_cast<double>(scores.size());
}

Property selectivity_law() {
  Rng rng(11);
  std::vector<double> scores(100000);
  for (auto& s : scores) s = uniform01(rng);
  std::string measured;
  bool ok = true;
  for (double beta : {0.0, 1.0, 2.0, 3.0}) {
    const double rate = sb_acceptance_rate(scores, beta, 12 + static_cast<std::uint64_t>(beta));
    ok = ok && std::abs(rate - expected_selection_fraction(beta)) <= 0.01;
    measured += fmt::format("{}beta={}:{:.4f}", measured.empty() ? "" : " ", beta, rate);
  }
  return {"sb selectivity 1/(beta+1)", measured, ok};
}

Property tie_handling() {
  const std::vector<double> scores(20000, 0.7);
  const double rate = sb_acceptance_rate(scores, 2.0, 5);
  return {"sb constant scores all selected", fmt::format("rate={:.4f}", rate), rate == 1.0};
}

Property gradient_correctness() {
  const std::vector<std::size_t> widths{8, 16, 4};
  const Mlp net = make_mlp(widths, 3);
  Rng rng(4);
  std::normal_distribution<double> gauss;
  Batch batch;
  batch.inputs.resize(8, 8);
  for (Eigen::Index i = 0; i < batch.inputs.size(); ++i) batch.inputs.data()[i] = gauss(rng);
  for (std::size_t i = 0; i < 8; ++i) batch.labels.push_back(i % 4);
  const double err = gradient_check(net, batch, 1e-4);
  return {"gradient check [8,16,4]", fmt::format("max_rel_err={:.3e}", err), err < 1e-4};
}

Property vr_gate_uniform() {
  Rng rng(21);
  std::vector<std::uint64_t> counts(4, 0);
  bool gate_ever_on = false;
  double distance = 0.0;
  for (int round = 0; round < 100000; ++round) {
    SamplingPool pool(4, 0.0);
    for (std::size_t id = 0; id < 4; ++id) pool.push(id, 0.3);
    const PoolDraw draw = draw_from_pool(pool, 1, rng);
    gate_ever_on = gate_ever_on || draw.gate_on;
    distance = std::max(distance, draw.distance);
    ++counts[draw.ids.front()];
  }
  const double p = chi_square_uniform_pvalue(counts);
  return {"vr gate off on constant losses",
          fmt::format("distance={} gate_on={} chi2_p={:.4f}", distance, gate_ever_on, p),
          !gate_ever_on && distance == 0.0 && p > 0.01};
}

Property vr_proportional() {
  Rng rng(22);
  std::uint64_t heavy = 0;
  const int rounds = 100000;
  for (int round = 0; round < rounds; ++round) {
    SamplingPool pool(2, 0.0);
    pool.push(0, 4.0);
    pool.push(1, 1.0);
    if (draw_from_pool(pool, 1, rng).ids.front() == 0) ++heavy;
  }
  const double freq = static_cast<double>(heavy) / rounds;
  return {"vr draws proportional to loss (4:1)", fmt::format("P(heavy)={:.4f} expected=0.8", freq),
          std::abs(freq - 0.8) <= 0.01};
}

Property corruption_invariants() {
  const Dataset ds = generate_synthetic(200, 10, 64, 9);
  const auto perm = make_task_permutation(64, 10);
  bool multiset_ok = true;
  bool gaussian_ok = true;
  Rng rng(12);
  for (const auto& ex : ds.examples) {
    auto shuffled = corrupt_shuffle_pixels(ex, perm).features;
    auto original = ex.features;
    std::sort(shuffled.begin(), shuffled.end());
    std::sort(original.begin(), original.end());
    multiset_ok = multiset_ok && shuffled == original;

    double sum = 0.0;
    for (double v : ex.features) sum += v;
    const double mean = sum / static_cast<double>(ex.features.size());
    double sq = 0.0;
    for (double v : ex.features) sq += (v - mean) * (v - mean);
    const GaussianParams params = moment_match(ex.features);
    gaussian_ok = gaussian_ok && params.mean == mean &&
                  params.variance == sq / static_cast<double>(ex.features.size());
  }

  std::vector<std::uint64_t> counts(10, 0);
  Example probe;
  probe.label = 3;
  for (int i = 0; i < 100000; ++i) ++counts[corrupt_random_label(probe, 10, rng).label];
  const double p = chi_square_uniform_pvalue(counts);

  return {"corruption invariants",
          fmt::format("multiset={} gaussian_params={} label_chi2_p={:.4f}", multiset_ok,
                      gaussian_ok, p),
          multiset_ok && gaussian_ok && p > 0.001};
}

}  // namespace

int cmd_selftest(std::ostream& log) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<Property (*)()> checks{selectivity_law, tie_handling,    gradient_correctness,
                                     vr_gate_uniform, vr_proportional, corruption_invariants};
  bool all = true;
  for (auto check : checks) {
    const Property p = check();
    all = all && p.passed;
    log << fmt::format("{} {:<36} {}\n", p.passed ? "PASS" : "FAIL", p.name, p.measured);
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log << fmt::format("{} ({:.2f}s)\n", all ? "all properties passed" : "some properties FAILED",
                     secs);
  return all ? kExitOk : kExitFailed;
}

}  // namespace lossprio
