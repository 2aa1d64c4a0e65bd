#include "lossprio/harness.hpp"

#include <algorithm>
#include <stdexcept>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include <fmt/format.h>
#include "json.hpp"

#include "lossprio/errors.hpp"
#include "lossprio/random.hpp"

namespace lossprio {

namespace {

constexpr std::uint64_t kInitStream = 20;
constexpr std::uint64_t kOrderStream = 21;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::uint64_t parse_uint(const std::string& s, std::size_t line_no) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw ConfigError(fmt::format("line {}: expected an integer, got '{}'", line_no, s));
  }
  return v;
}

double parse_double(const std::string& s, std::size_t line_no) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError(fmt::format("line {}: expected a number, got '{}'", line_no, s));
  }
  return v;
}

double sample_std(std::span<const double> values, double mean) {
  if (values.size() < 2) return 0.0;
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return std::sqrt(sq / static_cast<double>(values.size() - 1));
}

double mean_of(std::span<const double> values) {
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

}  // namespace

double RunMetrics::best_test_error() const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : eval_points) best = std::min(best, p.test_error);
  return best;
}

double RunMetrics::gate_on_fraction() const {
  std::size_t gated = 0;
  std::size_t on = 0;
  for (const auto& b : batches) {
    if (!b.gate_on) continue;
    ++gated;
    if (*b.gate_on) ++on;
  }
  return gated == 0 ? 0.0 : static_cast<double>(on) / static_cast<double>(gated);
}

std::size_t RunMetrics::total_backprops() const {
  return batches.empty() ? 0 : batches.back().backprops;
}

RunResult run_training(const Dataset& train, const Dataset& test, const TrainerConfig& trainer,
                       const PrioritizerConfig& prioritizer, const RunOptions& options) {
  trainer.validate();
  if (train.num_classes != test.num_classes || train.feature_dim != test.feature_dim) {
    throw ConfigError("train and test splits must share K and D");
  }
  if (options.eval_every == 0) throw ConfigError("eval_every must be positive");
  if (train.size() == 0) throw ConfigError("empty training set");

  std::vector<std::size_t> widths{train.feature_dim};
  widths.insert(widths.end(), trainer.hidden_layers.begin(), trainer.hidden_layers.end());
  widths.push_back(train.num_classes);

  RunResult result{.metrics = {}, .model = make_mlp(widths, derive_seed(trainer.seed, kInitStream)),
                   .batch_log = {}};
  RunMetrics& metrics = result.metrics;
  metrics.seed = trainer.seed;
  metrics.pick_counts.assign(train.size(), 0);

  auto sampler = make_prioritizer(prioritizer, trainer.batch_size);
  const Batch test_batch = [&] {
    std::vector<std::size_t> all(test.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return gather(test, all);
  }();

  SgdState state;
  Rng order_rng = make_rng(trainer.seed, kOrderStream);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t evaluated_bucket = 0;
  std::vector<Candidate> candidates;

  try {
    for (std::size_t epoch = 0; epoch < trainer.total_epochs; ++epoch) {
      const double progress =
          static_cast<double>(epoch) / static_cast<double>(trainer.total_epochs);
      std::shuffle(order.begin(), order.end(), order_rng);

      for (std::size_t start = 0; start < order.size(); start += trainer.batch_size) {
        const std::size_t stop = std::min(order.size(), start + trainer.batch_size);
        const std::span<const std::size_t> ids(order.data() + start, stop - start);

        std::vector<ForwardResult> scored;
        if (sampler->needs_scores()) scored = forward(result.model, gather(train, ids));
        candidates.clear();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          Candidate c{.id = ids[i], .loss = 0.0, .probabilities = {}};
          if (!scored.empty()) {
            if (!std::isfinite(scored[i].loss)) throw TrainingDiverged(state.iteration);
            c.loss = scored[i].loss;
            c.probabilities = {scored[i].probabilities.data(),
                               static_cast<std::size_t>(scored[i].probabilities.size())};
          }
          candidates.push_back(c);
        }

        for (auto& emitted : sampler->feed(candidates)) {
          const Batch batch = gather(train, emitted.ids);
          backward_and_update(result.model, batch, trainer, state, progress);

          std::size_t corrupted = 0;
          for (auto id : emitted.ids) {
            ++metrics.pick_counts[id];
            if (train.examples[id].corrupted()) ++corrupted;
          }
          metrics.batches.push_back(
              {.iteration = state.iteration,
               .backprops = state.backprops,
               .corrupted_fraction =
                   static_cast<double>(corrupted) / static_cast<double>(emitted.ids.size()),
               .gate_on = emitted.gate_on});
          if (options.record_batches) result.batch_log.push_back(std::move(emitted.ids));

          const std::size_t bucket = state.backprops / options.eval_every;
          if (bucket > evaluated_bucket) {
            evaluated_bucket = bucket;
            metrics.eval_points.push_back({.iteration = state.iteration,
                                           .backprops = state.backprops,
                                           .test_error =
                                               classification_error(result.model, test_batch)});
          }
        }
      }
    }
  } catch (const TrainingDiverged&) {
    metrics.diverged = true;
  }
  return result;
}

std::optional<EvalPoint> first_crossing(const RunMetrics& metrics, double threshold) {
  for (const auto& p : metrics.eval_points) {
    if (p.test_error <= threshold) return p;
  }
  return std::nullopt;
}

SpeedupReport compute_speedup(const RunMetrics& baseline, const RunMetrics& method, double slack) {
  if (!(slack > 1.0)) throw ConfigError("speedup slack must be > 1");
  if (baseline.eval_points.empty()) throw ConfigError("baseline has no evaluations");

  SpeedupReport report;
  report.threshold_error = slack * baseline.best_test_error();
  report.best_error = method.best_test_error();
  const auto base_cross = first_crossing(baseline, report.threshold_error);
  if (!base_cross) {
    // Unreachable: the baseline's best evaluation is at or below slack * best.
    throw std::logic_error("baseline never reaches its own threshold");
  }
  report.baseline_backprops = base_cross->backprops;
  if (const auto cross = first_crossing(method, report.threshold_error)) {
    report.method_backprops = cross->backprops;
    report.speedup = static_cast<double>(report.baseline_backprops) /
                     static_cast<double>(cross->backprops);
  }
  return report;
}

std::string to_json_line(const SpeedupReport& report) {
  nlohmann::ordered_json j;
  j["threshold_error"] = report.threshold_error;
  j["baseline_backprops"] = report.baseline_backprops;
  j["method_backprops"] =
      report.method_backprops ? nlohmann::ordered_json(*report.method_backprops) : nullptr;
  j["speedup"] = report.speedup ? nlohmann::ordered_json(*report.speedup) : nullptr;
  j["best_error"] = report.best_error;
  return j.dump();
}

double best_error_within(const RunMetrics& metrics, std::size_t budget) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : metrics.eval_points) {
    if (p.backprops <= budget) best = std::min(best, p.test_error);
  }
  return best;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> rank_pick_frequencies(
    const RunMetrics& metrics, std::span<const std::size_t> population, std::size_t top_n) {
  if (top_n > population.size()) {
    throw ConfigError(fmt::format("top_n {} exceeds population {}", top_n, population.size()));
  }
  std::vector<std::size_t> ids(population.begin(), population.end());
  auto picks = [&](std::size_t id) { return metrics.pick_counts.at(id); };

  std::vector<std::size_t> most = ids;
  std::partial_sort(most.begin(), most.begin() + static_cast<std::ptrdiff_t>(top_n), most.end(),
                    [&](std::size_t a, std::size_t b) {
                      return picks(a) != picks(b) ? picks(a) > picks(b) : a < b;
                    });
  most.resize(top_n);

  std::vector<std::size_t> least = std::move(ids);
  std::partial_sort(least.begin(), least.begin() + static_cast<std::ptrdiff_t>(top_n),
                    least.end(), [&](std::size_t a, std::size_t b) {
                      return picks(a) != picks(b) ? picks(a) < picks(b) : a < b;
                    });
  least.resize(top_n);
  return {std::move(most), std::move(least)};
}

std::vector<std::size_t> class_population(const Dataset& dataset, std::size_t label) {
  std::vector<std::size_t> ids;
  for (const auto& ex : dataset.examples) {
    if (ex.label == label) ids.push_back(ex.id);
  }
  return ids;
}

RunMetrics AggregatedMetrics::mean_curve() const {
  RunMetrics m;
  for (std::size_t i = 0; i < backprops.size(); ++i) {
    m.eval_points.push_back(
        {.iteration = 0, .backprops = backprops[i], .test_error = mean_test_error[i]});
  }
  return m;
}

AggregatedMetrics aggregate_seeds(std::span<const RunMetrics> runs) {
  if (runs.empty()) throw AggregationError("no runs to aggregate");
  std::size_t evals = runs.front().eval_points.size();
  std::size_t batches = runs.front().batches.size();
  for (const auto& r : runs) {
    evals = std::min(evals, r.eval_points.size());
    batches = std::min(batches, r.batches.size());
  }

  AggregatedMetrics agg;
  agg.runs = runs.size();
  std::vector<double> column(runs.size());
  for (std::size_t i = 0; i < evals; ++i) {
    const std::size_t bp = runs.front().eval_points[i].backprops;
    for (std::size_t r = 0; r < runs.size(); ++r) {
      if (runs[r].eval_points[i].backprops != bp) {
        throw AggregationError(fmt::format(
            "evaluation {} happens at {} backprops in run 0 but {} in run {}", i, bp,
            runs[r].eval_points[i].backprops, r));
      }
      column[r] = runs[r].eval_points[i].test_error;
    }
    const double mean = mean_of(column);
    agg.backprops.push_back(bp);
    agg.mean_test_error.push_back(mean);
    agg.std_test_error.push_back(sample_std(column, mean));
  }
  for (std::size_t i = 0; i < batches; ++i) {
    for (std::size_t r = 0; r < runs.size(); ++r) {
      column[r] = runs[r].batches[i].corrupted_fraction;
    }
    const double mean = mean_of(column);
    agg.mean_corrupted_fraction.push_back(mean);
    agg.std_corrupted_fraction.push_back(sample_std(column, mean));
  }
  return agg;
}

void write_metrics_csv(const RunMetrics& metrics, std::ostream& out) {
  out << "iteration,backprops,test_error,corrupted_frac_batch,gate_on\n";
  std::size_t next_eval = 0;
  for (const auto& b : metrics.batches) {
    std::string error;
    if (next_eval < metrics.eval_points.size() &&
        metrics.eval_points[next_eval].iteration == b.iteration) {
      error = fmt::format("{}", metrics.eval_points[next_eval].test_error);
      ++next_eval;
    }
    out << b.iteration << ',' << b.backprops << ',' << error << ','
        << fmt::format("{}", b.corrupted_fraction) << ','
        << (b.gate_on ? (*b.gate_on ? "1" : "0") : "") << '\n';
  }
}

void write_picks_csv(const RunMetrics& metrics, std::ostream& out) {
  out << "id,picks\n";
  for (std::size_t id = 0; id < metrics.pick_counts.size(); ++id) {
    out << id << ',' << metrics.pick_counts[id] << '\n';
  }
}

void read_metrics_csv(std::istream& in, RunMetrics& metrics) {
  std::string line;
  if (!std::getline(in, line) || line != "iteration,backprops,test_error,corrupted_frac_batch,gate_on") {
    throw ConfigError("line 1: unexpected metrics header");
  }
  metrics.eval_points.clear();
  metrics.batches.clear();
  for (std::size_t line_no = 2; std::getline(in, line); ++line_no) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw ConfigError(fmt::format("line {}: expected 5 fields", line_no));
    BatchRecord b;
    b.iteration = parse_uint(f[0], line_no);
    b.backprops = parse_uint(f[1], line_no);
    b.corrupted_fraction = parse_double(f[3], line_no);
    if (!f[4].empty()) b.gate_on = parse_uint(f[4], line_no) != 0;
    if (!f[2].empty()) {
      metrics.eval_points.push_back({b.iteration, b.backprops, parse_double(f[2], line_no)});
    }
    metrics.batches.push_back(b);
  }
}

void read_picks_csv(std::istream& in, RunMetrics& metrics) {
  std::string line;
  if (!std::getline(in, line) || line != "id,picks") {
    throw ConfigError("line 1: unexpected picks header");
  }
  metrics.pick_counts.clear();
  for (std::size_t line_no = 2; std::getline(in, line); ++line_no) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 2) throw ConfigError(fmt::format("line {}: expected 2 fields", line_no));
    const auto id = parse_uint(f[0], line_no);
    if (id != metrics.pick_counts.size()) {
      throw ConfigError(fmt::format("line {}: ids must be consecutive from 0", line_no));
    }
    metrics.pick_counts.push_back(parse_uint(f[1], line_no));
  }
}

void write_run_directory(const RunMetrics& metrics, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.csv", std::ios::binary);
    write_metrics_csv(metrics, out);
  }
  {
    std::ofstream out(dir / "picks.csv", std::ios::binary);
    write_picks_csv(metrics, out);
  }
  nlohmann::ordered_json j;
  j["seed"] = metrics.seed;
  j["diverged"] = metrics.diverged;
  j["total_backprops"] = metrics.total_backprops();
  j["best_test_error"] =
      metrics.eval_points.empty() ? nlohmann::ordered_json(nullptr)
                                  : nlohmann::ordered_json(metrics.best_test_error());
  j["gate_on_fraction"] = metrics.gate_on_fraction();
  std::ofstream out(dir / "run.json", std::ios::binary);
  out << j.dump(2) << '\n';
}

RunMetrics read_run_directory(const std::filesystem::path& dir) {
  RunMetrics metrics;
  std::ifstream metrics_in(dir / "metrics.csv", std::ios::binary);
  std::ifstream picks_in(dir / "picks.csv", std::ios::binary);
  std::ifstream run_in(dir / "run.json", std::ios::binary);
  if (!metrics_in || !picks_in || !run_in) {
    throw ConfigError("run directory " + dir.string() + " is incomplete");
  }
  read_metrics_csv(metrics_in, metrics);
  read_picks_csv(picks_in, metrics);
  const auto j = nlohmann::json::parse(run_in);
  metrics.seed = j.at("seed").get<std::uint64_t>();
  metrics.diverged = j.at("diverged").get<bool>();
  return metrics;
}

void write_aggregate_csv(const AggregatedMetrics& agg, std::ostream& out) {
  out << "backprops,mean_test_error,std_test_error\n";
  for (std::size_t i = 0; i < agg.backprops.size(); ++i) {
    out << agg.backprops[i] << ',' << fmt::format("{},{}", agg.mean_test_error[i],
                                                  agg.std_test_error[i])
        << '\n';
  }
}

void write_aggregate_batches_csv(const AggregatedMetrics& agg, std::ostream& out) {
  out << "iteration,mean_corrupted_frac,std_corrupted_frac\n";
  for (std::size_t i = 0; i < agg.mean_corrupted_fraction.size(); ++i) {
    out << i + 1 << ','
        << fmt::format("{},{}", agg.mean_corrupted_fraction[i], agg.std_corrupted_fraction[i])
        << '\n';
  }
}

}  // namespace lossprio
