#include "lossprio/prioritizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "lossprio/errors.hpp"
#include "lossprio/model.hpp"

namespace lossprio {

std::optional<double> selection_probability(double score, const ScoreHistogram& hist, double beta) {
  if (hist.empty()) return std::nullopt;
  return std::pow(hist.cdf(score), beta);
}

double expected_selection_fraction(double beta) {
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  return 1.0 / (beta + 1.0);
}

CandidateBuffer::CandidateBuffer(std::size_t batch_size) : batch_size_(batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
}

std::optional<BatchIds> CandidateBuffer::pop_batch() {
  if (queue_.size() < batch_size_) return std::nullopt;
  BatchIds batch(queue_.begin(), queue_.begin() + static_cast<std::ptrdiff_t>(batch_size_));
  queue_.erase(queue_.begin(), queue_.begin() + static_cast<std::ptrdiff_t>(batch_size_));
  return batch;
}

std::vector<BatchIds> sb_step(std::span<const ScoredId> scored, ScoreHistogram& hist,
                              CandidateBuffer& buffer, double beta, Rng& rng,
                              std::size_t warmup) {
  std::vector<BatchIds> batches;
  for (const auto& item : scored) {
    hist.insert(item.score);
    bool accept = true;
    if (hist.size() >= warmup) {
      // Never nullopt here: the window holds at least the score just inserted.
      const double p = selection_probability(item.score, hist, beta).value_or(1.0);
      accept = uniform01(rng) < p;
    }
    if (accept) {
      buffer.push(item.id);
      if (auto batch = buffer.pop_batch()) batches.push_back(std::move(*batch));
    }
  }
  return batches;
}

SamplingPool::SamplingPool(std::size_t capacity, double gate_threshold)
    : capacity_(capacity), gate_threshold_(gate_threshold) {
  if (capacity == 0) throw ConfigError("pool capacity must be positive");
  if (!(gate_threshold >= 0.0)) throw ConfigError("gate threshold must be >= 0");
  entries_.reserve(capacity);
}

std::vector<double> SamplingPool::draw_probabilities() const {
  const std::size_t n = entries_.size();
  std::vector<double> q(n, n == 0 ? 0.0 : 1.0 / static_cast<double>(n));
  double total = 0.0;
  for (const auto& e : entries_) total += e.second;
  if (total > 0.0) {
    for (std::size_t i = 0; i < n; ++i) q[i] = entries_[i].second / total;
  }
  return q;
}

double SamplingPool::distance_from_uniform() const {
  const std::size_t n = entries_.size();
  if (n == 0) return 0.0;
  const auto [lo, hi] = std::minmax_element(
      entries_.begin(), entries_.end(),
      [](const auto& a, const auto& b) { return a.second < b.second; });
  if (lo->second == hi->second) return 0.0;

  const auto q = draw_probabilities();
  const double uniform = 1.0 / static_cast<double>(n);
  double sq = 0.0;
  for (double qi : q) sq += (qi - uniform) * (qi - uniform);
  return static_cast<double>(n) * sq;
}

PoolDraw draw_from_pool(SamplingPool& pool, std::size_t batch_size, Rng& rng) {
  const auto& entries = pool.entries();
  if (entries.size() < batch_size) {
    throw ConfigError(fmt::format("pool holds {} entries, cannot draw {}", entries.size(),
                                  batch_size));
  }
  PoolDraw draw;
  draw.distance = pool.distance_from_uniform();
  draw.gate_on = draw.distance > pool.gate_threshold();
  draw.ids.reserve(batch_size);

  std::vector<std::pair<std::size_t, double>> remaining = entries;
  for (std::size_t k = 0; k < batch_size; ++k) {
    double total = 0.0;
    if (draw.gate_on) {
      for (const auto& e : remaining) total += e.second;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double cumulative = 0.0;
      pick = remaining.size() - 1;
      for (std::size_t i = 0; i < remaining.size(); ++i) {
        cumulative += remaining[i].second;
        if (target < cumulative) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, remaining.size() - 1)(rng);
    }
    draw.ids.push_back(remaining[pick].first);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  pool.clear();
  return draw;
}

std::vector<PoolDraw> vr_step(SamplingPool& pool, std::span<const ScoredId> incoming,
                              std::size_t batch_size, Rng& rng) {
  std::vector<PoolDraw> draws;
  for (const auto& item : incoming) {
    pool.push(item.id, item.score);
    if (pool.full()) draws.push_back(draw_from_pool(pool, batch_size, rng));
  }
  return draws;
}

std::string_view to_string(PrioritizerKind kind) {
  switch (kind) {
    case PrioritizerKind::uniform: return "uniform";
    case PrioritizerKind::sb_loss: return "sb_loss";
    case PrioritizerKind::sb_entropy: return "sb_entropy";
    case PrioritizerKind::vr: return "vr";
  }
  return "uniform";
}

PrioritizerKind parse_prioritizer_kind(std::string_view name) {
  for (auto kind : {PrioritizerKind::uniform, PrioritizerKind::sb_loss,
                    PrioritizerKind::sb_entropy, PrioritizerKind::vr}) {
    if (name == to_string(kind)) return kind;
  }
  throw ConfigError(fmt::format("unknown prioritizer kind '{}'", name));
}

void PrioritizerConfig::validate(std::size_t batch_size) const {
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(gate_threshold >= 0.0)) throw ConfigError("gate_threshold must be >= 0");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (kind == PrioritizerKind::sb_loss || kind == PrioritizerKind::sb_entropy) {
    if (histogram_capacity < batch_size) {
      throw ConfigError(fmt::format("histogram_capacity {} is smaller than the batch size {}",
                                    histogram_capacity, batch_size));
    }
  }
  if (kind == PrioritizerKind::vr && pool_capacity < batch_size) {
    throw ConfigError(fmt::format("pool_capacity {} is smaller than the batch size {}",
                                  pool_capacity, batch_size));
  }
}

namespace {

template <typename Range>
void write_list(std::ostringstream& out, std::string_view key, const Range& values) {
  out << key << ' ' << values.size();
  for (const auto& v : values) out << ' ' << fmt::format("{}", v);
  out << '\n';
}

class UniformPrioritizer final : public Prioritizer {
 public:
  explicit UniformPrioritizer(std::size_t batch_size) : buffer_(batch_size) {}

  PrioritizerKind kind() const override { return PrioritizerKind::uniform; }
  bool needs_scores() const override { return false; }

  std::vector<EmittedBatch> feed(std::span<const Candidate> candidates) override {
    std::vector<EmittedBatch> out;
    for (const auto& c : candidates) {
      buffer_.push(c.id);
      if (auto batch = buffer_.pop_batch()) out.push_back({std::move(*batch), std::nullopt});
    }
    return out;
  }

  std::string snapshot() const override {
    std::ostringstream out;
    out << "kind uniform\n";
    write_list(out, "buffer", buffer_.pending());
    return out.str();
  }

 private:
  CandidateBuffer buffer_;
};

class SelectiveBackprop final : public Prioritizer {
 public:
  SelectiveBackprop(const PrioritizerConfig& cfg, std::size_t batch_size)
      : kind_(cfg.kind),
        beta_(cfg.beta),
        warmup_(batch_size),
        hist_(cfg.histogram_capacity),
        buffer_(batch_size),
        rng_(make_rng(cfg.seed, 0x5b)) {}

  PrioritizerKind kind() const override { return kind_; }

  std::vector<EmittedBatch> feed(std::span<const Candidate> candidates) override {
    scored_.clear();
    for (const auto& c : candidates) {
      const double score =
          kind_ == PrioritizerKind::sb_entropy ? prediction_entropy(c.probabilities) : c.loss;
      scored_.push_back({c.id, score});
    }
    std::vector<EmittedBatch> out;
    for (auto& batch : sb_step(scored_, hist_, buffer_, beta_, rng_, warmup_)) {
      out.push_back({std::move(batch), std::nullopt});
    }
    return out;
  }

  std::string snapshot() const override {
    std::ostringstream out;
    out << "kind " << to_string(kind_) << '\n';
    write_list(out, "window", hist_.window());
    write_list(out, "buffer", buffer_.pending());
    return out.str();
  }

 private:
  PrioritizerKind kind_;
  double beta_;
  std::size_t warmup_;
  ScoreHistogram hist_;
  CandidateBuffer buffer_;
  Rng rng_;
  std::vector<ScoredId> scored_;
};

class VarianceReductionSampler final : public Prioritizer {
 public:
  VarianceReductionSampler(const PrioritizerConfig& cfg, std::size_t batch_size)
      : batch_size_(batch_size),
        pool_(cfg.pool_capacity, cfg.gate_threshold),
        rng_(make_rng(cfg.seed, 0x7a)) {}

  PrioritizerKind kind() const override { return PrioritizerKind::vr; }

  std::vector<EmittedBatch> feed(std::span<const Candidate> candidates) override {
    scored_.clear();
    for (const auto& c : candidates) scored_.push_back({c.id, c.loss});
    std::vector<EmittedBatch> out;
    for (auto& draw : vr_step(pool_, scored_, batch_size_, rng_)) {
      last_gate_ = draw.gate_on;
      out.push_back({std::move(draw.ids), draw.gate_on});
    }
    return out;
  }

  std::string snapshot() const override {
    std::ostringstream out;
    out << "kind vr\n";
    out << "pool " << pool_.entries().size();
    for (const auto& [id, loss] : pool_.entries()) out << ' ' << id << ':' << fmt::format("{}", loss);
    out << '\n';
    out << "gate " << (last_gate_ ? (*last_gate_ ? "on" : "off") : "none") << '\n';
    return out.str();
  }

 private:
  std::size_t batch_size_;
  SamplingPool pool_;
  Rng rng_;
  std::optional<bool> last_gate_;
  std::vector<ScoredId> scored_;
};

}  // namespace

std::unique_ptr<Prioritizer> make_prioritizer(const PrioritizerConfig& cfg, std::size_t batch_size) {
  cfg.validate(batch_size);
  switch (cfg.kind) {
    case PrioritizerKind::uniform:
      return std::make_unique<UniformPrioritizer>(batch_size);
    case PrioritizerKind::sb_loss:
    case PrioritizerKind::sb_entropy:
      return std::make_unique<SelectiveBackprop>(cfg, batch_size);
    case PrioritizerKind::vr:
      return std::make_unique<VarianceReductionSampler>(cfg, batch_size);
  }
  throw ConfigError("unknown prioritizer kind");
}

}  // namespace lossprio
