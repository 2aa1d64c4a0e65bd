#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lossprio/random.hpp"
#include "lossprio/score_histogram.hpp"

namespace lossprio {

using BatchIds = std::vector<std::size_t>;

/// P(select) = CDF(score)^beta against the current window. nullopt while the
/// window is empty, which callers treat as "select unconditionally".
std::optional<double> selection_probability(double score, const ScoreHistogram& hist, double beta);

/// Long-run fraction selected by CDF^beta sampling: integral of p^beta over [0,1].
double expected_selection_fraction(double beta);

/// FIFO of accepted ids, drained in batches of exactly batch_size.
class CandidateBuffer {
 public:
  explicit CandidateBuffer(std::size_t batch_size);

  void push(std::size_t id) { queue_.push_back(id); }
  /// The first batch_size ids in selection order, or nullopt if not enough are queued.
  std::optional<BatchIds> pop_batch();

  std::size_t size() const noexcept { return queue_.size(); }
  std::size_t batch_size() const noexcept { return batch_size_; }
  const std::deque<std::size_t>& pending() const noexcept { return queue_; }

 private:
  std::size_t batch_size_;
  std::deque<std::size_t> queue_;
};

struct ScoredId {
  std::size_t id = 0;
  double score = 0.0;
};

/// Selective-backprop admission for one stream of scored examples. Each score is
/// inserted into the window, then admitted with probability CDF(score)^beta.
/// While the window holds fewer than `warmup` scores every example is admitted.
/// Returns every full batch that became available, oldest first.
std::vector<BatchIds> sb_step(std::span<const ScoredId> scored, ScoreHistogram& hist,
                              CandidateBuffer& buffer, double beta, Rng& rng,
                              std::size_t warmup = 0);

/// VR pre-sampling pool: scored examples accumulate until `capacity`, then one
/// batch is drawn and the pool is flushed.
class SamplingPool {
 public:
  SamplingPool(std::size_t capacity, double gate_threshold);

  void push(std::size_t id, double loss) { entries_.emplace_back(id, loss); }
  bool full() const noexcept { return entries_.size() >= capacity_; }
  void clear() noexcept { entries_.clear(); }

  std::size_t capacity() const noexcept { return capacity_; }
  double gate_threshold() const noexcept { return gate_threshold_; }
  const std::vector<std::pair<std::size_t, double>>& entries() const noexcept { return entries_; }

  /// q_i = L_i / sum L. Uniform when the total is zero.
  std::vector<double> draw_probabilities() const;

  /// n * sum_i (q_i - 1/n)^2, the scaled squared L2 distance between q and uniform.
  /// Exactly zero when all losses are equal.
  double distance_from_uniform() const;

 private:
  std::size_t capacity_;
  double gate_threshold_;
  std::vector<std::pair<std::size_t, double>> entries_;
};

struct PoolDraw {
  BatchIds ids;
  bool gate_on = false;
  double distance = 0.0;
};

/// Draws batch_size distinct ids from the pool: loss-proportional sequential
/// draws when the gate is open (distance > threshold), uniform otherwise. The
/// pool is emptied afterwards. No importance weights are produced.
PoolDraw draw_from_pool(SamplingPool& pool, std::size_t batch_size, Rng& rng);

/// Feeds (id, loss) pairs into the pool and draws whenever it fills.
std::vector<PoolDraw> vr_step(SamplingPool& pool, std::span<const ScoredId> incoming,
                              std::size_t batch_size, Rng& rng);

enum class PrioritizerKind { uniform, sb_loss, sb_entropy, vr };

std::string_view to_string(PrioritizerKind kind);
PrioritizerKind parse_prioritizer_kind(std::string_view name);

struct PrioritizerConfig {
  PrioritizerKind kind = PrioritizerKind::uniform;
  double beta = 1.0;
  std::size_t histogram_capacity = 1024;
  std::size_t pool_capacity = 384;
  double gate_threshold = 0.0;
  std::uint64_t seed = 1;

  void validate(std::size_t batch_size) const;
};

/// One forward-scored candidate. `probabilities` must outlive the feed() call.
struct Candidate {
  std::size_t id = 0;
  double loss = 0.0;
  std::span<const double> probabilities;
};

struct EmittedBatch {
  BatchIds ids;
  /// Set by the VR sampler only.
  std::optional<bool> gate_on;
};

class Prioritizer {
 public:
  virtual ~Prioritizer() = default;

  virtual PrioritizerKind kind() const = 0;
  /// False when candidates are never scored, so the caller may skip the forward pass.
  virtual bool needs_scores() const { return true; }
  virtual std::vector<EmittedBatch> feed(std::span<const Candidate> candidates) = 0;
  /// Debug/golden-file record of the internal state.
  virtual std::string snapshot() const = 0;
};

/// Throws ConfigError if cfg is invalid for this batch size.
std::unique_ptr<Prioritizer> make_prioritizer(const PrioritizerConfig& cfg, std::size_t batch_size);

}  // namespace lossprio
