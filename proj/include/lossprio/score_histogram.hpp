#pragma once

#include <cstddef>
#include <deque>
#include <vector>

namespace lossprio {

/// Exact sliding window over the most recent `capacity` scores with O(log H)
/// empirical-CDF queries. A sorted copy of the window sits beside the FIFO;
/// insertion and eviction are O(H) memmoves, which is cheap for H around 10^3.
class ScoreHistogram {
 public:
  explicit ScoreHistogram(std::size_t capacity);

  /// Appends a score, evicting the oldest one once the window is full.
  void insert(double score);

  /// Fraction of window entries <= score. Ties count as below. Zero for an empty window.
  double cdf(double score) const;

  std::size_t size() const noexcept { return fifo_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  bool empty() const noexcept { return fifo_.empty(); }

  /// Oldest first.
  const std::deque<double>& window() const noexcept { return fifo_; }

 private:
  std::size_t capacity_;
  std::deque<double> fifo_;
  std::vector<double> sorted_;
};

}  // namespace lossprio
