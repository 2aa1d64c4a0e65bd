#include "lossprio/score_histogram.hpp"

#include <algorithm>

#include "lossprio/errors.hpp"

namespace lossprio {

ScoreHistogram::ScoreHistogram(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("histogram capacity must be positive");
  sorted_.reserve(capacity);
}

void ScoreHistogram::insert(double score) {
  if (fifo_.size() == capacity_) {
    const double oldest = fifo_.front();
    fifo_.pop_front();
    // Any element equal to `oldest` will do; equal values are interchangeable.
    sorted_.erase(std::lower_bound(sorted_.begin(), sorted_.end(), oldest));
  }
  fifo_.push_back(score);
  sorted_.insert(std::upper_bound(sorted_.begin(), sorted_.end(), score), score);
}

double ScoreHistogram::cdf(double score) const {
  if (sorted_.empty()) return 0.0;
  const auto at_or_below = std::upper_bound(sorted_.begin(), sorted_.end(), score) - sorted_.begin();
  return static_cast<double>(at_or_below) / static_cast<double>(sorted_.size());
}

}  // namespace lossprio
