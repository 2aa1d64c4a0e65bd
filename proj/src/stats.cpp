#include "lossprio/stats.hpp"

#include <vector>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include "lossprio/errors.hpp"

namespace lossprio {

double chi_square_statistic(std::span<const std::uint64_t> counts,
                            std::span<const double> expected_probabilities) {
  if (counts.size() != expected_probabilities.size() || counts.size() < 2) {
    throw ConfigError("chi-square needs at least two cells with matching probabilities");
  }
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  double stat = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double expected = total * expected_probabilities[i];
    const double diff = static_cast<double>(counts[i]) - expected;
    stat += diff * diff / expected;
  }
  return stat;
}

double chi_square_pvalue(std::span<const std::uint64_t> counts,
                         std::span<const double> expected_probabilities) {
  const double stat = chi_square_statistic(counts, expected_probabilities);
  const boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

double chi_square_uniform_pvalue(std::span<const std::uint64_t> counts) {
  const std::vector<double> uniform(counts.size(), 1.0 / static_cast<double>(counts.size()));
  return chi_square_pvalue(counts, uniform);
}

double binomial_upper_tail(std::uint64_t successes, std::uint64_t trials, double p) {
  if (successes == 0) return 1.0;
  const boost::math::binomial dist(static_cast<double>(trials), p);
  // complement(cdf(k - 1)) = P(X > k - 1) = P(X >= k)
  return boost::math::cdf(boost::math::complement(dist, static_cast<double>(successes - 1)));
}

}  // namespace lossprio
