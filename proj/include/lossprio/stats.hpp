#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace lossprio {

/// Pearson chi-square statistic of `counts` against expected probabilities.
double chi_square_statistic(std::span<const std::uint64_t> counts,
                            std::span<const double> expected_probabilities);

/// Upper-tail p-value of the chi-square goodness-of-fit test against a uniform law.
double chi_square_uniform_pvalue(std::span<const std::uint64_t> counts);

/// Upper-tail p-value against arbitrary cell probabilities.
double chi_square_pvalue(std::span<const std::uint64_t> counts,
                         std::span<const double> expected_probabilities);

/// P(X >= successes) for X ~ Binomial(trials, p).
double binomial_upper_tail(std::uint64_t successes, std::uint64_t trials, double p);

}  // namespace lossprio
