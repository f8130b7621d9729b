#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace vitprune::testing {

// Pearson statistic against a uniform expectation.
inline double chi_square_uniform(const std::vector<std::size_t>& counts) {
  double total = 0.0;
  for (std::size_t c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  double x2 = 0.0;
  for (std::size_t c : counts) x2 += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  return x2;
}

// Upper tail of χ² with an even number of degrees of freedom:
// e^{−x/2} Σ_{i<k/2} (x/2)^i / i!
inline double chi_square_sf_even(double x, std::size_t dof) {
  const double half = x / 2.0;
  double term = 1.0, acc = 0.0;
  for (std::size_t i = 0; i < dof / 2; ++i) {
    acc += term;
    term *= half / static_cast<double>(i + 1);
  }
  return std::exp(-half) * acc;
}

}  // namespace vitprune::testing
