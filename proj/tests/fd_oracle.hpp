#pragma once

// Finite-difference oracles used to check the autodiff engine. These only
// evaluate forward values; they never call sk::grad.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "sklab/tensor.hpp"

namespace sk::testing {

inline constexpr double kFdStep = 1e-5;

// |a - b| relative to the larger magnitude, with a floor so that entries that
// are zero up to round-off do not dominate.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

using ScalarFn = std::function<double(const std::vector<std::vector<double>>&)>;

// Central difference of `f` with respect to input `which`, coordinate `i`.
inline double central_difference(const ScalarFn& f, std::vector<std::vector<double>> point,
                                 std::size_t which, std::size_t i, double h = kFdStep) {
  const double x0 = point[which][i];
  point[which][i] = x0 + h;
  const double up = f(point);
  point[which][i] = x0 - h;
  const double down = f(point);
  return (up - down) / (2.0 * h);
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

// Random values whose magnitude stays at least `margin` away from zero.
inline std::vector<double> random_away_from_zero(std::size_t n, std::mt19937_64& rng,
                                                 double margin = 1e-2) {
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> v(n);
  for (double& x : v) x = coin(rng) ? mag(rng) : -mag(rng);
  return v;
}

}  // namespace sk::testing
