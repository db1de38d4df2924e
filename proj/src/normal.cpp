#include "atlas/normal.hpp"

#include <algorithm>
#include <limits>

namespace atlas::normal {

double log_cdf(double z) {
  if (z > 6.0) return std::log1p(-0.5 * std::erfc(z / std::numbers::sqrt2));
  if (z > -20.0) return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
  // Phi(z) = phi(z) / (-z) * (1 - 1/z^2 + 3/z^4 - 15/z^6 + 105/z^8 - ...)
  const double r = 1.0 / (z * z);
  const double series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r * (1.0 - 9.0 * r))));
  return -kLogSqrt2Pi - 0.5 * z * z - std::log(-z) + std::log(series);
}

double inverse_mills(double b) { return std::exp(-kLogSqrt2Pi - 0.5 * b * b - log_cdf(b)); }

double log_sum_exp(std::span<const double> v) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : v) hi = std::max(hi, x);
  if (!std::isfinite(hi)) return hi;
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - hi);
  return hi + std::log(sum);
}

Moments truncated_below_zero(double mu, double sigma) {
  const double beta = -mu / sigma;
  const double lambda = inverse_mills(beta);
  const double mean = mu - sigma * lambda;
  const double var = std::max(0.0, sigma * sigma * (1.0 - beta * lambda - lambda * lambda));
  return {mean, var + mean * mean};
}

}  // namespace atlas::normal
