#pragma once

#include <cmath>
#include <numbers>
#include <span>

namespace atlas::normal {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2 pi))

inline double log_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -kLogSqrt2Pi - std::log(sigma) - 0.5 * z * z;
}

/// log of the standard normal CDF; uses the asymptotic tail series where
/// erfc would underflow.
double log_cdf(double z);

/// Inverse Mills ratio phi(b) / Phi(b), finite for all b.
double inverse_mills(double b);

/// log(sum(exp(v))); -inf for an empty or all -inf input.
double log_sum_exp(std::span<const double> v);

struct Moments {
  double mean;
  double second;  // E[y^2]
};

/// First two moments of y ~ N(mu, sigma^2) conditioned on y <= 0.
Moments truncated_below_zero(double mu, double sigma);

}  // namespace atlas::normal
