#include <cmath>
#include <vector>

#include "atlas/normal.hpp"
#include "atlas/random.hpp"
#include "doctest.h"

using namespace atlas;

TEST_CASE("log_cdf agrees with erfc and stays finite in the far tail") {
  for (double z = -35.0; z <= 8.0; z += 0.37) {
    const long double ref = std::log(0.5L * std::erfc(-static_cast<long double>(z) / std::sqrt(2.0L)));
    if (std::isfinite(static_cast<double>(ref))) CHECK(normal::log_cdf(z) == doctest::Approx(static_cast<double>(ref)).epsilon(1e-10));
  }
  // Mills-ratio asymptote: log Phi(z) ~ log phi(z) - log(-z) for z -> -inf.
  for (double z : {-50.0, -200.0, -1e4}) {
    const double approx = -0.5 * z * z - normal::kLogSqrt2Pi - std::log(-z);
    CHECK(normal::log_cdf(z) == doctest::Approx(approx).epsilon(1e-3));
    CHECK(std::isfinite(normal::log_cdf(z)));
  }
  CHECK(normal::log_cdf(40.0) == doctest::Approx(0.0));
}

TEST_CASE("log_sum_exp") {
  const std::vector<double> v{-1000.0, -1000.0};
  CHECK(normal::log_sum_exp(v) == doctest::Approx(-1000.0 + std::log(2.0)));
  const std::vector<double> none{};
  CHECK(std::isinf(normal::log_sum_exp(none)));
  const std::vector<double> inf{-INFINITY, -INFINITY};
  CHECK(normal::log_sum_exp(inf) == -INFINITY);
}

TEST_CASE("inverse Mills ratio is finite and matches the direct ratio") {
  for (double b = -10.0; b <= 30.0; b += 0.5) {
    const double direct = std::exp(-0.5 * b * b - normal::kLogSqrt2Pi) / (0.5 * std::erfc(-b / std::sqrt(2.0)));
    if (b < 5.0) CHECK(normal::inverse_mills(b) == doctest::Approx(direct).epsilon(1e-9));
    CHECK(std::isfinite(normal::inverse_mills(b)));
  }
  CHECK(normal::inverse_mills(-40.0) == doctest::Approx(40.0).epsilon(1e-3));
}

TEST_CASE("truncated moments match Monte Carlo") {
  CounterRng rng(12, 0);
  for (double mu : {-2.0, -0.3, 0.0, 0.8, 1.5}) {
    for (double sigma : {1.0, 2.0}) {
      double s1 = 0.0, s2 = 0.0, n = 0.0;
      while (n < 200000) {
        const double y = mu + sigma * rng.normal();
        if (y > 0) continue;
        s1 += y;
        s2 += y * y;
        n += 1;
      }
      const auto m = normal::truncated_below_zero(mu, sigma);
      const double var = s2 / n - (s1 / n) * (s1 / n);
      CHECK(m.mean == doctest::Approx(s1 / n).epsilon(5.0 * std::sqrt(var / n) / std::abs(m.mean) + 1e-12));
      CHECK(m.second == doctest::Approx(s2 / n).epsilon(0.02));
    }
  }
}

TEST_CASE("truncated moments in the deep tail") {
  const auto m = normal::truncated_below_zero(50.0, 1.0);
  CHECK(std::isfinite(m.mean));
  CHECK(m.mean <= 0.0);
  CHECK(m.second >= m.mean * m.mean);
  const auto far = normal::truncated_below_zero(-50.0, 1.0);
  CHECK(far.mean == doctest::Approx(-50.0).epsilon(1e-6));
}
