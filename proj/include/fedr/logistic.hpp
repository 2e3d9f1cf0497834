#pragma once

#include <cmath>

#include <boost/math/distributions/normal.hpp>

namespace fedr {

inline constexpr double kPi = 3.14159265358979323846;

// Standard deviation of the standard logistic distribution, pi / sqrt(3).
inline const double kLogisticSd = kPi / std::sqrt(3.0);

// Logistic CDF, evaluated without overflow for large |z|.
inline double logistic_cdf(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// First derivative: Lambda(z) * Lambda(-z).
inline double logistic_d1(double z) {
  const double p = logistic_cdf(z);
  const double q = logistic_cdf(-z);
  return p * q;
}

// Second derivative: Lambda'(z) * (1 - 2 Lambda(z)).
inline double logistic_d2(double z) {
  const double p = logistic_cdf(z);
  return logistic_d1(z) * (1.0 - 2.0 * p);
}

inline double logistic_quantile(double u) { return std::log(u) - std::log1p(-u); }

// log Lambda(z) and log(1 - Lambda(z)) without cancellation.
inline double log_logistic(double z) {
  return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}
inline double log1m_logistic(double z) { return log_logistic(-z); }

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double normal_quantile(double p) {
  static const boost::math::normal_distribution<double> std_normal(0.0, 1.0);
  return boost::math::quantile(std_normal, p);
}

}  // namespace fedr
