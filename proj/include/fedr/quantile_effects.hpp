#pragma once

// Quantile functions as left-inverses of estimated CDFs, inversion of CDF
// bands into quantile and quantile-effect bands, and average effects.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedr/error.hpp"
#include "fedr/inference.hpp"
#include "fedr/panel.hpp"

namespace fedr {

// inf{y in grid : F(y) >= tau}, or sup_y when no grid value qualifies.
inline double left_inverse(const std::vector<double>& grid, const VectorXd& F, double tau, double sup_y,
                           bool* capped = nullptr) {
  for (std::size_t g = 0; g < grid.size(); ++g)
    if (F[static_cast<Eigen::Index>(g)] >= tau) {
      if (capped) *capped = false;
      return grid[g];
    }
  if (capped) *capped = true;
  return sup_y;
}

struct QuantileBand {
  std::vector<double> tau;
  VectorXd center, lower, upper;
  std::vector<bool> capped;  // some endpoint hit the sup convention
  double level = 0.95;
  double critical_value = 0.0;
  std::string source;
};

namespace detail {

inline bool in_cdf_class(const VectorXd& v) {
  for (Eigen::Index g = 0; g < v.size(); ++g) {
    if (!(v[g] >= 0.0 && v[g] <= 1.0)) return false;
    if (g > 0 && v[g] < v[g - 1]) return false;
  }
  return true;
}

}  // namespace detail

// Lower endpoint U^{<-}, upper endpoint L^{<-}.
inline QuantileBand invert_band(const Band& band, const std::vector<double>& taus, double sup_y) {
  if (!detail::in_cdf_class(band.lower) || !detail::in_cdf_class(band.upper) || !detail::in_cdf_class(band.center))
    throw ConfigError("band endpoints must be nondecreasing and within [0, 1]; shape-restrict before inverting");
  QuantileBand q;
  q.tau = taus;
  q.level = band.level;
  q.critical_value = band.critical_value;
  q.source = band.label;
  const auto T = static_cast<Eigen::Index>(taus.size());
  q.center.resize(T);
  q.lower.resize(T);
  q.upper.resize(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double tau = taus[static_cast<std::size_t>(t)];
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("quantile indices must lie in (0, 1)");
    bool c0 = false, c1 = false, c2 = false;
    q.center[t] = left_inverse(band.grid, band.center, tau, sup_y, &c0);
    q.lower[t] = left_inverse(band.grid, band.upper, tau, sup_y, &c1);
    q.upper[t] = left_inverse(band.grid, band.lower, tau, sup_y, &c2);
    q.capped.push_back(c0 || c1 || c2);
  }
  return q;
}

// Pointwise Minkowski difference of two quantile bands.
inline QuantileBand qe_band(const QuantileBand& q1, const QuantileBand& q0) {
  if (q1.tau != q0.tau) throw ConfigError("quantile bands have different index grids");
  QuantileBand out;
  out.tau = q1.tau;
  out.center = q1.center - q0.center;
  out.lower = q1.lower - q0.upper;
  out.upper = q1.upper - q0.lower;
  for (std::size_t t = 0; t < q1.tau.size(); ++t) out.capped.push_back(q1.capped[t] || q0.capped[t]);
  out.level = q1.level;
  out.critical_value = q1.critical_value;
  out.source = "difference";
  return out;
}

// Keeps the indices at which no band was capped.
inline std::vector<double> trim_taus(const std::vector<QuantileBand>& bands, std::vector<double>* trimmed = nullptr) {
  std::vector<double> keep;
  if (bands.empty()) return keep;
  for (std::size_t t = 0; t < bands.front().tau.size(); ++t) {
    bool any = false;
    for (const auto& b : bands) any = any || b.capped[t];
    if (any) {
      if (trimmed) trimmed->push_back(bands.front().tau[t]);
    } else {
      keep.push_back(bands.front().tau[t]);
    }
  }
  return keep;
}

// Integral of [1(y >= 0) - C f(y)] over the real line for the step extension
// C f (0 below the grid, f(y_g) on [y_g, y_{g+1}), 1 from the last point on).
inline double step_mean(const std::vector<double>& grid, const VectorXd& F) {
  if (grid.empty()) throw ConfigError("average effect needs a nonempty grid");
  const std::size_t G = grid.size();
  auto pos_len = [](double a, double b) {  // length of [a, b) intersected with [0, inf)
    return std::max(0.0, b - std::max(a, 0.0));
  };
  auto neg_len = [](double a, double b) {  // length of [a, b) intersected with (-inf, 0)
    return std::max(0.0, std::min(b, 0.0) - a);
  };
  double mu = 0.0;
  // Below the grid: integrand 1(y >= 0).
  mu += std::max(0.0, grid[0]);
  for (std::size_t g = 0; g + 1 < G; ++g) {
    const double a = grid[g], b = grid[g + 1], c = F[static_cast<Eigen::Index>(g)];
    mu += pos_len(a, b) * (1.0 - c) - neg_len(a, b) * c;
  }
  // Above the grid: integrand 1(y >= 0) - 1.
  mu -= std::max(0.0, -grid[G - 1]);
  return mu;
}

// -sum_g (phi1_g - phi0_g)(y_{g+1} - y_g): the step integral of the influence
// difference. The unit extension beyond the grid cancels in the difference.
inline VectorXd average_effect_influence(const std::vector<double>& grid, const std::vector<VectorXd>& phi1,
                                         const std::vector<VectorXd>& phi0) {
  const auto n = phi1.front().size();
  VectorXd out = VectorXd::Zero(n);
  for (std::size_t g = 0; g + 1 < grid.size(); ++g) out -= (grid[g + 1] - grid[g]) * (phi1[g] - phi0[g]);
  return out;
}

struct AverageEffect {
  double mu0 = 0.0, mu1 = 0.0, delta = 0.0;
  double se = 0.0;
  double level = 0.95;
  double critical_value = 0.0;  // normal or bootstrap
  bool bootstrap = false;
  double lower = 0.0, upper = 0.0;
  bool support_incomplete = false;
};

// F0, F1: shape-restricted corrected series; phi0, phi1: per-grid-point
// influence columns. A null Multipliers pointer uses the normal quantile.
inline AverageEffect average_effect(const DyadPanel& panel, const std::vector<double>& grid, const VectorXd& F0,
                                    const VectorXd& F1, const std::vector<VectorXd>& phi0,
                                    const std::vector<VectorXd>& phi1, ClusterMode mode, double level,
                                    const Multipliers* mult = nullptr, int M = 0, double support_tol = 1e-3) {
  AverageEffect ae;
  ae.level = level;
  ae.mu0 = step_mean(grid, F0);
  ae.mu1 = step_mean(grid, F1);
  ae.delta = ae.mu1 - ae.mu0;
  ae.support_incomplete = F0[F0.size() - 1] < 1.0 - support_tol || F1[F1.size() - 1] < 1.0 - support_tol;
  const VectorXd phi = average_effect_influence(grid, phi1, phi0);
  ae.se = influence_se(panel, phi, mode, "average effect");
  if (mult && M > 0) {
    const MatrixXd draws = bootstrap_draws(phi, *mult, M);
    std::vector<double> t(static_cast<std::size_t>(M));
    for (int m = 0; m < M; ++m) t[static_cast<std::size_t>(m)] = ae.se > 0.0 ? std::abs(draws(m, 0)) / ae.se : 0.0;
    ae.critical_value = critical_value(t, level);
    ae.bootstrap = true;
  } else {
    ae.critical_value = pointwise_critical_value(level);
  }
  ae.lower = ae.delta - ae.critical_value * ae.se;
  ae.upper = ae.delta + ae.critical_value * ae.se;
  return ae;
}

}  // namespace fedr
