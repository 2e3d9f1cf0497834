#pragma once

// Poisson fixed-effects ML and the implied counterfactual distributions.

#include <cmath>
#include <sstream>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "fedr/error.hpp"
#include "fedr/newton.hpp"
#include "fedr/panel.hpp"

namespace fedr {

struct PoissonFit {
  VectorXd beta, alpha, gamma;
  VectorXd rate;  // lambda_ij
  int iterations = 0;
  double grad_norm = 0.0;
  std::vector<double> objective_trace;
  std::vector<bool> sender_zero, receiver_zero;  // all-zero units, clamped

  VectorXd theta() const {
    VectorXd t(beta.size() + alpha.size() + gamma.size());
    t << beta, alpha, gamma;
    return t;
  }
};

struct PoissonFamily {
  const VectorXd* y;
  double loglik(double pi, int d) const { return (*y)[d] * pi - std::exp(pi); }
  double residual(double pi, int d) const { return (*y)[d] - std::exp(pi); }
  double weight(double pi, int) const { return std::exp(pi); }
};

inline PoissonFit fit_poisson(const DyadPanel& panel, const SolverOptions& opts = {}) {
  const int dx = panel.dx(), I = panel.I(), J = panel.J();
  const VectorXd& y = panel.y();
  for (int d = 0; d < panel.n(); ++d)
    if (y[d] < 0.0) throw ValidationError("Poisson fit needs nonnegative outcomes");
  if (y.sum() == 0.0) throw DegenerateThresholdError("all outcomes are zero; Poisson fit is degenerate", 0.0);

  PoissonFit fit;
  std::vector<bool> fixed(I + J, false);
  bool any_fixed = false;
  VectorXd theta = VectorXd::Zero(dx + I + J);
  // Start from log of unit means so the first step is modest.
  const double lm = std::log(y.mean());
  theta.segment(dx, I).setConstant(0.5 * lm);
  theta.segment(dx + I, J).setConstant(0.5 * lm);
  fit.sender_zero.assign(I, false);
  fit.receiver_zero.assign(J, false);
  for (int i = 0; i < I; ++i) {
    double s = 0.0;
    for (int d : panel.dyads_of_sender(i)) s += y[d];
    if (s == 0.0) {
      fit.sender_zero[i] = fixed[i] = any_fixed = true;
      theta[dx + i] = -opts.clamp_bound;
    }
  }
  for (int j = 0; j < J; ++j) {
    double s = 0.0;
    for (int d : panel.dyads_of_receiver(j)) s += y[d];
    if (s == 0.0) {
      fit.receiver_zero[j] = fixed[I + j] = any_fixed = true;
      theta[dx + I + j] = -opts.clamp_bound;
    }
  }
  const PoissonFamily fam{&y};
  const NewtonResult res = newton_solve(panel, fam, panel.x(), VectorXd::Zero(panel.n()), std::move(theta),
                                        any_fixed ? fixed : std::vector<bool>{}, opts);
  if (!res.converged) throw ConvergenceError("Poisson fixed-effects fit did not converge", res.iterations, res.grad_norm);
  fit.beta = res.theta.head(dx);
  fit.alpha = res.theta.segment(dx, I);
  fit.gamma = res.theta.segment(dx + I, J);
  fit.rate = res.index.array().exp();
  fit.iterations = res.iterations;
  fit.grad_norm = res.grad_norm;
  fit.objective_trace = res.trace;
  return fit;
}

// P(N <= floor(y)) for N ~ Poisson(lambda).
inline double poisson_cdf(double y, double lambda) {
  if (y < 0.0) return 0.0;
  if (!(lambda > 0.0)) return 1.0;
  const double k = std::floor(y);
  if (lambda <= 30.0) {
    double term = std::exp(-lambda), sum = term;
    const long kmax = static_cast<long>(std::min(k, 1e6));
    for (long m = 1; m <= kmax; ++m) {
      term *= lambda / static_cast<double>(m);
      sum += term;
      if (static_cast<double>(m) > lambda && term < 1e-18 * sum) break;
    }
    return std::min(sum, 1.0);
  }
  return boost::math::gamma_q(k + 1.0, lambda);
}

// Average over dyads of the Poisson CDF at counterfactual rates
// exp(x_k'beta + alpha_i + gamma_j).
inline VectorXd poisson_distribution(const DyadPanel& panel, const PoissonFit& fit, const MatrixXd& xk,
                                     const std::vector<double>& grid) {
  VectorXd rate = fit.rate;
  if (panel.dx() > 0) rate = rate.cwiseProduct(((xk - panel.x()) * fit.beta).array().exp().matrix());
  VectorXd F(static_cast<Eigen::Index>(grid.size()));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double s = 0.0;
    for (int d = 0; d < panel.n(); ++d) s += poisson_cdf(grid[g], rate[d]);
    F[static_cast<Eigen::Index>(g)] = s / panel.n();
  }
  return F;
}

}  // namespace fedr
