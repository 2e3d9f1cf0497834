#pragma once

// Damped Newton for concave GLM log-likelihoods with an additive two-way
// effect index  pi_ij = x_ij' beta + alpha_i + gamma_j + offset_ij.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "fedr/error.hpp"
#include "fedr/panel.hpp"
#include "fedr/twoway.hpp"

namespace fedr {

struct SolverOptions {
  double tol = 1e-8;        // sup-norm of the score
  int max_iter = 100;
  double clamp_bound = 30.0;
  int max_halvings = 60;
  // Relative slack when comparing log-likelihoods across a step; absorbs
  // rounding once the iterate is already at the optimum.
  double ll_slack = 1e-12;
  // Extra Newton steps once the tolerance is met (quadratic convergence makes
  // one step cheap insurance for downstream derivatives).
  int polish_steps = 1;
};

struct NewtonResult {
  VectorXd theta;  // (beta, alpha, gamma)
  VectorXd index;  // per-dyad pi
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
  std::vector<double> trace;  // log-likelihood after each accepted step
};

// Per-dyad linear index for parameter vector theta = (beta, alpha, gamma).
inline VectorXd linear_index(const DyadPanel& panel, const MatrixXd& x, const VectorXd& theta,
                             const VectorXd* offset = nullptr) {
  const int dx = static_cast<int>(x.cols()), I = panel.I();
  VectorXd pi = dx > 0 ? VectorXd(x * theta.head(dx)) : VectorXd::Zero(panel.n());
  for (int d = 0; d < panel.n(); ++d) pi[d] += theta[dx + panel.sender(d)] + theta[dx + I + panel.receiver(d)];
  if (offset) pi += *offset;
  return pi;
}

// Shifts alpha by -m and gamma by +m so that sum(alpha) - sum(gamma) = 0.
// The index is unchanged.
inline void normalize_effects(VectorXd& theta, int dx, int I, int J) {
  const double m = (theta.segment(dx, I).sum() - theta.segment(dx + I, J).sum()) / (I + J);
  theta.segment(dx, I).array() -= m;
  theta.segment(dx + I, J).array() += m;
}

// Family concept:
//   double loglik(double pi, int d) const;
//   double residual(double pi, int d) const;   // d loglik / d pi
//   double weight(double pi, int d) const;     // -d^2 loglik / d pi^2
template <class Family>
NewtonResult newton_solve(const DyadPanel& panel, const Family& family, const MatrixXd& x, const VectorXd& offset,
                          VectorXd theta, const std::vector<bool>& fixed, const SolverOptions& opts) {
  const int dx = static_cast<int>(x.cols()), I = panel.I(), J = panel.J(), n = panel.n();
  auto total_loglik = [&](const VectorXd& pi) {
    double s = 0.0;
    for (int d = 0; d < n; ++d) s += family.loglik(pi[d], d);
    return s;
  };
  auto gradient = [&](const VectorXd& pi) {
    VectorXd r(n);
    for (int d = 0; d < n; ++d) r[d] = family.residual(pi[d], d);
    VectorXd g = VectorXd::Zero(dx + I + J);
    if (dx > 0) g.head(dx) = x.transpose() * r;
    for (int d = 0; d < n; ++d) {
      g[dx + panel.sender(d)] += r[d];
      g[dx + I + panel.receiver(d)] += r[d];
    }
    for (int u = 0; u < I + J; ++u)
      if (!fixed.empty() && fixed[u]) g[dx + u] = 0.0;
    return g;
  };

  NewtonResult res;
  VectorXd pi = linear_index(panel, x, theta, &offset);
  double ll = total_loglik(pi);
  res.trace.push_back(ll);
  VectorXd g = gradient(pi);
  res.grad_norm = g.cwiseAbs().maxCoeff();
  int polish = opts.polish_steps;
  while (res.iterations < opts.max_iter && res.grad_norm > 0.0) {
    if (res.grad_norm <= opts.tol && polish-- <= 0) break;
    VectorXd w(n);
    for (int d = 0; d < n; ++d) w[d] = family.weight(pi[d], d);
    const ArrowSystem sys(panel, x, w, fixed);
    auto search = [&](const VectorXd& step) {
      double t = 1.0;
      for (int h = 0; h <= opts.max_halvings; ++h, t *= 0.5) {
        const VectorXd cand = theta + t * step;
        const VectorXd cand_pi = linear_index(panel, x, cand, &offset);
        const double cand_ll = total_loglik(cand_pi);
        if (std::isfinite(cand_ll) && cand_ll >= ll - opts.ll_slack * std::max(1.0, std::abs(ll))) {
          theta = cand;
          pi = cand_pi;
          ll = cand_ll;
          return true;
        }
      }
      return false;
    };
    bool accepted = search(sys.pinv_apply(g));
    // Near-zero weights can leave the Newton step without ascent; fall back
    // to a scaled gradient step.
    if (!accepted && res.grad_norm > opts.tol) accepted = search(g / std::max(1.0, g.cwiseAbs().maxCoeff()));
    ++res.iterations;
    if (!accepted) break;
    res.trace.push_back(ll);
    g = gradient(pi);
    res.grad_norm = g.cwiseAbs().maxCoeff();
  }
  res.converged = res.grad_norm <= opts.tol;
  normalize_effects(theta, dx, I, J);
  res.theta = std::move(theta);
  res.index = linear_index(panel, x, res.theta, &offset);
  return res;
}

}  // namespace fedr
