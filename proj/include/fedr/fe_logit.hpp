#pragma once

// Fixed-effects logit fits of the indicators 1{y_ij <= y}, one per threshold.

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedr/error.hpp"
#include "fedr/logistic.hpp"
#include "fedr/newton.hpp"
#include "fedr/panel.hpp"
#include "fedr/twoway.hpp"

namespace fedr {

// Per-unit separation marker: the unit's indicators are constant at this
// threshold and its effect was clamped.
enum class Separation : signed char { None = 0, AllZero = -1, AllOne = 1 };

struct ThresholdFit {
  double y = 0.0;
  VectorXd beta, alpha, gamma;
  VectorXd index;  // pi_ij = x'beta + alpha_i + gamma_j
  VectorXd prob;   // Lambda(pi_ij)
  int iterations = 0;
  double grad_norm = 0.0;
  std::vector<double> objective_trace;
  std::vector<Separation> sender_flags, receiver_flags;

  bool has_degenerate_units() const {
    for (auto f : sender_flags)
      if (f != Separation::None) return true;
    for (auto f : receiver_flags)
      if (f != Separation::None) return true;
    return false;
  }
  VectorXd theta() const {
    VectorXd t(beta.size() + alpha.size() + gamma.size());
    t << beta, alpha, gamma;
    return t;
  }
};

struct LogitFamily {
  const VectorXd* indicator;
  double loglik(double pi, int d) const {
    return (*indicator)[d] > 0.5 ? log_logistic(pi) : log1m_logistic(pi);
  }
  double residual(double pi, int d) const { return (*indicator)[d] - logistic_cdf(pi); }
  double weight(double pi, int) const { return logistic_d1(pi); }
};

inline VectorXd threshold_indicators(const DyadPanel& panel, double y) {
  VectorXd z(panel.n());
  for (int d = 0; d < panel.n(); ++d) z[d] = panel.y()[d] <= y ? 1.0 : 0.0;
  return z;
}

namespace detail {

inline Separation unit_separation(const std::vector<int>& dyads, const VectorXd& z) {
  double s = 0.0;
  for (int d : dyads) s += z[d];
  if (s == 0.0) return Separation::AllZero;
  if (s == static_cast<double>(dyads.size())) return Separation::AllOne;
  return Separation::None;
}

}  // namespace detail

// Log-likelihood of the binary fit at an arbitrary parameter vector.
inline double logit_loglik(const DyadPanel& panel, double y, const VectorXd& theta) {
  const VectorXd z = threshold_indicators(panel, y);
  const VectorXd pi = linear_index(panel, panel.x(), theta);
  LogitFamily fam{&z};
  double s = 0.0;
  for (int d = 0; d < panel.n(); ++d) s += fam.loglik(pi[d], d);
  return s;
}

inline ThresholdFit fit_threshold(const DyadPanel& panel, double y, const ThresholdFit* warm_start = nullptr,
                                  const SolverOptions& opts = {}) {
  if (!std::isfinite(y)) throw ConfigError("threshold must be finite");
  const int dx = panel.dx(), I = panel.I(), J = panel.J();
  const VectorXd z = threshold_indicators(panel, y);
  const double ones = z.sum();
  if (ones == 0.0 || ones == static_cast<double>(panel.n())) {
    std::ostringstream os;
    os << "degenerate threshold y=" << y << ": all indicators are " << (ones == 0.0 ? 0 : 1);
    throw DegenerateThresholdError(os.str(), y);
  }

  ThresholdFit fit;
  fit.y = y;
  fit.sender_flags.resize(I);
  fit.receiver_flags.resize(J);
  std::vector<bool> fixed(I + J, false);
  VectorXd theta = VectorXd::Zero(dx + I + J);
  if (warm_start && warm_start->beta.size() == dx && warm_start->alpha.size() == I && warm_start->gamma.size() == J)
    theta = warm_start->theta();
  for (int i = 0; i < I; ++i) {
    fit.sender_flags[i] = detail::unit_separation(panel.dyads_of_sender(i), z);
    if (fit.sender_flags[i] != Separation::None) {
      fixed[i] = true;
      theta[dx + i] = opts.clamp_bound * static_cast<double>(fit.sender_flags[i]);
    } else if (warm_start && std::abs(theta[dx + i]) >= opts.clamp_bound) {
      theta[dx + i] = 0.0;
    }
  }
  for (int j = 0; j < J; ++j) {
    fit.receiver_flags[j] = detail::unit_separation(panel.dyads_of_receiver(j), z);
    if (fit.receiver_flags[j] != Separation::None) {
      fixed[I + j] = true;
      theta[dx + I + j] = opts.clamp_bound * static_cast<double>(fit.receiver_flags[j]);
    } else if (warm_start && std::abs(theta[dx + I + j]) >= opts.clamp_bound) {
      theta[dx + I + j] = 0.0;
    }
  }
  const bool any_fixed = std::find(fixed.begin(), fixed.end(), true) != fixed.end();

  const LogitFamily fam{&z};
  NewtonResult res = newton_solve(panel, fam, panel.x(), VectorXd::Zero(panel.n()), std::move(theta),
                                  any_fixed ? fixed : std::vector<bool>{}, opts);
  // A clamped effect must put every dyad of its unit at least clamp_bound
  // beyond zero; large free effects can eat into a fixed clamp, so push the
  // clamp out and re-solve.
  for (int pass = 0; any_fixed && res.converged && pass < 4; ++pass) {
    bool moved = false;
    auto push = [&](int slot, Separation f, const std::vector<int>& dyads) {
      if (f == Separation::None) return;
      const double sgn = static_cast<double>(f);
      double margin = std::numeric_limits<double>::infinity();
      for (int d : dyads) margin = std::min(margin, sgn * res.index[d]);
      if (margin < opts.clamp_bound) {
        res.theta[slot] += sgn * (opts.clamp_bound - margin);
        moved = true;
      }
    };
    for (int i = 0; i < I; ++i) push(dx + i, fit.sender_flags[i], panel.dyads_of_sender(i));
    for (int j = 0; j < J; ++j) push(dx + I + j, fit.receiver_flags[j], panel.dyads_of_receiver(j));
    if (!moved) break;
    res = newton_solve(panel, fam, panel.x(), VectorXd::Zero(panel.n()), std::move(res.theta), fixed, opts);
  }
  if (!res.converged) {
    std::ostringstream os;
    os << "fixed-effects logit did not converge at y=" << y;
    throw ConvergenceError(os.str(), res.iterations, res.grad_norm);
  }
  fit.beta = res.theta.head(dx);
  fit.alpha = res.theta.segment(dx, I);
  fit.gamma = res.theta.segment(dx + I, J);
  fit.index = res.index;
  fit.prob = fit.index.unaryExpr([](double v) { return logistic_cdf(v); });
  fit.iterations = res.iterations;
  fit.grad_norm = res.grad_norm;
  fit.objective_trace = res.trace;
  return fit;
}

enum class FitStatus { Ok, Degenerate };

struct GridFits {
  std::vector<std::optional<ThresholdFit>> fits;  // aligned with the grid
  std::vector<FitStatus> status;
  std::vector<std::string> messages;

  bool all_ok() const {
    for (auto s : status)
      if (s != FitStatus::Ok) return false;
    return true;
  }
};

// Fits every grid point in increasing order, chaining warm starts. Degenerate
// thresholds are reported and skipped; other failures abort with the
// threshold attached.
inline GridFits fit_all(const DyadPanel& panel, const ThresholdGrid& grid, const SolverOptions& opts = {}) {
  if (grid.size() == 0) throw ConfigError("threshold grid is empty");
  GridFits out;
  const ThresholdFit* prev = nullptr;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    try {
      out.fits.emplace_back(fit_threshold(panel, grid[g], prev, opts));
      out.status.push_back(FitStatus::Ok);
      out.messages.emplace_back();
      prev = &*out.fits.back();
    } catch (const DegenerateThresholdError& e) {
      out.fits.emplace_back(std::nullopt);
      out.status.push_back(FitStatus::Degenerate);
      out.messages.emplace_back(e.what());
    } catch (const ConvergenceError& e) {
      std::ostringstream os;
      os << "threshold " << g + 1 << " (y=" << grid[g] << "): " << e.what();
      throw ConvergenceError(os.str(), e.iterations(), e.grad_norm());
    }
  }
  return out;
}

// Minus the normalized log-likelihood Hessian n^{-1} sum Lambda'(pi) w w',
// with w = (x, e_i, e_j), and its Moore-Penrose pseudo-inverse. Effects of
// separated units sit at the clamp and are not estimated; their rows and
// columns are masked out.
class HessianSystem {
 public:
  HessianSystem(const DyadPanel& panel, const ThresholdFit& fit)
      : n_(panel.n()), weights_(fit.index.unaryExpr([](double v) { return logistic_d1(v); })),
        sys_(panel, panel.x(), weights_, unit_mask(fit)) {}

  static std::vector<bool> unit_mask(const ThresholdFit& fit) {
    if (!fit.has_degenerate_units()) return {};
    std::vector<bool> m;
    for (auto f : fit.sender_flags) m.push_back(f != Separation::None);
    for (auto f : fit.receiver_flags) m.push_back(f != Separation::None);
    return m;
  }

  int dim() const noexcept { return sys_.dim(); }
  const VectorXd& weights() const noexcept { return weights_; }
  VectorXd null_direction() const { return sys_.null_direction(); }
  // False when masking separated units leaves the free block nonsingular.
  bool has_null_direction() const { return sys_.fe().completed(); }

  // H^+ g. Under a mask the location direction, when still null, is
  // projected out here; the arrow solver leaves it alone for the Newton steps.
  VectorXd pinv_apply(const VectorXd& g) const {
    if (!sys_.fe().masked() || !has_null_direction()) return static_cast<double>(n_) * sys_.pinv_apply(g);
    const VectorXd u = null_direction();
    const double uu = u.squaredNorm();
    VectorXd z = sys_.pinv_apply(g - (u.dot(g) / uu) * u);
    z -= (u.dot(z) / uu) * u;
    return static_cast<double>(n_) * z;
  }

  MatrixXd dense(const DyadPanel& panel) const {
    return dense_arrow_matrix(panel, panel.x(), weights_) / static_cast<double>(n_);
  }

 private:
  int n_;
  VectorXd weights_;
  ArrowSystem sys_;
};

inline HessianSystem hessian(const ThresholdFit& fit, const DyadPanel& panel) { return HessianSystem(panel, fit); }

// Re-solves (alpha, gamma) with beta held at `beta`; used by the alternative
// corrected distribution estimator.
struct ProfiledEffects {
  VectorXd alpha, gamma, index;
  int iterations = 0;
};

inline ProfiledEffects fit_effects_given_beta(const DyadPanel& panel, double y, const VectorXd& beta,
                                              const ThresholdFit& start, const SolverOptions& opts = {}) {
  const int I = panel.I(), J = panel.J();
  const VectorXd z = threshold_indicators(panel, y);
  const VectorXd offset = panel.x() * beta;
  std::vector<bool> fixed(I + J, false);
  VectorXd theta(I + J);
  theta << start.alpha, start.gamma;
  bool any_fixed = false;
  for (int i = 0; i < I; ++i)
    if (start.sender_flags[i] != Separation::None) fixed[i] = any_fixed = true;
  for (int j = 0; j < J; ++j)
    if (start.receiver_flags[j] != Separation::None) fixed[I + j] = any_fixed = true;
  const LogitFamily fam{&z};
  const MatrixXd none(panel.n(), 0);
  const NewtonResult res =
      newton_solve(panel, fam, none, offset, std::move(theta), any_fixed ? fixed : std::vector<bool>{}, opts);
  if (!res.converged) {
    std::ostringstream os;
    os << "profiled fixed-effects solve did not converge at y=" << y;
    throw ConvergenceError(os.str(), res.iterations, res.grad_norm);
  }
  return {res.theta.head(I), res.theta.tail(J), res.index, res.iterations};
}

}  // namespace fedr
