#pragma once

// Exact identities that a correct fit must satisfy at every threshold:
// plug-in null distribution equals the ECDF, score equations hold, the null
// counterfactual projection is identically one with zero distribution bias,
// and the structured pseudo-inverse solves the Hessian system.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "fedr/bias_correction.hpp"
#include "fedr/fe_logit.hpp"
#include "fedr/logistic.hpp"
#include "fedr/panel.hpp"
#include "fedr/projections.hpp"
#include "fedr/rng.hpp"

namespace fedr {

struct IdentityCheck {
  std::string name;
  double y = 0.0;
  double residual = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct VerifyOptions {
  std::vector<double> grid_indices{0.25, 0.5, 0.75};
  double beta_perturbation = 0.0;  // test hook, added to every coefficient after fitting
  double tol_ecdf = 1e-6;
  double tol_foc = 1e-8;
  double tol_psi = 1e-10;
  double tol_null_bias = 1e-8;
  double tol_pinv = 1e-8;
  int dense_limit = 160;  // dense SVD cross-check only up to this many parameters
  double dense_max_condition = 1e8;
  SolverOptions solver;
};

struct VerifyReport {
  std::vector<IdentityCheck> checks;
  std::vector<double> skipped;  // degenerate thresholds
  std::vector<std::string> messages;
  std::vector<int> flagged;  // per verified threshold

  bool passed() const {
    if (checks.empty()) return false;
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }
  std::vector<const IdentityCheck*> failures() const {
    std::vector<const IdentityCheck*> f;
    for (const auto& c : checks)
      if (!c.passed) f.push_back(&c);
    return f;
  }
  nlohmann::json to_json() const {
    nlohmann::json j{{"passed", passed()}, {"skipped_thresholds", skipped}, {"messages", messages}, {"flagged_units", flagged}};
    j["checks"] = nlohmann::json::array();
    for (const auto& c : checks)
      j["checks"].push_back(
          {{"identity", c.name}, {"y", c.y}, {"residual", c.residual}, {"tolerance", c.tolerance}, {"passed", c.passed}});
    return j;
  }
};

namespace detail {

// n^{-1} sum_d w_d z_d z_d' v with z_d = (x_d, e_i, e_j).
inline VectorXd arrow_apply(const DyadPanel& p, const VectorXd& w, const VectorXd& v) {
  const int dx = p.dx(), I = p.I();
  VectorXd out = VectorXd::Zero(v.size());
  for (int d = 0; d < p.n(); ++d) {
    const int a = dx + p.sender(d), b = dx + I + p.receiver(d);
    double s = v[a] + v[b];
    if (dx > 0) s += p.x().row(d).dot(v.head(dx));
    s *= w[d];
    if (dx > 0) out.head(dx) += s * p.x().row(d).transpose();
    out[a] += s;
    out[b] += s;
  }
  return out / static_cast<double>(p.n());
}

// Upper bound on the infinity norm of n^{-1} sum_d w_d z_d z_d'.
inline double row_sum_bound(const DyadPanel& p, const VectorXd& w) {
  const int dx = p.dx(), I = p.I();
  VectorXd rows = VectorXd::Zero(dx + I + p.J());
  for (int d = 0; d < p.n(); ++d) {
    const double l1 = 2.0 + (dx > 0 ? p.x().row(d).cwiseAbs().sum() : 0.0);
    for (int k = 0; k < dx; ++k) rows[k] += w[d] * std::abs(p.x()(d, k)) * l1;
    rows[dx + p.sender(d)] += w[d] * l1;
    rows[dx + I + p.receiver(d)] += w[d] * l1;
  }
  return rows.maxCoeff() / static_cast<double>(p.n());
}

}  // namespace detail

// Small complete I x J panel with one continuous and one binary covariate;
// the default case for the identity suite.
inline DyadPanel verification_panel(int I, int J, std::uint64_t seed) {
  if (I < 2 || J < 2) throw ConfigError("verification panel needs at least 2 units per side");
  const KeyedRng rng(seed, kDomainSimulation);
  std::vector<int> s, r;
  VectorXd y(I * J);
  MatrixXd x(I * J, 2);
  for (int i = 0; i < I; ++i)
    for (int j = 0; j < J; ++j) {
      const auto key = KeyedRng::pair_key(i, j);
      const int d = static_cast<int>(s.size());
      x(d, 0) = rng.normal(1, key);
      x(d, 1) = rng.uniform(2, key) < 0.5 ? 1.0 : 0.0;
      // Latin-square levels keep every unit on both sides of interior thresholds.
      y[d] = static_cast<double>((i + 2 * j) % std::max(I, J)) + 0.3 * (x(d, 0) - x(d, 1)) +
             0.3 * logistic_quantile(rng.uniform(5, key));
      s.push_back(i);
      r.push_back(j);
    }
  return DyadPanel::from_indices(std::move(s), std::move(r), std::move(y), std::move(x), {"x1", "x2"});
}

// Copy of `panel` with sender i's outcomes pushed above every threshold, so
// that unit is separated (all indicators zero) on the whole grid.
inline DyadPanel clamp_sender(const DyadPanel& panel, int i) {
  if (i < 0 || i >= panel.I()) throw ConfigError("clamped sender out of range");
  VectorXd y = panel.y();
  const double hi = y.maxCoeff() + 1.0 + std::abs(y.maxCoeff());
  for (int d : panel.dyads_of_sender(i)) y[d] = hi;
  std::vector<int> s(panel.n()), r(panel.n());
  for (int d = 0; d < panel.n(); ++d) {
    s[d] = panel.sender(d);
    r[d] = panel.receiver(d);
  }
  return DyadPanel::from_indices(std::move(s), std::move(r), std::move(y), panel.x(), panel.covariate_names(),
                                 panel.sender_labels(), panel.receiver_labels());
}

inline VerifyReport verify_panel(const DyadPanel& panel, const VerifyOptions& opt = {}) {
  VerifyReport rep;
  const ThresholdGrid grid = build_grid(panel, QuantileIndexed{opt.grid_indices}, {panel.y().minCoeff(), panel.y().maxCoeff()});
  const int dx = panel.dx(), I = panel.I(), J = panel.J();
  auto add = [&](const std::string& name, double y, double r, double tol) {
    rep.checks.push_back({name, y, r, tol, std::isfinite(r) && r <= tol});
  };
  for (double y : grid.values) {
    ThresholdFit fit;
    try {
      fit = fit_threshold(panel, y, nullptr, opt.solver);
    } catch (const DegenerateThresholdError& e) {
      rep.skipped.push_back(y);
      rep.messages.push_back(e.what());
      continue;
    }
    if (opt.beta_perturbation != 0.0 && dx > 0) {
      fit.beta.array() += opt.beta_perturbation;
      fit.index = panel.x() * fit.beta;
      for (int d = 0; d < panel.n(); ++d) fit.index[d] += fit.alpha[panel.sender(d)] + fit.gamma[panel.receiver(d)];
      fit.prob = fit.index.unaryExpr([](double v) { return logistic_cdf(v); });
    }
    int flagged = 0;
    for (auto f : fit.sender_flags) flagged += f != Separation::None;
    for (auto f : fit.receiver_flags) flagged += f != Separation::None;
    rep.flagged.push_back(flagged);

    const VectorXd z = threshold_indicators(panel, y);
    const VectorXd prob = fit.index.unaryExpr([](double v) { return logistic_cdf(v); });
    add("ecdf", y, std::abs(prob.mean() - z.mean()), opt.tol_ecdf);

    // Score equations, degenerate units excluded.
    const VectorXd r = z - prob;
    double foc = dx > 0 ? (panel.x().transpose() * r).cwiseAbs().maxCoeff() : 0.0;
    for (int i = 0; i < I; ++i)
      if (fit.sender_flags[i] == Separation::None) {
        double s = 0.0;
        for (int d : panel.dyads_of_sender(i)) s += r[d];
        foc = std::max(foc, std::abs(s));
      }
    for (int j = 0; j < J; ++j)
      if (fit.receiver_flags[j] == Separation::None) {
        double s = 0.0;
        for (int d : panel.dyads_of_receiver(j)) s += r[d];
        foc = std::max(foc, std::abs(s));
      }
    add("foc", y, foc, opt.tol_foc);

    try {
      const ProjectionSet ps = project(panel, fit, {panel.x()});
      add("psi_one", y, (ps.psi[0].array() - 1.0).abs().maxCoeff(), opt.tol_psi);
      if (dx > 0) {
        const BiasComponents bc = bias_components(panel, fit, ps);
        add("null_bias", y, std::max(std::abs(bc.B_lambda[0]), std::abs(bc.D_lambda[0])), opt.tol_null_bias);
        add("null_dF_dbeta", y, ps.dF_dbeta.cwiseAbs().maxCoeff(), opt.tol_null_bias);
      }

      // Pseudo-inverse: H z = P g on the free block, z orthogonal to the
      // location direction and zero on separated units.
      const HessianSystem H(panel, fit);
      const KeyedRng rng(0x5EED, kDomainCalibration);
      const int m = dx + I + J;
      VectorXd g(m);
      for (int k = 0; k < m; ++k) g[k] = rng.normal(static_cast<std::uint64_t>(y * 1e6), static_cast<std::uint64_t>(k));
      VectorXd u = H.null_direction(), u_free = u;
      for (int i = 0; i < I; ++i)
        if (fit.sender_flags[i] != Separation::None) g[dx + i] = u_free[dx + i] = 0.0;
      for (int j = 0; j < J; ++j)
        if (fit.receiver_flags[j] != Separation::None) g[dx + I + j] = u_free[dx + I + j] = 0.0;
      if (H.has_null_direction()) g -= (u.dot(g) / u.dot(u_free)) * u_free;
      const VectorXd sol = H.pinv_apply(g);
      double pinv_masked = 0.0;
      // Normwise backward error |Hz - g| / (|H| |z| + |g|), with the row-sum
      // bound for |H|; the forward comparison below needs a well-conditioned H.
      VectorXd res = detail::arrow_apply(panel, H.weights(), sol) - g;
      for (int k = dx; k < m; ++k)
        if (u_free[k] == 0.0) {
          res[k] = 0.0;  // masked rows are not part of the solved system
          pinv_masked = std::max(pinv_masked, std::abs(sol[k]));
        }
      const double hnorm = detail::row_sum_bound(panel, H.weights());
      double pinv = res.cwiseAbs().maxCoeff() / (hnorm * sol.cwiseAbs().maxCoeff() + g.cwiseAbs().maxCoeff());
      pinv = std::max(pinv, pinv_masked);
      if (H.has_null_direction())
        pinv = std::max(pinv, std::abs(u_free.dot(sol)) / std::max(1.0, u_free.norm() * sol.norm()));
      if (flagged == 0 && m <= opt.dense_limit) {
        const Eigen::JacobiSVD<MatrixXd> svd(H.dense(panel), Eigen::ComputeFullU | Eigen::ComputeFullV);
        const VectorXd sv = svd.singularValues();
        VectorXd inv = VectorXd::Zero(sv.size());
        for (Eigen::Index k = 0; k < sv.size(); ++k)
          if (sv[k] > 1e-10 * sv[0]) inv[k] = 1.0 / sv[k];
        const Eigen::Index rank = (inv.array() != 0.0).count();
        if (rank > 0 && sv[0] / sv[rank - 1] <= opt.dense_max_condition) {
          const VectorXd ref = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose() * g;
          pinv = std::max(pinv, (ref - sol).cwiseAbs().maxCoeff() / std::max(1.0, ref.cwiseAbs().maxCoeff()));
        } else {
          rep.messages.push_back("y=" + std::to_string(y) + ": Hessian is ill-conditioned, dense comparison skipped");
        }
      }
      add("pinv", y, pinv, opt.tol_pinv);
    } catch (const SingularSystemError& e) {
      rep.messages.push_back("y=" + std::to_string(y) + ": " + e.what());
      add("pinv", y, std::numeric_limits<double>::infinity(), opt.tol_pinv);
    }
  }
  return rep;
}

}  // namespace fedr
