#pragma once

// Lambda'-weighted two-way projections of the covariates and of the
// counterfactual derivative ratio, and the matrices W(y) and dF/dbeta built
// from them.

#include <vector>

#include <Eigen/Dense>

#include "fedr/fe_logit.hpp"
#include "fedr/logistic.hpp"
#include "fedr/panel.hpp"
#include "fedr/twoway.hpp"

namespace fedr {

// Per-threshold projection set. Counterfactual entries are aligned with the
// list of counterfactual covariate matrices passed in.
struct ProjectionSet {
  VectorXd lambda1;                    // Lambda'(pi_ij)
  std::vector<VectorXd> index_k;       // counterfactual indices x_k'beta + alpha + gamma
  std::vector<VectorXd> lambda1_k;     // Lambda'(index_k)
  MatrixXd tilde_x;                    // n x dx
  std::vector<MatrixXd> tilde_xk;      // n x dx per k
  std::vector<VectorXd> psi;           // Psi_{ij,k}
  MatrixXd W;                          // dx x dx
  MatrixXd dF_dbeta;                   // |K| x dx
};

inline VectorXd counterfactual_index(const VectorXd& index, const MatrixXd& x, const MatrixXd& xk,
                                     const VectorXd& beta) {
  if (beta.size() == 0) return index;
  return index + (xk - x) * beta;
}

namespace detail {

// Two-way fitted surface a_i + c_j given the right-hand side of the normal
// equations (sums of w * target by unit).
inline VectorXd twoway_fitted_rhs(const TwoWayFactor& fac, const DyadPanel& panel, VectorXd rhs) {
  VectorXd z = fac.ginv(rhs);
  fac.project_out_null(z);
  VectorXd out(panel.n());
  for (int d = 0; d < panel.n(); ++d) out[d] = z[panel.sender(d)] + z[fac.I() + panel.receiver(d)];
  return out;
}

inline VectorXd unit_sums(const DyadPanel& panel, const VectorXd& v) {
  VectorXd r = VectorXd::Zero(panel.I() + panel.J());
  for (int d = 0; d < panel.n(); ++d) {
    r[panel.sender(d)] += v[d];
    r[panel.I() + panel.receiver(d)] += v[d];
  }
  return r;
}

}  // namespace detail

// Residual of the weighted two-way least-squares fit of each column of `x`.
inline MatrixXd project_columns(const DyadPanel& panel, const TwoWayFactor& fac, const VectorXd& w,
                                const MatrixXd& x) {
  MatrixXd out = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const VectorXd wx = w.cwiseProduct(x.col(c));
    out.col(c) -= detail::twoway_fitted_rhs(fac, panel, detail::unit_sums(panel, wx));
  }
  return out;
}

// General form: weights and counterfactual weights come from the supplied
// index and slope (plug-in from a fit, or true parameters in simulation).
inline ProjectionSet project(const DyadPanel& panel, const VectorXd& index, const VectorXd& beta,
                             const std::vector<MatrixXd>& counterfactuals) {
  const int n = panel.n(), dx = panel.dx();
  const auto K = counterfactuals.size();
  ProjectionSet ps;
  ps.lambda1 = index.unaryExpr([](double v) { return logistic_d1(v); });
  const TwoWayFactor fac(panel, ps.lambda1);

  ps.tilde_x = project_columns(panel, fac, ps.lambda1, panel.x());
  // Fitted a_i + c_j of each covariate; the counterfactual residual subtracts
  // the same surface from x_k.
  const MatrixXd x_fit = panel.x() - ps.tilde_x;

  ps.W = MatrixXd::Zero(dx, dx);
  for (int d = 0; d < n; ++d) {
    const auto t = ps.tilde_x.row(d).transpose();
    ps.W.noalias() += ps.lambda1[d] * t * t.transpose();
  }
  ps.W /= static_cast<double>(n);
  ps.W = 0.5 * (ps.W + ps.W.transpose());

  ps.dF_dbeta = MatrixXd::Zero(static_cast<Eigen::Index>(K), dx);
  for (std::size_t k = 0; k < K; ++k) {
    const MatrixXd& xk = counterfactuals[k];
    ps.index_k.push_back(counterfactual_index(index, panel.x(), xk, beta));
    ps.lambda1_k.push_back(ps.index_k.back().unaryExpr([](double v) { return logistic_d1(v); }));
    ps.tilde_xk.push_back(xk - x_fit);
    // Weighted target Lambda'_k / Lambda' times weight Lambda' is Lambda'_k.
    ps.psi.push_back(detail::twoway_fitted_rhs(fac, panel, detail::unit_sums(panel, ps.lambda1_k.back())));
    if (dx > 0)
      ps.dF_dbeta.row(static_cast<Eigen::Index>(k)) =
          (ps.tilde_xk.back().transpose() * ps.lambda1_k.back()).transpose() / static_cast<double>(n);
  }
  return ps;
}

inline ProjectionSet project(const DyadPanel& panel, const ThresholdFit& fit,
                             const std::vector<MatrixXd>& counterfactuals) {
  return project(panel, fit.index, fit.beta, counterfactuals);
}

// Alternative form of dF/dbeta from the raw covariate change; agrees with the
// projected form when Lambda'_k / Lambda' lies in the two-way span.
inline MatrixXd dF_dbeta_raw(const DyadPanel& panel, const ProjectionSet& ps,
                             const std::vector<MatrixXd>& counterfactuals) {
  MatrixXd out(static_cast<Eigen::Index>(counterfactuals.size()), panel.dx());
  for (std::size_t k = 0; k < counterfactuals.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) =
        ((counterfactuals[k] - panel.x()).transpose() * ps.lambda1_k[k]).transpose() / static_cast<double>(panel.n());
  return out;
}

}  // namespace fedr
