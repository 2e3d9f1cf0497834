#pragma once

// Weighted two-way normal equations shared by the Newton solvers, the Hessian
// pseudo-inverse and the covariate projections.
//
// For per-dyad weights w_ij the fixed-effect block is
//
//   F = sum_{(i,j) in D} w_ij (e_i, e_j)(e_i, e_j)'        ((I+J) x (I+J))
//
// whose null space is spanned by v = (1_I, -1_J) when the bipartite graph of
// observed pairs is connected. F is Jacobi-scaled to unit diagonal and the
// scaled null direction is added back as a rank-one term, which yields a
// symmetric positive definite matrix C and a generalized inverse
// G = D^{-1/2} C^{-1} D^{-1/2} of F. Covariates enter through the arrow
// structure [[A, B], [B', F]] and are eliminated by a d_x x d_x Schur complement.

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedr/error.hpp"
#include "fedr/panel.hpp"

namespace fedr {

class TwoWayFactor {
 public:
  TwoWayFactor() = default;

  // `fixed` (size I+J, optional) marks effects held constant; their rows and
  // columns are decoupled from the system.
  TwoWayFactor(const DyadPanel& panel, const VectorXd& w, const std::vector<bool>& fixed = {})
      : I_(panel.I()), J_(panel.J()), fixed_(fixed) {
    const int m = I_ + J_;
    if (fixed_.empty()) fixed_.assign(m, false);
    MatrixXd F = MatrixXd::Zero(m, m);
    for (int d = 0; d < panel.n(); ++d) {
      const int a = panel.sender(d), b = I_ + panel.receiver(d);
      const double wd = w[d];
      F(a, a) += wd;
      F(b, b) += wd;
      if (!fixed_[a] && !fixed_[b]) {
        F(a, b) += wd;
        F(b, a) += wd;
      }
    }
    scale_.resize(m);
    null_.setZero(m);
    masked_ = false;
    for (int u = 0; u < m; ++u) {
      if (fixed_[u]) {
        masked_ = true;
        F.row(u).setZero();
        F.col(u).setZero();
        F(u, u) = 1.0;
      }
      if (!(F(u, u) > 0.0) || !std::isfinite(F(u, u))) {
        std::ostringstream os;
        os << "fixed-effect block has zero total weight for " << (u < I_ ? "sender " : "receiver ")
           << (u < I_ ? u : u - I_) + 1;
        throw SingularSystemError(os.str());
      }
      scale_[u] = 1.0 / std::sqrt(F(u, u));
      if (!fixed_[u]) null_[u] = u < I_ ? 1.0 : -1.0;
    }
    MatrixXd S = scale_.asDiagonal() * F * scale_.asDiagonal();
    VectorXd uhat = null_.cwiseQuotient(scale_);
    const double nrm = uhat.norm();
    if (nrm > 0.0) uhat /= nrm;
    // Under a mask the location direction may carry curvature; complete only
    // when it is (numerically) null.
    const double curvature = nrm > 0.0 ? uhat.dot(S * uhat) : 1.0;
    completed_ = curvature < 1e-12;
    if (completed_) S.noalias() += uhat * uhat.transpose();
    llt_.compute(S);
    bool ok = llt_.info() == Eigen::Success;
    if (ok) {
      const VectorXd diag = MatrixXd(llt_.matrixL()).diagonal();
      ok = diag.minCoeff() > 1e-7;
    }
    if (!ok)
      throw SingularSystemError(
          "fixed-effect block is singular beyond the location direction "
          "(the sender/receiver graph of observed pairs is disconnected)");
  }

  int I() const noexcept { return I_; }
  int J() const noexcept { return J_; }
  bool completed() const noexcept { return completed_; }
  bool masked() const noexcept { return masked_; }
  const std::vector<bool>& fixed() const noexcept { return fixed_; }

  // Location direction (1_I, -1_J) restricted to free effects.
  const VectorXd& null_direction() const noexcept { return null_; }

  // G r for the generalized inverse G of F.
  VectorXd ginv(const VectorXd& r) const {
    VectorXd t = scale_.cwiseProduct(r);
    for (int u = 0; u < I_ + J_; ++u)
      if (fixed_[u]) t[u] = 0.0;
    VectorXd z = scale_.cwiseProduct(llt_.solve(t));
    for (int u = 0; u < I_ + J_; ++u)
      if (fixed_[u]) z[u] = 0.0;
    return z;
  }
  MatrixXd ginv(const MatrixXd& r) const {
    MatrixXd out(r.rows(), r.cols());
    for (Eigen::Index c = 0; c < r.cols(); ++c) out.col(c) = ginv(VectorXd(r.col(c)));
    return out;
  }

  // Removes the component along the location direction.
  void project_out_null(VectorXd& z) const {
    const double nn = null_.squaredNorm();
    if (nn > 0.0) z -= (null_.dot(z) / nn) * null_;
  }

  // Minimum-norm least-squares effects (a, c) of the weighted fit of `target`
  // on a_i + c_j; representative satisfies sum a - sum c = 0.
  VectorXd effects(const DyadPanel& panel, const VectorXd& w, const VectorXd& target) const {
    VectorXd r = VectorXd::Zero(I_ + J_);
    for (int d = 0; d < panel.n(); ++d) {
      r[panel.sender(d)] += w[d] * target[d];
      r[I_ + panel.receiver(d)] += w[d] * target[d];
    }
    VectorXd z = ginv(r);
    project_out_null(z);
    return z;
  }

  // Per-dyad fitted surface a_i + c_j.
  VectorXd fitted(const DyadPanel& panel, const VectorXd& w, const VectorXd& target) const {
    const VectorXd z = effects(panel, w, target);
    VectorXd out(panel.n());
    for (int d = 0; d < panel.n(); ++d) out[d] = z[panel.sender(d)] + z[I_ + panel.receiver(d)];
    return out;
  }

 private:
  int I_ = 0, J_ = 0;
  std::vector<bool> fixed_;
  VectorXd scale_, null_;
  bool completed_ = false, masked_ = false;
  Eigen::LLT<MatrixXd> llt_;
};

// Arrow-structured system sum_d w_d z_d z_d' with z_d = (x_d, e_i, e_j),
// parameter order (beta, alpha, gamma).
class ArrowSystem {
 public:
  ArrowSystem() = default;

  ArrowSystem(const DyadPanel& panel, const MatrixXd& x, const VectorXd& w, const std::vector<bool>& fixed = {})
      : fe_(panel, w, fixed), dx_(static_cast<int>(x.cols())) {
    const int I = panel.I(), m = panel.I() + panel.J();
    A_ = MatrixXd::Zero(dx_, dx_);
    B_ = MatrixXd::Zero(dx_, m);
    for (int d = 0; d < panel.n(); ++d) {
      const auto xd = x.row(d).transpose();
      A_.noalias() += w[d] * xd * xd.transpose();
      const int a = panel.sender(d), b = I + panel.receiver(d);
      if (!fe_.fixed()[a]) B_.col(a) += w[d] * xd;
      if (!fe_.fixed()[b]) B_.col(b) += w[d] * xd;
    }
    if (dx_ > 0) {
      GBt_ = fe_.ginv(MatrixXd(B_.transpose()));
      MatrixXd schur = A_ - B_ * GBt_;
      schur = 0.5 * (schur + schur.transpose());
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(schur);
      const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
      const double low = es.eigenvalues()[0];
      if (!(low > 1e-11 * top)) {
        std::ostringstream os;
        os << "covariates are collinear with the fixed effects; near-null direction:";
        const VectorXd dir = es.eigenvectors().col(0);
        for (int c = 0; c < dx_; ++c)
          if (std::abs(dir[c]) > 1e-3) os << ' ' << panel.covariate_names()[c] << '=' << dir[c];
        throw SingularSystemError(os.str());
      }
      schur_.compute(schur);
    }
  }

  int dim() const noexcept { return dx_ + fe_.I() + fe_.J(); }
  int dx() const noexcept { return dx_; }
  const TwoWayFactor& fe() const noexcept { return fe_; }

  // Full-vector location direction (0_dx, 1_I, -1_J).
  VectorXd null_direction() const {
    VectorXd v = VectorXd::Zero(dim());
    v.tail(fe_.I() + fe_.J()) = fe_.null_direction();
    return v;
  }

  // Solves the system for a right-hand side orthogonal to the location
  // direction; returns the solution orthogonal to it. For an unmasked system
  // this equals the Moore-Penrose pseudo-inverse applied to g.
  VectorXd pinv_apply(VectorXd g) const {
    const int m = fe_.I() + fe_.J();
    const bool exact = fe_.completed() && !fe_.masked();
    if (exact) {
      VectorXd gf = g.tail(m);
      fe_.project_out_null(gf);
      g.tail(m) = gf;
    }
    VectorXd z(dim());
    const VectorXd gf = g.tail(m);
    const VectorXd Ggf = fe_.ginv(gf);
    VectorXd zx(dx_);
    if (dx_ > 0) {
      zx = schur_.solve(g.head(dx_) - B_ * Ggf);
      z.head(dx_) = zx;
    }
    VectorXd zf = Ggf - (dx_ > 0 ? VectorXd(GBt_ * zx) : VectorXd::Zero(m));
    if (exact) fe_.project_out_null(zf);
    z.tail(m) = zf;
    return z;
  }

 private:
  TwoWayFactor fe_;
  int dx_ = 0;
  MatrixXd A_, B_, GBt_;
  Eigen::LLT<MatrixXd> schur_;
};

// Dense copy of sum_d w_d z_d z_d' for small-instance checks.
inline MatrixXd dense_arrow_matrix(const DyadPanel& panel, const MatrixXd& x, const VectorXd& w) {
  const int dx = static_cast<int>(x.cols()), I = panel.I(), m = dx + panel.I() + panel.J();
  MatrixXd H = MatrixXd::Zero(m, m);
  for (int d = 0; d < panel.n(); ++d) {
    VectorXd z = VectorXd::Zero(m);
    z.head(dx) = x.row(d).transpose();
    z[dx + panel.sender(d)] = 1.0;
    z[dx + I + panel.receiver(d)] = 1.0;
    H.noalias() += w[d] * z * z.transpose();
  }
  return H;
}

}  // namespace fedr
