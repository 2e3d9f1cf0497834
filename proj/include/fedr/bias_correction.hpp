#pragma once

// Plug-in incidental-parameter bias terms and the corrected coefficient and
// distribution estimates.

#include <algorithm>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "fedr/error.hpp"
#include "fedr/fe_logit.hpp"
#include "fedr/logistic.hpp"
#include "fedr/panel.hpp"
#include "fedr/projections.hpp"

namespace fedr {

struct BiasComponents {
  VectorXd B_beta, D_beta;      // dx
  VectorXd B_lambda, D_lambda;  // |K|
  VectorXd B_F, D_F;            // |K|
  int senders_used = 0, receivers_used = 0;
};

// Unit masks for the bias averages; an empty flag list keeps every unit.
struct UnitMask {
  std::vector<bool> sender, receiver;

  static UnitMask all(int I, int J) { return {std::vector<bool>(I, true), std::vector<bool>(J, true)}; }
  static UnitMask from_fit(const ThresholdFit& fit) {
    UnitMask m;
    for (auto f : fit.sender_flags) m.sender.push_back(f == Separation::None);
    for (auto f : fit.receiver_flags) m.receiver.push_back(f == Separation::None);
    return m;
  }
};

// `index` is the fitted (or true) index at which Lambda and its derivatives
// are evaluated; `ps` must have been built from the same index.
inline BiasComponents bias_components(const DyadPanel& panel, const VectorXd& index, const ProjectionSet& ps,
                                      const UnitMask& mask) {
  const int dx = panel.dx(), I = panel.I(), J = panel.J();
  const auto K = static_cast<Eigen::Index>(ps.psi.size());
  const VectorXd l2 = index.unaryExpr([](double v) { return logistic_d2(v); });
  std::vector<VectorXd> l2k;
  for (const auto& ik : ps.index_k) l2k.push_back(ik.unaryExpr([](double v) { return logistic_d2(v); }));

  auto group = [&](const std::vector<int>& dyads, VectorXd& acc_beta, VectorXd& acc_lambda) {
    double den = 0.0;
    VectorXd nb = VectorXd::Zero(dx), nl = VectorXd::Zero(K);
    for (int d : dyads) {
      den += ps.lambda1[d];
      nb += l2[d] * ps.tilde_x.row(d).transpose();
      for (Eigen::Index k = 0; k < K; ++k) nl[k] += l2k[k][d] - l2[d] * ps.psi[k][d];
    }
    acc_beta += nb / den;
    acc_lambda += nl / den;
  };

  BiasComponents bc;
  VectorXd sb = VectorXd::Zero(dx), sl = VectorXd::Zero(K), tb = VectorXd::Zero(dx), tl = VectorXd::Zero(K);
  for (int i = 0; i < I; ++i)
    if (mask.sender.empty() || mask.sender[i]) {
      group(panel.dyads_of_sender(i), sb, sl);
      ++bc.senders_used;
    }
  for (int j = 0; j < J; ++j)
    if (mask.receiver.empty() || mask.receiver[j]) {
      group(panel.dyads_of_receiver(j), tb, tl);
      ++bc.receivers_used;
    }
  const double Iu = std::max(bc.senders_used, 1), Ju = std::max(bc.receivers_used, 1);

  if (dx > 0) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(ps.W);
    // Scale against the unprojected weighted second moments too, so a
    // covariate absorbed entirely by the effects is caught.
    const double raw = (panel.x().array().square().colwise() * ps.lambda1.array()).colwise().sum().maxCoeff() /
                       static_cast<double>(panel.n());
    const double top = es.eigenvalues().cwiseAbs().maxCoeff();
    if (!(es.eigenvalues()[0] > 1e-12 * std::max({top, raw, 1e-300})) || !(top > 0.0))
      throw SingularSystemError("projected covariate matrix W is singular (covariates collinear with the effects)");
    const Eigen::LDLT<MatrixXd> Wf(ps.W);
    bc.B_beta = -0.5 * Wf.solve(VectorXd(sb / Iu));
    bc.D_beta = -0.5 * Wf.solve(VectorXd(tb / Ju));
  } else {
    bc.B_beta = bc.D_beta = VectorXd(0);
  }
  bc.B_lambda = sl / (2.0 * Iu);
  bc.D_lambda = tl / (2.0 * Ju);
  bc.B_F = bc.B_lambda + (dx > 0 ? VectorXd(ps.dF_dbeta * bc.B_beta) : VectorXd::Zero(K));
  bc.D_F = bc.D_lambda + (dx > 0 ? VectorXd(ps.dF_dbeta * bc.D_beta) : VectorXd::Zero(K));
  return bc;
}

inline BiasComponents bias_components(const DyadPanel& panel, const ThresholdFit& fit, const ProjectionSet& ps) {
  return bias_components(panel, fit.index, ps, UnitMask::from_fit(fit));
}

inline VectorXd correct_beta(const VectorXd& beta_hat, const BiasComponents& bc, int I, int J, int n) {
  return beta_hat - (static_cast<double>(I) / n) * bc.B_beta - (static_cast<double>(J) / n) * bc.D_beta;
}

enum class Variant { Tilde, Star };

inline std::string to_string(Variant v) { return v == Variant::Tilde ? "tilde" : "star"; }
inline Variant variant_from_string(const std::string& s) {
  if (s == "tilde") return Variant::Tilde;
  if (s == "star") return Variant::Star;
  throw ConfigError("unknown variant '" + s + "' (expected tilde or star)");
}

// Plug-in counterfactual distribution n^{-1} sum Lambda(index_k).
inline double mean_logistic(const VectorXd& index) {
  double s = 0.0;
  for (Eigen::Index d = 0; d < index.size(); ++d) s += logistic_cdf(index[d]);
  return s / static_cast<double>(index.size());
}

// Everything estimated at one threshold for one set of counterfactuals.
struct ThresholdEstimate {
  double y = 0.0;
  VectorXd beta_hat, beta_tilde;
  VectorXd F_hat, F_tilde, F_star;  // |K|
  BiasComponents bias;
  int profiled_iterations = 0;
};

inline ThresholdEstimate correct_threshold(const DyadPanel& panel, const ThresholdFit& fit, const ProjectionSet& ps,
                                           const BiasComponents& bc, const std::vector<MatrixXd>& counterfactuals,
                                           bool want_star, const SolverOptions& opts = {}) {
  const int I = panel.I(), J = panel.J(), n = panel.n();
  const auto K = static_cast<Eigen::Index>(counterfactuals.size());
  ThresholdEstimate te;
  te.y = fit.y;
  te.bias = bc;
  te.beta_hat = fit.beta;
  te.beta_tilde = correct_beta(fit.beta, bc, I, J, n);
  te.F_hat.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) te.F_hat[k] = mean_logistic(ps.index_k[static_cast<std::size_t>(k)]);
  const double bI = static_cast<double>(I) / n, bJ = static_cast<double>(J) / n;
  te.F_tilde = te.F_hat - bI * bc.B_F - bJ * bc.D_F;
  if (want_star) {
    const ProfiledEffects pe = fit_effects_given_beta(panel, fit.y, te.beta_tilde, fit, opts);
    te.profiled_iterations = pe.iterations;
    te.F_star.resize(K);
    for (Eigen::Index k = 0; k < K; ++k) {
      const VectorXd idx = counterfactual_index(pe.index, panel.x(), counterfactuals[static_cast<std::size_t>(k)],
                                                te.beta_tilde);
      te.F_star[k] = mean_logistic(idx) - bI * bc.B_lambda[k] - bJ * bc.D_lambda[k];
    }
  }
  return te;
}

// Monotone rearrangement followed by clipping to [0, 1].
inline std::vector<double> shape_restrict(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  for (double& x : v) x = std::clamp(x, 0.0, 1.0);
  return v;
}
inline VectorXd shape_restrict(const VectorXd& v) {
  const auto s = shape_restrict(std::vector<double>(v.data(), v.data() + v.size()));
  return Eigen::Map<const VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
}

// Grid-indexed distribution estimates for each counterfactual level.
struct DistributionEstimate {
  ThresholdGrid grid;
  std::vector<VectorXd> F_hat, F_tilde, F_star, F_shaped;  // per k, length = grid size
  std::vector<VectorXd> se;                               // per k
  Variant variant = Variant::Star;

  const std::vector<VectorXd>& corrected() const { return variant == Variant::Star ? F_star : F_tilde; }
};

}  // namespace fedr
