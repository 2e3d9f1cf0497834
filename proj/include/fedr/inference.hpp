#pragma once

// Influence functions, standard errors, multiplier bootstrap and bands.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedr/bias_correction.hpp"
#include "fedr/error.hpp"
#include "fedr/fe_logit.hpp"
#include "fedr/panel.hpp"
#include "fedr/projections.hpp"
#include "fedr/rng.hpp"

namespace fedr {

enum class ClusterMode { None, Pairwise };

inline std::string to_string(ClusterMode m) { return m == ClusterMode::None ? "none" : "pairwise"; }
inline ClusterMode cluster_mode_from_string(const std::string& s) {
  if (s == "none" || s == "independent") return ClusterMode::None;
  if (s == "pairwise") return ClusterMode::Pairwise;
  throw ConfigError("unknown cluster mode '" + s + "' (expected none or pairwise)");
}

// Per-dyad influence at one threshold: the coefficient block of psi and the
// distribution influence phi for each counterfactual.
struct InfluenceSet {
  double y = 0.0;
  MatrixXd psi_beta;  // n x dx
  MatrixXd phi;       // n x |K|
};

namespace detail {

// Per-dyad value of q'w_ij for q = (q_x, q_alpha, q_gamma).
inline VectorXd dot_design(const DyadPanel& panel, const VectorXd& q) {
  const int dx = panel.dx(), I = panel.I();
  VectorXd out = dx > 0 ? VectorXd(panel.x() * q.head(dx)) : VectorXd::Zero(panel.n());
  for (int d = 0; d < panel.n(); ++d) out[d] += q[dx + panel.sender(d)] + q[dx + I + panel.receiver(d)];
  return out;
}

}  // namespace detail

// psi_ij = H^+ r_ij w_ij with r = 1{y <= t} - Lambda(pi). Only H^+ e_l and
// H^+ J_k are formed; each dyad's entry is then a single inner product.
inline InfluenceSet influence(const DyadPanel& panel, const ThresholdFit& fit, const HessianSystem& H,
                              const ProjectionSet& ps, const std::vector<MatrixXd>& counterfactuals) {
  const int n = panel.n(), dx = panel.dx(), I = panel.I();
  const auto K = static_cast<Eigen::Index>(counterfactuals.size());
  const VectorXd r = threshold_indicators(panel, fit.y) - fit.prob;
  InfluenceSet out;
  out.y = fit.y;
  out.psi_beta.resize(n, dx);
  for (int l = 0; l < dx; ++l) {
    const VectorXd q = H.pinv_apply(VectorXd::Unit(H.dim(), l));
    out.psi_beta.col(l) = r.cwiseProduct(detail::dot_design(panel, q));
  }
  out.phi.resize(n, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& l1k = ps.lambda1_k[static_cast<std::size_t>(k)];
    VectorXd Jk = VectorXd::Zero(H.dim());
    if (dx > 0) Jk.head(dx) = counterfactuals[static_cast<std::size_t>(k)].transpose() * l1k;
    for (int d = 0; d < n; ++d) {
      Jk[dx + panel.sender(d)] += l1k[d];
      Jk[dx + I + panel.receiver(d)] += l1k[d];
    }
    Jk /= static_cast<double>(n);
    const VectorXd q = H.pinv_apply(Jk);
    out.phi.col(k) = r.cwiseProduct(detail::dot_design(panel, q));
  }
  return out;
}

// Standard error n^{-1} [sum_d (f_d + f_partner(d)) f_d]^{1/2} for one
// influence column; the partner term is absent without clustering.
inline double influence_se(const DyadPanel& panel, const Eigen::Ref<const VectorXd>& f, ClusterMode mode,
                           const std::string& what = {}) {
  double s = 0.0;
  for (int d = 0; d < panel.n(); ++d) {
    double a = f[d];
    if (mode == ClusterMode::Pairwise) {
      const int q = panel.partner(d);
      if (q >= 0) a += f[q];
    }
    s += a * f[d];
  }
  if (s < 0.0 || !std::isfinite(s)) {
    std::ostringstream os;
    os << "clustered variance estimate is negative";
    if (!what.empty()) os << " for " << what;
    throw InferenceError(os.str());
  }
  return std::sqrt(s) / static_cast<double>(panel.n());
}

inline VectorXd influence_se_columns(const DyadPanel& panel, const MatrixXd& f, ClusterMode mode,
                             const std::string& what = {}) {
  VectorXd out(f.cols());
  for (Eigen::Index c = 0; c < f.cols(); ++c) {
    std::string tag = what.empty() ? std::string() : what + " column " + std::to_string(c + 1);
    out[c] = influence_se(panel, f.col(c), mode, tag);
  }
  return out;
}

// Bootstrap multipliers. Draw m is keyed by m and a per-dyad key; under
// pairwise clustering both members of a symmetric pair share the key of the
// smaller one, so without symmetric pairs both modes give identical draws.
class Multipliers {
 public:
  Multipliers(const DyadPanel& panel, std::uint64_t seed, ClusterMode mode)
      : rng_(seed, kDomainBootstrap), keys_(panel.n()) {
    for (int d = 0; d < panel.n(); ++d) {
      std::uint64_t key = KeyedRng::pair_key(panel.sender(d), panel.receiver(d));
      if (mode == ClusterMode::Pairwise) {
        const int q = panel.partner(d);
        if (q >= 0) key = std::min(key, KeyedRng::pair_key(panel.sender(q), panel.receiver(q)));
      }
      keys_[d] = key;
    }
  }

  // Test hook: all multipliers become zero.
  void force_zero(bool on = true) { zero_ = on; }

  int n() const noexcept { return static_cast<int>(keys_.size()); }

  // Centered multipliers of draw m.
  VectorXd draw(int m) const {
    VectorXd w(n());
    if (zero_) return VectorXd::Zero(n());
    for (int d = 0; d < n(); ++d) w[d] = rng_.normal(static_cast<std::uint64_t>(m), keys_[d]);
    w.array() -= w.mean();
    return w;
  }

 private:
  KeyedRng rng_;
  std::vector<std::uint64_t> keys_;
  bool zero_ = false;
};

// M x C matrix of bootstrap perturbations n^{-1} sum_d omega_d^m f_dc.
inline MatrixXd bootstrap_draws(const MatrixXd& f, const Multipliers& mult, int M) {
  if (M < 1) throw ConfigError("number of bootstrap draws must be at least 1");
  const int n = mult.n();
  MatrixXd out(M, f.cols());
  constexpr int kBlock = 64;
  for (int m0 = 0; m0 < M; m0 += kBlock) {
    const int b = std::min(kBlock, M - m0);
    MatrixXd W(b, n);
    for (int k = 0; k < b; ++k) W.row(k) = mult.draw(m0 + k).transpose();
    out.middleRows(m0, b).noalias() = W * f / static_cast<double>(n);
  }
  return out;
}

// Per-draw maximal t-statistic over the columns.
inline std::vector<double> max_t_draws(const MatrixXd& draws, const VectorXd& se,
                                       const std::vector<std::string>& labels = {}) {
  for (Eigen::Index c = 0; c < se.size(); ++c)
    if (!(se[c] > 0.0)) {
      std::ostringstream os;
      os << "standard error is zero at "
         << (static_cast<std::size_t>(c) < labels.size() ? labels[static_cast<std::size_t>(c)]
                                                         : "column " + std::to_string(c + 1))
         << "; band undefined there";
      throw InferenceError(os.str());
    }
  std::vector<double> t(static_cast<std::size_t>(draws.rows()), 0.0);
  for (Eigen::Index m = 0; m < draws.rows(); ++m)
    t[static_cast<std::size_t>(m)] = (draws.row(m).transpose().cwiseAbs().cwiseQuotient(se)).maxCoeff();
  return t;
}

// Smallest draw whose empirical CDF reaches p.
inline double critical_value(std::vector<double> draws, double p) {
  if (draws.empty()) throw InferenceError("no bootstrap draws");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("confidence level must lie in (0, 1)");
  std::sort(draws.begin(), draws.end());
  const double M = static_cast<double>(draws.size());
  auto idx = static_cast<std::size_t>(std::ceil(p * M - 1e-9));
  idx = std::clamp<std::size_t>(idx, 1, draws.size());
  return draws[idx - 1];
}

// Pointwise normal critical value for a two-sided p-interval.
inline double pointwise_critical_value(double p) { return normal_quantile(0.5 + 0.5 * p); }

enum class BandKind { Pointwise, Uniform };
inline std::string to_string(BandKind k) { return k == BandKind::Pointwise ? "pointwise" : "uniform"; }

struct Band {
  std::vector<double> grid;
  VectorXd center, lower, upper, se;
  double level = 0.95;
  double critical_value = 0.0;
  BandKind kind = BandKind::Uniform;
  ClusterMode cluster = ClusterMode::None;
  std::string label;
};

// center +- c se; CDF bands are then rearranged and clipped to [0, 1].
inline Band build_band(const std::vector<double>& grid, const VectorXd& center, const VectorXd& se, double c,
                       double level, BandKind kind, ClusterMode mode, bool is_cdf, std::string label = {}) {
  if (static_cast<std::size_t>(center.size()) != grid.size() || se.size() != center.size())
    throw ConfigError("band inputs have mismatched lengths");
  Band b;
  b.grid = grid;
  b.se = se;
  b.level = level;
  b.critical_value = c;
  b.kind = kind;
  b.cluster = mode;
  b.label = std::move(label);
  b.center = center;
  b.lower = center - c * se;
  b.upper = center + c * se;
  if (is_cdf) {
    b.center = shape_restrict(b.center);
    b.lower = shape_restrict(b.lower);
    b.upper = shape_restrict(b.upper);
  }
  return b;
}

}  // namespace fedr
