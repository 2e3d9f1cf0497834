#pragma once

// End-to-end estimation for one treatment: grid fits, bias correction,
// influence functions, standard errors, bootstrap bands, quantile bands and
// the average effect.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedr/bias_correction.hpp"
#include "fedr/fe_logit.hpp"
#include "fedr/inference.hpp"
#include "fedr/panel.hpp"
#include "fedr/parallel.hpp"
#include "fedr/poisson.hpp"
#include "fedr/projections.hpp"
#include "fedr/quantile_effects.hpp"

namespace fedr {

struct ThresholdAnalysis {
  ThresholdFit fit;
  ThresholdEstimate est;
  InfluenceSet infl;
};

inline ThresholdAnalysis analyze_threshold(const DyadPanel& panel, ThresholdFit fit,
                                           const std::vector<MatrixXd>& counterfactuals, bool want_star,
                                           const SolverOptions& opts = {}) {
  const ProjectionSet ps = project(panel, fit, counterfactuals);
  const BiasComponents bc = bias_components(panel, fit, ps);
  ThresholdAnalysis ta;
  ta.est = correct_threshold(panel, fit, ps, bc, counterfactuals, want_star, opts);
  const HessianSystem H = hessian(fit, panel);
  ta.infl = influence(panel, fit, H, ps, counterfactuals);
  ta.fit = std::move(fit);
  return ta;
}

struct GridAnalysis {
  std::vector<double> grid;  // thresholds that were estimated
  std::vector<ThresholdAnalysis> points;
  std::vector<double> degenerate;  // skipped thresholds
  std::vector<std::string> messages;

  std::size_t size() const noexcept { return grid.size(); }

  // n x G matrix of psi_l (or phi_k) over the grid.
  MatrixXd psi_column(int l) const {
    MatrixXd out(points.front().infl.psi_beta.rows(), static_cast<Eigen::Index>(points.size()));
    for (std::size_t g = 0; g < points.size(); ++g) out.col(static_cast<Eigen::Index>(g)) = points[g].infl.psi_beta.col(l);
    return out;
  }
  MatrixXd phi_column(int k) const {
    MatrixXd out(points.front().infl.phi.rows(), static_cast<Eigen::Index>(points.size()));
    for (std::size_t g = 0; g < points.size(); ++g) out.col(static_cast<Eigen::Index>(g)) = points[g].infl.phi.col(k);
    return out;
  }
  VectorXd series(const std::function<double(const ThresholdEstimate&)>& f) const {
    VectorXd out(static_cast<Eigen::Index>(points.size()));
    for (std::size_t g = 0; g < points.size(); ++g) out[static_cast<Eigen::Index>(g)] = f(points[g].est);
    return out;
  }
};

inline GridAnalysis analyze_grid(const DyadPanel& panel, const ThresholdGrid& grid,
                                 const std::vector<MatrixXd>& counterfactuals, bool want_star,
                                 const SolverOptions& opts = {}, int threads = 1) {
  GridFits fits = fit_all(panel, grid, opts);
  GridAnalysis ga;
  std::vector<std::size_t> ok;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    if (fits.status[g] == FitStatus::Ok) {
      ok.push_back(g);
      ga.grid.push_back(grid[g]);
    } else {
      ga.degenerate.push_back(grid[g]);
      ga.messages.push_back(fits.messages[g]);
    }
  }
  if (ok.empty()) throw DegenerateThresholdError("every grid threshold is degenerate", grid[0]);
  ga.points.resize(ok.size());
  parallel_for(static_cast<int>(ok.size()), threads, [&](int k) {
    auto& slot = fits.fits[ok[static_cast<std::size_t>(k)]];
    ga.points[static_cast<std::size_t>(k)] = analyze_threshold(panel, std::move(*slot), counterfactuals, want_star, opts);
  });
  return ga;
}

// Standard errors and bootstrap perturbations for one clustering mode.
struct GridInference {
  ClusterMode mode = ClusterMode::None;
  std::vector<VectorXd> se_beta;  // per coefficient, length G
  std::vector<VectorXd> se_F;     // per counterfactual, length G
  std::vector<MatrixXd> draws_beta;  // per coefficient, M x G
  std::vector<MatrixXd> draws_F;     // per counterfactual, M x G
};

inline GridInference grid_inference(const DyadPanel& panel, const GridAnalysis& ga, ClusterMode mode,
                                    std::uint64_t seed, int M, bool zero_multipliers = false) {
  GridInference gi;
  gi.mode = mode;
  Multipliers mult(panel, seed, mode);
  mult.force_zero(zero_multipliers);
  auto at = [&](const std::string& kind, int col, std::size_t g) {
    return kind + " " + std::to_string(col + 1) + " at y=" + std::to_string(ga.grid[g]);
  };
  for (int l = 0; l < panel.dx(); ++l) {
    const MatrixXd f = ga.psi_column(l);
    VectorXd se(f.cols());
    for (Eigen::Index g = 0; g < f.cols(); ++g)
      se[g] = influence_se(panel, f.col(g), mode, at("coefficient", l, static_cast<std::size_t>(g)));
    gi.se_beta.push_back(se);
    if (M > 0) gi.draws_beta.push_back(bootstrap_draws(f, mult, M));
  }
  const auto K = ga.points.front().infl.phi.cols();
  for (Eigen::Index k = 0; k < K; ++k) {
    const MatrixXd f = ga.phi_column(static_cast<int>(k));
    VectorXd se(f.cols());
    for (Eigen::Index g = 0; g < f.cols(); ++g)
      se[g] = influence_se(panel, f.col(g), mode, at("distribution", static_cast<int>(k), static_cast<std::size_t>(g)));
    gi.se_F.push_back(se);
    if (M > 0) gi.draws_F.push_back(bootstrap_draws(f, mult, M));
  }
  return gi;
}

// Per-draw maximal t over a joint set of (draws, se) series.
inline std::vector<double> joint_max_t(const std::vector<const MatrixXd*>& draws, const std::vector<const VectorXd*>& se,
                                       const std::vector<double>& grid, const std::string& what) {
  std::vector<double> t;
  for (std::size_t s = 0; s < draws.size(); ++s) {
    std::vector<std::string> labels;
    for (double y : grid) labels.push_back(what + " y=" + std::to_string(y));
    const auto ts = max_t_draws(*draws[s], *se[s], labels);
    if (t.empty()) t.assign(ts.size(), 0.0);
    for (std::size_t m = 0; m < ts.size(); ++m) t[m] = std::max(t[m], ts[m]);
  }
  return t;
}

struct EstimateOptions {
  GridMode grid_mode = QuantileIndexed{index_range(0.1, 0.9, 0.05)};
  std::pair<double, double> region{-1e300, 1e300};
  TreatmentSpec treatment;
  std::vector<int> coefficient_targets;  // empty: all coefficients jointly
  std::vector<double> levels{0.95};
  std::vector<double> taus;  // empty: 0.05 .. 0.95 by 0.05
  int draws = 500;
  std::uint64_t seed = 1;
  ClusterMode cluster = ClusterMode::None;
  Variant variant = Variant::Star;
  bool shape_restrict = true;  // off: raw distribution bands, no quantile inversion
  bool poisson = false;
  int threads = 1;
  SolverOptions solver;
};

struct LevelBands {
  double level = 0.95;
  double crit_beta = 0.0, crit_F = 0.0;
  std::vector<Band> beta_uniform, beta_pointwise;  // per coefficient
  std::vector<Band> F_uniform, F_pointwise;        // per counterfactual (k = 0, 1)
  std::vector<QuantileBand> qf;                    // per counterfactual, from the uniform F band
  QuantileBand qe;
  std::vector<double> taus_trimmed;
  AverageEffect average;
};

struct EstimationResult {
  GridAnalysis analysis;
  GridInference inference;
  DistributionEstimate dist;
  std::vector<VectorXd> beta_hat, beta_tilde;  // per coefficient over the grid
  std::vector<LevelBands> bands;
  std::vector<VectorXd> poisson_F;  // per counterfactual
  std::vector<int> flagged_units;   // per grid point
  double sup_y = 0.0;
};

inline EstimationResult estimate(const DyadPanel& panel, const EstimateOptions& opt) {
  opt.treatment.validate(panel);
  const ThresholdGrid grid = build_grid(panel, opt.grid_mode, opt.region);
  const std::vector<MatrixXd> cfs{counterfactual_covariates(panel, opt.treatment, 0),
                                  counterfactual_covariates(panel, opt.treatment, 1)};
  const bool star = opt.variant == Variant::Star;
  EstimationResult res;
  res.analysis = analyze_grid(panel, grid, cfs, star, opt.solver, opt.threads);
  const GridAnalysis& ga = res.analysis;
  res.inference = grid_inference(panel, ga, opt.cluster, opt.seed, opt.draws);
  const GridInference& gi = res.inference;
  const int dx = panel.dx();
  res.sup_y = std::min(grid.hi, panel.y().maxCoeff());

  for (int l = 0; l < dx; ++l) {
    res.beta_hat.push_back(ga.series([l](const ThresholdEstimate& e) { return e.beta_hat[l]; }));
    res.beta_tilde.push_back(ga.series([l](const ThresholdEstimate& e) { return e.beta_tilde[l]; }));
  }
  res.dist.grid = ThresholdGrid{ga.grid, grid.lo, grid.hi};
  res.dist.variant = opt.variant;
  for (int k = 0; k < 2; ++k) {
    res.dist.F_hat.push_back(ga.series([k](const ThresholdEstimate& e) { return e.F_hat[k]; }));
    res.dist.F_tilde.push_back(ga.series([k](const ThresholdEstimate& e) { return e.F_tilde[k]; }));
    if (star) res.dist.F_star.push_back(ga.series([k](const ThresholdEstimate& e) { return e.F_star[k]; }));
    res.dist.F_shaped.push_back(shape_restrict(res.dist.corrected()[static_cast<std::size_t>(k)]));
    res.dist.se.push_back(gi.se_F[static_cast<std::size_t>(k)]);
  }
  for (const auto& p : ga.points) {
    int c = 0;
    for (auto f : p.fit.sender_flags) c += f != Separation::None;
    for (auto f : p.fit.receiver_flags) c += f != Separation::None;
    res.flagged_units.push_back(c);
  }

  std::vector<int> targets = opt.coefficient_targets;
  if (targets.empty())
    for (int l = 0; l < dx; ++l) targets.push_back(l);
  for (int l : targets)
    if (l < 0 || l >= dx) throw ConfigError("coefficient target out of range");

  std::vector<double> taus = opt.taus;
  if (taus.empty()) taus = index_range(0.05, 0.95, 0.05);

  std::vector<double> tb, tF;
  if (opt.draws > 0) {
    std::vector<const MatrixXd*> db, dF;
    std::vector<const VectorXd*> sb, sF;
    for (int l : targets) {
      db.push_back(&gi.draws_beta[static_cast<std::size_t>(l)]);
      sb.push_back(&gi.se_beta[static_cast<std::size_t>(l)]);
    }
    for (int k = 0; k < 2; ++k) {
      dF.push_back(&gi.draws_F[static_cast<std::size_t>(k)]);
      sF.push_back(&gi.se_F[static_cast<std::size_t>(k)]);
    }
    if (!targets.empty()) tb = joint_max_t(db, sb, ga.grid, "coefficient");
    tF = joint_max_t(dF, sF, ga.grid, "distribution");
  }

  std::optional<Multipliers> mult;
  if (opt.draws > 0) mult.emplace(panel, opt.seed, opt.cluster);
  std::vector<VectorXd> phi0, phi1;
  for (const auto& p : ga.points) {
    phi0.push_back(p.infl.phi.col(0));
    phi1.push_back(p.infl.phi.col(1));
  }

  for (double level : opt.levels) {
    LevelBands lb;
    lb.level = level;
    const double zc = pointwise_critical_value(level);
    lb.crit_beta = tb.empty() ? zc : critical_value(tb, level);
    lb.crit_F = tF.empty() ? zc : critical_value(tF, level);
    for (int l = 0; l < dx; ++l) {
      const std::string name = panel.covariate_names()[static_cast<std::size_t>(l)];
      const bool in_targets = std::find(targets.begin(), targets.end(), l) != targets.end();
      const auto& se = gi.se_beta[static_cast<std::size_t>(l)];
      lb.beta_uniform.push_back(build_band(ga.grid, res.beta_tilde[static_cast<std::size_t>(l)], se,
                                           in_targets ? lb.crit_beta : zc, level,
                                           in_targets ? BandKind::Uniform : BandKind::Pointwise, opt.cluster, false,
                                           "beta_" + name));
      lb.beta_pointwise.push_back(build_band(ga.grid, res.beta_tilde[static_cast<std::size_t>(l)], se, zc, level,
                                             BandKind::Pointwise, opt.cluster, false, "beta_" + name));
    }
    for (int k = 0; k < 2; ++k) {
      const auto& center = res.dist.corrected()[static_cast<std::size_t>(k)];
      const auto& se = gi.se_F[static_cast<std::size_t>(k)];
      lb.F_uniform.push_back(build_band(ga.grid, center, se, lb.crit_F, level, BandKind::Uniform, opt.cluster,
                                        opt.shape_restrict, "F" + std::to_string(k)));
      lb.F_pointwise.push_back(build_band(ga.grid, center, se, zc, level, BandKind::Pointwise, opt.cluster,
                                          opt.shape_restrict, "F" + std::to_string(k)));
    }
    if (!opt.shape_restrict) {
      lb.average = average_effect(panel, ga.grid, res.dist.F_shaped[0], res.dist.F_shaped[1], phi0, phi1, opt.cluster,
                                  level, mult ? &*mult : nullptr, opt.draws);
      res.bands.push_back(std::move(lb));
      continue;
    }
    std::vector<QuantileBand> all;
    for (int k = 0; k < 2; ++k) all.push_back(invert_band(lb.F_uniform[static_cast<std::size_t>(k)], taus, res.sup_y));
    const auto kept = trim_taus(all, &lb.taus_trimmed);
    if (!kept.empty()) {
      for (int k = 0; k < 2; ++k) lb.qf.push_back(invert_band(lb.F_uniform[static_cast<std::size_t>(k)], kept, res.sup_y));
      lb.qe = qe_band(lb.qf[1], lb.qf[0]);
    }
    lb.average = average_effect(panel, ga.grid, res.dist.F_shaped[0], res.dist.F_shaped[1], phi0, phi1, opt.cluster,
                                level, mult ? &*mult : nullptr, opt.draws);
    res.bands.push_back(std::move(lb));
  }

  if (opt.poisson) {
    const PoissonFit pf = fit_poisson(panel, opt.solver);
    for (int k = 0; k < 2; ++k) res.poisson_F.push_back(poisson_distribution(panel, pf, cfs[static_cast<std::size_t>(k)], ga.grid));
  }
  return res;
}

}  // namespace fedr
