#pragma once

// CSV and JSON writers for bands, estimates and Monte Carlo reports. Numbers
// are printed with %.17g so files round-trip and compare byte-for-byte.

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedr/error.hpp"
#include "fedr/inference.hpp"
#include "fedr/mc.hpp"
#include "fedr/panel.hpp"
#include "fedr/pipeline.hpp"
#include "fedr/quantile_effects.hpp"

namespace fedr::io {

inline std::string num(double v) { return detail::format_double(v); }

inline void write_band_csv(std::ostream& out, const Band& b) {
  out << "grid_value,center,lower,upper,se,level,critical_value,kind,cluster_mode\n";
  for (std::size_t g = 0; g < b.grid.size(); ++g) {
    const auto k = static_cast<Eigen::Index>(g);
    out << num(b.grid[g]) << ',' << num(b.center[k]) << ',' << num(b.lower[k]) << ',' << num(b.upper[k]) << ','
        << num(b.se[k]) << ',' << num(b.level) << ',' << num(b.critical_value) << ',' << to_string(b.kind) << ','
        << to_string(b.cluster) << '\n';
  }
}

// Same layout with grid = tau; se is empty and a capped column is appended.
inline void write_quantile_csv(std::ostream& out, const QuantileBand& q, ClusterMode mode) {
  out << "grid_value,center,lower,upper,se,level,critical_value,kind,cluster_mode,capped\n";
  for (std::size_t t = 0; t < q.tau.size(); ++t) {
    const auto k = static_cast<Eigen::Index>(t);
    out << num(q.tau[t]) << ',' << num(q.center[k]) << ',' << num(q.lower[k]) << ',' << num(q.upper[k]) << ",,"
        << num(q.level) << ',' << num(q.critical_value) << ",uniform," << to_string(mode) << ','
        << (q.capped[t] ? 1 : 0) << '\n';
  }
}

inline nlohmann::json to_json(const AverageEffect& a) {
  return {{"mu0", a.mu0},
          {"mu1", a.mu1},
          {"delta", a.delta},
          {"se", a.se},
          {"level", a.level},
          {"critical_value", a.critical_value},
          {"bootstrap", a.bootstrap},
          {"lower", a.lower},
          {"upper", a.upper},
          {"support_incomplete", a.support_incomplete}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

template <class F>
void write_with(const std::filesystem::path& path, F&& f) {
  std::ostringstream os;
  f(os);
  write_text(path, os.str());
}

// Level tags such as "0.95" for file names.
inline std::string level_tag(double level) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", level);
  return buf;
}

// ---------------------------------------------------------------------------
// Estimation outputs

inline void write_estimate_series(std::ostream& out, const DyadPanel& panel, const EstimationResult& r) {
  out << "grid_value";
  for (const auto& c : panel.covariate_names()) out << ",beta_hat_" << c << ",beta_tilde_" << c << ",se_beta_" << c;
  out << '\n';
  const auto& grid = r.analysis.grid;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const auto k = static_cast<Eigen::Index>(g);
    out << num(grid[g]);
    for (std::size_t l = 0; l < r.beta_hat.size(); ++l)
      out << ',' << num(r.beta_hat[l][k]) << ',' << num(r.beta_tilde[l][k]) << ',' << num(r.inference.se_beta[l][k]);
    out << '\n';
  }
}

inline void write_distribution_series(std::ostream& out, const EstimationResult& r) {
  const bool star = !r.dist.F_star.empty();
  const bool pois = !r.poisson_F.empty();
  out << "grid_value,k,F_hat,F_tilde" << (star ? ",F_star" : "") << ",F_shaped,se" << (pois ? ",F_poisson" : "")
      << ",flagged_units\n";
  const auto& grid = r.analysis.grid;
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const auto i = static_cast<Eigen::Index>(g);
      out << num(grid[g]) << ',' << k << ',' << num(r.dist.F_hat[k][i]) << ',' << num(r.dist.F_tilde[k][i]);
      if (star) out << ',' << num(r.dist.F_star[k][i]);
      out << ',' << num(r.dist.F_shaped[k][i]) << ',' << num(r.dist.se[k][i]);
      if (pois) out << ',' << num(r.poisson_F[k][i]);
      out << ',' << r.flagged_units[g] << '\n';
    }
}

// Writes every band and series into `dir`; returns the list of files written.
inline std::vector<std::string> write_estimation(const std::filesystem::path& dir, const DyadPanel& panel,
                                                 const EstimationResult& r, ClusterMode mode) {
  std::filesystem::create_directories(dir / "bands");
  std::vector<std::string> files;
  auto put = [&](const std::string& rel, auto&& f) {
    write_with(dir / rel, f);
    files.push_back(rel);
  };
  put("coefficients.csv", [&](std::ostream& o) { write_estimate_series(o, panel, r); });
  put("distributions.csv", [&](std::ostream& o) { write_distribution_series(o, r); });
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& lb : r.bands) {
    const std::string tag = level_tag(lb.level);
    for (std::size_t l = 0; l < lb.beta_uniform.size(); ++l) {
      const std::string name = panel.covariate_names()[l];
      put("bands/beta_" + name + "_uniform_" + tag + ".csv", [&](std::ostream& o) { write_band_csv(o, lb.beta_uniform[l]); });
      put("bands/beta_" + name + "_pointwise_" + tag + ".csv",
          [&](std::ostream& o) { write_band_csv(o, lb.beta_pointwise[l]); });
    }
    for (std::size_t k = 0; k < lb.F_uniform.size(); ++k) {
      const std::string name = "F" + std::to_string(k);
      put("bands/" + name + "_uniform_" + tag + ".csv", [&](std::ostream& o) { write_band_csv(o, lb.F_uniform[k]); });
      put("bands/" + name + "_pointwise_" + tag + ".csv", [&](std::ostream& o) { write_band_csv(o, lb.F_pointwise[k]); });
    }
    for (std::size_t k = 0; k < lb.qf.size(); ++k)
      put("bands/Q" + std::to_string(k) + "_uniform_" + tag + ".csv",
          [&](std::ostream& o) { write_quantile_csv(o, lb.qf[k], mode); });
    if (!lb.qf.empty()) put("bands/QE_uniform_" + tag + ".csv", [&](std::ostream& o) { write_quantile_csv(o, lb.qe, mode); });
    summary.push_back({{"level", lb.level},
                       {"critical_value_beta", lb.crit_beta},
                       {"critical_value_F", lb.crit_F},
                       {"taus_trimmed", lb.taus_trimmed},
                       {"average_effect", to_json(lb.average)}});
  }
  put("summary.json", [&](std::ostream& o) { o << summary.dump(2) << '\n'; });
  return files;
}

// ---------------------------------------------------------------------------
// Monte Carlo report

inline void write_report_csv(std::ostream& out, const McReport& rep) {
  out << "target,correction,cluster_mode,avg_length,avg_critical_value,coverage_uniform,coverage_pointwise,"
         "coverage_pointwise_rate,avg_se_sd\n";
  for (const auto& b : rep.bands)
    out << b.target << ',' << b.correction << ',' << b.cluster << ',' << num(b.avg_length) << ','
        << num(b.avg_critical_value) << ',' << num(b.coverage_uniform) << ',' << num(b.coverage_pointwise) << ','
        << num(b.coverage_pointwise_rate) << ',' << num(b.se_sd) << '\n';
}

inline void write_curves_csv(std::ostream& out, const McReport& rep) {
  out << "target,correction,grid_value,truth,bias,sd,rmse,bias_pct,sd_pct,rmse_pct\n";
  for (const auto& c : rep.curves)
    for (std::size_t g = 0; g < c.grid.size(); ++g) {
      const auto k = static_cast<Eigen::Index>(g);
      out << c.target << ',' << c.correction << ',' << num(c.grid[g]) << ',' << num(c.truth[k]) << ',' << num(c.bias[k])
          << ',' << num(c.sd[k]) << ',' << num(c.rmse[k]) << ',' << num(c.bias_pct[k]) << ',' << num(c.sd_pct[k]) << ','
          << num(c.rmse_pct[k]) << '\n';
    }
}

inline nlohmann::json to_json(const McReport& rep) {
  nlohmann::json j{{"design", rep.design},
                   {"S", rep.S},
                   {"completed", rep.completed},
                   {"failures", rep.failures},
                   {"failure_messages", rep.failure_messages},
                   {"grid", rep.grid},
                   {"avg_flagged_units", rep.avg_flagged}};
  j["bands"] = nlohmann::json::array();
  for (const auto& b : rep.bands)
    j["bands"].push_back({{"target", b.target},
                          {"correction", b.correction},
                          {"cluster_mode", b.cluster},
                          {"avg_length", b.avg_length},
                          {"avg_critical_value", b.avg_critical_value},
                          {"coverage_uniform", b.coverage_uniform},
                          {"coverage_pointwise", b.coverage_pointwise},
                          {"coverage_pointwise_rate", b.coverage_pointwise_rate},
                          {"avg_se_sd", b.se_sd}});
  j["curves"] = nlohmann::json::array();
  for (const auto& c : rep.curves) {
    auto mean_abs = [](const VectorXd& v) { return v.cwiseAbs().mean(); };
    j["curves"].push_back({{"target", c.target},
                           {"correction", c.correction},
                           {"avg_abs_bias_pct", mean_abs(c.bias_pct)},
                           {"avg_sd_pct", mean_abs(c.sd_pct)},
                           {"avg_rmse_pct", mean_abs(c.rmse_pct)}});
  }
  j["average_effects"] = nlohmann::json::array();
  for (const auto& a : rep.averages)
    j["average_effects"].push_back({{"target", a.target},
                                    {"correction", a.correction},
                                    {"truth", a.truth},
                                    {"bias", a.bias},
                                    {"sd", a.sd},
                                    {"rmse", a.rmse},
                                    {"coverage_none", a.coverage[0]},
                                    {"coverage_pairwise", a.coverage[1]},
                                    {"se_sd_none", a.se_sd[0]},
                                    {"se_sd_pairwise", a.se_sd[1]}});
  return j;
}

inline std::vector<std::string> write_report(const std::filesystem::path& dir, const McReport& rep) {
  std::filesystem::create_directories(dir);
  write_with(dir / "report.csv", [&](std::ostream& o) { write_report_csv(o, rep); });
  write_with(dir / "curves.csv", [&](std::ostream& o) { write_curves_csv(o, rep); });
  write_text(dir / "report.json", to_json(rep).dump(2) + "\n");
  return {"report.csv", "curves.csv", "report.json"};
}

}  // namespace fedr::io
