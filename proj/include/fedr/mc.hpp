#pragma once

// Monte Carlo harness for censored-logistic dyadic designs: synthetic
// calibration, simulation, closed-form truths, replicate analysis and the
// aggregated coverage / bias / RMSE report.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "fedr/bias_correction.hpp"
#include "fedr/error.hpp"
#include "fedr/inference.hpp"
#include "fedr/logistic.hpp"
#include "fedr/panel.hpp"
#include "fedr/parallel.hpp"
#include "fedr/pipeline.hpp"
#include "fedr/quantile_effects.hpp"
#include "fedr/rng.hpp"

namespace fedr {

enum class ErrorMode { Independent, Pairwise };

inline std::string to_string(ErrorMode m) { return m == ErrorMode::Independent ? "independent" : "pairwise"; }
inline ErrorMode error_mode_from_string(const std::string& s) {
  if (s == "independent") return ErrorMode::Independent;
  if (s == "pairwise") return ErrorMode::Pairwise;
  throw ConfigError("unknown error mode '" + s + "' (expected independent or pairwise)");
}

// Parameters of the latent censored model y = max{x'b + a_i + g_j + s e, c}
// with e standardized logistic, plus the fixed dyad layout and covariates.
struct Calibration {
  std::vector<int> sender, receiver;
  MatrixXd x;
  std::vector<std::string> names;
  VectorXd beta, alpha, gamma;
  double sigma = 1.0;
  std::vector<TreatmentSpec> treatments;

  int I() const { return static_cast<int>(alpha.size()); }
  int J() const { return static_cast<int>(gamma.size()); }
  int n() const { return static_cast<int>(sender.size()); }

  // Latent location of each dyad at covariates xk.
  VectorXd location(const MatrixXd& xk) const {
    VectorXd m = xk * beta;
    for (int d = 0; d < n(); ++d) m[d] += alpha[sender[d]] + gamma[receiver[d]];
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["sender"] = sender;
    j["receiver"] = receiver;
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(n()));
    for (int d = 0; d < n(); ++d)
      for (Eigen::Index c = 0; c < x.cols(); ++c) rows[static_cast<std::size_t>(d)].push_back(x(d, c));
    j["x"] = rows;
    j["names"] = names;
    j["beta"] = std::vector<double>(beta.data(), beta.data() + beta.size());
    j["alpha"] = std::vector<double>(alpha.data(), alpha.data() + alpha.size());
    j["gamma"] = std::vector<double>(gamma.data(), gamma.data() + gamma.size());
    j["sigma"] = sigma;
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& t : treatments) {
      const char* kind = t.kind == TreatmentKind::Binary ? "binary" : t.kind == TreatmentKind::Shift ? "shift" : "logdouble";
      tr.push_back({{"column", t.column}, {"kind", kind}, {"shift", t.shift}});
    }
    j["treatments"] = tr;
    return j;
  }

  static Calibration from_json(const nlohmann::json& j) {
    Calibration c;
    try {
      c.sender = j.at("sender").get<std::vector<int>>();
      c.receiver = j.at("receiver").get<std::vector<int>>();
      const auto rows = j.at("x").get<std::vector<std::vector<double>>>();
      c.names = j.at("names").get<std::vector<std::string>>();
      const auto b = j.at("beta").get<std::vector<double>>();
      const auto a = j.at("alpha").get<std::vector<double>>();
      const auto g = j.at("gamma").get<std::vector<double>>();
      c.sigma = j.at("sigma").get<double>();
      if (rows.size() != c.sender.size() || c.receiver.size() != c.sender.size())
        throw ConfigError("calibration dyad columns have mismatched lengths");
      c.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(b.size()));
      for (std::size_t d = 0; d < rows.size(); ++d) {
        if (rows[d].size() != b.size()) throw ConfigError("calibration covariate row has wrong width");
        for (std::size_t k = 0; k < b.size(); ++k) c.x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)) = rows[d][k];
      }
      c.beta = Eigen::Map<const VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
      c.alpha = Eigen::Map<const VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
      c.gamma = Eigen::Map<const VectorXd>(g.data(), static_cast<Eigen::Index>(g.size()));
      for (const auto& t : j.at("treatments")) {
        TreatmentSpec ts;
        ts.column = t.at("column").get<int>();
        const auto kind = t.at("kind").get<std::string>();
        ts.kind = kind == "binary" ? TreatmentKind::Binary : kind == "shift" ? TreatmentKind::Shift : TreatmentKind::LogDouble;
        if (kind != "binary" && kind != "shift" && kind != "logdouble") throw ConfigError("unknown treatment kind '" + kind + "'");
        ts.shift = t.value("shift", 1.0);
        c.treatments.push_back(ts);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed calibration: ") + e.what());
    }
    c.validate();
    return c;
  }

  void validate() const {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("calibration scale must be finite and nonnegative");
    if (static_cast<Eigen::Index>(names.size()) != x.cols() || beta.size() != x.cols())
      throw ConfigError("calibration covariate names/coefficients do not match covariates");
    for (int d = 0; d < n(); ++d)
      if (sender[d] < 0 || sender[d] >= I() || receiver[d] < 0 || receiver[d] >= J())
        throw ConfigError("calibration dyad refers to a unit without an effect");
    for (const auto& t : treatments)
      if (t.column < 0 || t.column >= x.cols()) throw ConfigError("calibration treatment column out of range");
  }
};

// Trade-like synthetic calibration: a log-distance covariate from random node
// positions and a same-legal-origin indicator, correlated exporter/importer
// effects, and a level shift giving the requested share of censored zeros.
struct SyntheticCalibrator {
  double ldist_mean = 4.18, ldist_sd = 0.78;
  std::vector<double> legal_shares{0.5, 0.3, 0.2};
  double beta_ldist = -0.7, beta_legal = 0.5;
  double sigma = 1.0;
  double effect_sd = 0.6;
  double effect_corr = 0.95;
  double zero_share = 0.55;

  nlohmann::json to_json() const {
    return {{"ldist_mean", ldist_mean}, {"ldist_sd", ldist_sd},     {"legal_shares", legal_shares},
            {"beta_ldist", beta_ldist}, {"beta_legal", beta_legal}, {"sigma", sigma},
            {"effect_sd", effect_sd},   {"effect_corr", effect_corr}, {"zero_share", zero_share}};
  }
  static SyntheticCalibrator from_json(const nlohmann::json& j) {
    SyntheticCalibrator s;
    s.ldist_mean = j.value("ldist_mean", s.ldist_mean);
    s.ldist_sd = j.value("ldist_sd", s.ldist_sd);
    s.legal_shares = j.value("legal_shares", s.legal_shares);
    s.beta_ldist = j.value("beta_ldist", s.beta_ldist);
    s.beta_legal = j.value("beta_legal", s.beta_legal);
    s.sigma = j.value("sigma", s.sigma);
    s.effect_sd = j.value("effect_sd", s.effect_sd);
    s.effect_corr = j.value("effect_corr", s.effect_corr);
    s.zero_share = j.value("zero_share", s.zero_share);
    return s;
  }
};

namespace detail {

// Share of dyads whose censored outcome is <= t.
inline double censored_cdf(const VectorXd& loc, double sigma, double t) {
  double s = 0.0;
  for (Eigen::Index d = 0; d < loc.size(); ++d) {
    if (sigma > 0.0) {
      s += logistic_cdf(kLogisticSd * (t - loc[d]) / sigma);
    } else {
      s += loc[d] <= t ? 1.0 : 0.0;
    }
  }
  return s / static_cast<double>(loc.size());
}

template <class F>
double bisect(F f, double lo, double hi, double target) {
  // f nondecreasing; expand the bracket first.
  for (int k = 0; k < 200 && f(lo) > target; ++k) lo -= (hi - lo) + 1.0;
  for (int k = 0; k < 200 && f(hi) < target; ++k) hi += (hi - lo) + 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(lo) + std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < target ? lo : hi) = mid;
  }
  return hi;
}

}  // namespace detail

inline Calibration synthetic_calibration(int I, int J, bool drop_diagonal, const SyntheticCalibrator& sc,
                                         std::uint64_t seed) {
  if (I < 2 || J < 2) throw ConfigError("design needs at least two senders and two receivers");
  if (!(sc.zero_share > 0.0 && sc.zero_share < 1.0)) throw ConfigError("zero share must lie in (0, 1)");
  if (!(sc.sigma > 0.0)) throw ConfigError("calibration scale must be positive");
  if (sc.legal_shares.empty()) throw ConfigError("legal shares must be nonempty");
  const KeyedRng rng(seed, kDomainCalibration);
  const int N = std::max(I, J);  // nodes shared by both sides when I == J
  std::vector<double> px(N), py(N);
  std::vector<int> legal(N);
  double tot = 0.0;
  for (double w : sc.legal_shares) tot += w;
  for (int v = 0; v < N; ++v) {
    px[v] = rng.uniform(1, v);
    py[v] = rng.uniform(2, v);
    double u = rng.uniform(3, v) * tot, acc = 0.0;
    legal[v] = static_cast<int>(sc.legal_shares.size()) - 1;
    for (std::size_t c = 0; c < sc.legal_shares.size(); ++c) {
      acc += sc.legal_shares[c];
      if (u < acc) {
        legal[v] = static_cast<int>(c);
        break;
      }
    }
  }
  Calibration cal;
  std::vector<double> ld, lg;
  for (int i = 0; i < I; ++i)
    for (int j = 0; j < J; ++j) {
      if (drop_diagonal && i == j) continue;
      cal.sender.push_back(i);
      cal.receiver.push_back(j);
      const double dist = std::hypot(px[i] - px[j], py[i] - py[j]);
      ld.push_back(std::log(std::max(dist, 1e-3)));
      lg.push_back(legal[i] == legal[j] ? 1.0 : 0.0);
    }
  const auto n = static_cast<Eigen::Index>(ld.size());
  VectorXd l = Eigen::Map<VectorXd>(ld.data(), n);
  const double m = l.mean();
  const double sd = std::sqrt((l.array() - m).square().mean());
  cal.x.resize(n, 2);
  cal.x.col(0) = ((l.array() - m) / sd * sc.ldist_sd + sc.ldist_mean).matrix();
  cal.x.col(1) = Eigen::Map<VectorXd>(lg.data(), n);
  cal.names = {"ldist", "legal"};
  cal.beta.resize(2);
  cal.beta << sc.beta_ldist, sc.beta_legal;
  cal.sigma = sc.sigma;
  cal.alpha.resize(I);
  cal.gamma.resize(J);
  const double rc = std::sqrt(std::max(0.0, 1.0 - sc.effect_corr * sc.effect_corr));
  for (int i = 0; i < I; ++i) cal.alpha[i] = sc.effect_sd * rng.normal(4, i);
  for (int j = 0; j < J; ++j) {
    const double own = rng.normal(5, j);
    cal.gamma[j] = sc.effect_sd * (j < I ? sc.effect_corr * cal.alpha[j] / sc.effect_sd + rc * own : own);
  }
  // Level shift on the sender effects hitting the zero share.
  const VectorXd base = cal.location(cal.x);
  const double shift = detail::bisect(
      [&](double c) { return 1.0 - detail::censored_cdf(VectorXd(base.array() + c), cal.sigma, 0.0); }, -50.0, 50.0,
      1.0 - sc.zero_share);
  cal.alpha.array() += shift;
  cal.treatments = {TreatmentSpec{0, TreatmentKind::LogDouble, 1.0}, TreatmentSpec{1, TreatmentKind::Binary, 1.0}};
  return cal;
}

struct McDesign {
  int I = 50, J = 50;
  bool drop_diagonal = true;
  ErrorMode errors = ErrorMode::Independent;
  double rho = 0.75;
  double censor = 0.0;
  std::vector<double> grid_indices = index_range(0.54, 0.95, 0.01);
  int S = 200;
  int M = 200;
  std::uint64_t seed = 1;
  double level = 0.95;
  Variant variant = Variant::Star;
  SyntheticCalibrator synthetic;
  std::optional<Calibration> user_calibration;

  nlohmann::json to_json() const {
    nlohmann::json j{{"I", I},
                     {"J", J},
                     {"drop_diagonal", drop_diagonal},
                     {"errors", to_string(errors)},
                     {"rho", rho},
                     {"censor", censor},
                     {"grid_indices", grid_indices},
                     {"S", S},
                     {"M", M},
                     {"seed", seed},
                     {"level", level},
                     {"variant", to_string(variant)},
                     {"synthetic", synthetic.to_json()}};
    if (user_calibration) j["calibration"] = user_calibration->to_json();
    return j;
  }

  static McDesign from_json(const nlohmann::json& j) {
    McDesign d;
    try {
      d.I = j.value("I", d.I);
      d.J = j.value("J", d.J);
      d.drop_diagonal = j.value("drop_diagonal", d.drop_diagonal);
      d.errors = error_mode_from_string(j.value("errors", to_string(d.errors)));
      d.rho = j.value("rho", d.rho);
      d.censor = j.value("censor", d.censor);
      d.grid_indices = j.value("grid_indices", d.grid_indices);
      d.S = j.value("S", d.S);
      d.M = j.value("M", d.M);
      d.seed = j.value("seed", d.seed);
      d.level = j.value("level", d.level);
      d.variant = variant_from_string(j.value("variant", to_string(d.variant)));
      if (j.contains("synthetic")) d.synthetic = SyntheticCalibrator::from_json(j.at("synthetic"));
      if (j.contains("calibration")) d.user_calibration = Calibration::from_json(j.at("calibration"));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed design: ") + e.what());
    }
    d.validate();
    return d;
  }

  void validate() const {
    if (S < 1) throw ConfigError("number of simulations must be at least 1");
    if (M < 1) throw ConfigError("number of bootstrap draws must be at least 1");
    if (!(rho >= -1.0 && rho <= 1.0)) throw ConfigError("pairwise correlation must lie in [-1, 1]");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("confidence level must lie in (0, 1)");
    if (grid_indices.empty()) throw ConfigError("grid indices must be nonempty");
    for (std::size_t k = 0; k < grid_indices.size(); ++k) {
      if (!(grid_indices[k] > 0.0 && grid_indices[k] < 1.0)) throw ConfigError("grid indices must lie in (0, 1)");
      if (k > 0 && !(grid_indices[k] > grid_indices[k - 1])) throw ConfigError("grid indices must be increasing");
    }
  }
};

// Calibration plus the fixed threshold grid: population quantiles of the
// censored outcome at the design's indices.
struct PreparedDesign {
  McDesign design;
  Calibration cal;
  std::vector<double> grid;
  double region_hi = 0.0;
};

inline PreparedDesign prepare(const McDesign& design) {
  design.validate();
  PreparedDesign pd;
  pd.design = design;
  pd.cal = design.user_calibration ? *design.user_calibration
                                   : synthetic_calibration(design.I, design.J, design.drop_diagonal, design.synthetic,
                                                           design.seed);
  pd.cal.validate();
  if (!(pd.cal.sigma > 0.0)) throw ConfigError("calibration scale must be positive for a study");
  const VectorXd loc = pd.cal.location(pd.cal.x);
  auto G = [&](double t) { return t < design.censor ? 0.0 : detail::censored_cdf(loc, pd.cal.sigma, t); };
  for (double tau : design.grid_indices) {
    const double t = G(design.censor) >= tau - 1e-9 ? design.censor : detail::bisect(G, design.censor, design.censor + 10.0, tau);
    if (pd.grid.empty() || t > pd.grid.back()) pd.grid.push_back(t);
  }
  pd.region_hi = detail::bisect(G, design.censor, design.censor + 10.0, 0.95);
  pd.region_hi = std::max(pd.region_hi, pd.grid.back());
  return pd;
}

// One simulated panel; covariates and effects are fixed, errors are keyed by
// (seed, s, dyad) so any replicate can be regenerated independently.
inline DyadPanel simulate_panel(const PreparedDesign& pd, int s) {
  const auto& cal = pd.cal;
  const KeyedRng rng(pd.design.seed, kDomainSimulation);
  const auto stream = static_cast<std::uint64_t>(s);
  const VectorXd loc = cal.location(cal.x);
  const double rho = pd.design.rho, rc = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  VectorXd y(cal.n());
  for (int d = 0; d < cal.n(); ++d) {
    const int i = cal.sender[d], j = cal.receiver[d];
    double u;
    if (pd.design.errors == ErrorMode::Independent) {
      u = rng.uniform(stream, KeyedRng::pair_key(i, j));
    } else {
      const double e = rng.normal(stream, KeyedRng::pair_key(i, j));
      const double e_rev = rng.normal(stream, KeyedRng::pair_key(j, i));
      u = normal_cdf(rho * e + rc * e_rev);
      u = std::clamp(u, 1e-300, 1.0 - 1e-16);
    }
    const double latent = loc[d] + cal.sigma * logistic_quantile(u) / kLogisticSd;
    y[d] = std::max(latent, pd.design.censor);
  }
  std::vector<std::string> sl, rl;
  for (int i = 0; i < cal.I(); ++i) sl.push_back("c" + std::to_string(i + 1));
  for (int j = 0; j < cal.J(); ++j) rl.push_back("c" + std::to_string(j + 1));
  return DyadPanel::from_indices(cal.sender, cal.receiver, std::move(y), cal.x, cal.names, sl, rl);
}

// Distribution-regression parameters implied by the design at threshold y.
// The y term loads on a constant, which the two-way effects absorb, so the
// covariate coefficients do not move with y.
struct DrTruth {
  VectorXd beta, alpha, gamma;
};

inline DrTruth true_dr_params(const Calibration& cal, double y) {
  if (!(cal.sigma > 0.0)) throw ConfigError("truth needs a positive calibration scale");
  const double r = kLogisticSd / cal.sigma;
  DrTruth t;
  t.beta = -r * cal.beta;
  t.alpha = (r * (y - cal.alpha.array())).matrix();
  t.gamma = -r * cal.gamma;
  const double shift = (t.alpha.sum() - t.gamma.sum()) / static_cast<double>(cal.I() + cal.J());
  t.alpha.array() -= shift;
  t.gamma.array() += shift;
  return t;
}

// True counterfactual CDF at y for the covariates xk.
inline double true_distribution(const Calibration& cal, const MatrixXd& xk, double y) {
  const DrTruth t = true_dr_params(cal, y);
  VectorXd idx = xk * t.beta;
  double s = 0.0;
  for (int d = 0; d < cal.n(); ++d) s += logistic_cdf(idx[d] + t.alpha[cal.sender[d]] + t.gamma[cal.receiver[d]]);
  return s / static_cast<double>(cal.n());
}

// ---------------------------------------------------------------------------
// Replicates

inline constexpr int kModes = 2;  // 0 unclustered, 1 pairwise clustered

struct ReplicateRecord {
  int s = 0;
  bool ok = false;
  std::string error;
  std::vector<VectorXd> b_hat, b_cor;                   // per coefficient
  std::array<std::vector<VectorXd>, kModes> b_se;       // [mode][coefficient]
  std::array<std::vector<double>, kModes> b_crit;       // [mode][coefficient]
  std::vector<VectorXd> F_hat, F_cor;                   // per counterfactual (2 per treatment)
  std::array<std::vector<VectorXd>, kModes> F_se;       // [mode][counterfactual]
  std::array<std::vector<double>, kModes> F_crit;       // [mode][treatment], joint over both levels
  std::vector<double> D_hat, D_cor;                     // per treatment
  std::array<std::vector<double>, kModes> D_se;         // [mode][treatment]
  int flagged = 0;
};

namespace detail {

inline nlohmann::json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
inline VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}
inline nlohmann::json vecs_json(const std::vector<VectorXd>& vs) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& v : vs) a.push_back(vec_json(v));
  return a;
}
inline std::vector<VectorXd> json_vecs(const nlohmann::json& j) {
  std::vector<VectorXd> out;
  for (const auto& e : j) out.push_back(json_vec(e));
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const ReplicateRecord& r) {
  using namespace detail;
  nlohmann::json j{{"s", r.s}, {"ok", r.ok}};
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  j["b_hat"] = vecs_json(r.b_hat);
  j["b_cor"] = vecs_json(r.b_cor);
  j["F_hat"] = vecs_json(r.F_hat);
  j["F_cor"] = vecs_json(r.F_cor);
  j["D_hat"] = r.D_hat;
  j["D_cor"] = r.D_cor;
  j["flagged"] = r.flagged;
  for (int m = 0; m < kModes; ++m) {
    const std::string k = std::to_string(m);
    j["b_se" + k] = vecs_json(r.b_se[m]);
    j["b_crit" + k] = r.b_crit[m];
    j["F_se" + k] = vecs_json(r.F_se[m]);
    j["F_crit" + k] = r.F_crit[m];
    j["D_se" + k] = r.D_se[m];
  }
  return j;
}

inline ReplicateRecord record_from_json(const nlohmann::json& j) {
  using namespace detail;
  ReplicateRecord r;
  r.s = j.at("s").get<int>();
  r.ok = j.at("ok").get<bool>();
  if (!r.ok) {
    r.error = j.value("error", std::string());
    return r;
  }
  r.b_hat = json_vecs(j.at("b_hat"));
  r.b_cor = json_vecs(j.at("b_cor"));
  r.F_hat = json_vecs(j.at("F_hat"));
  r.F_cor = json_vecs(j.at("F_cor"));
  r.D_hat = j.at("D_hat").get<std::vector<double>>();
  r.D_cor = j.at("D_cor").get<std::vector<double>>();
  r.flagged = j.at("flagged").get<int>();
  for (int m = 0; m < kModes; ++m) {
    const std::string k = std::to_string(m);
    r.b_se[m] = json_vecs(j.at("b_se" + k));
    r.b_crit[m] = j.at("b_crit" + k).get<std::vector<double>>();
    r.F_se[m] = json_vecs(j.at("F_se" + k));
    r.F_crit[m] = j.at("F_crit" + k).get<std::vector<double>>();
    r.D_se[m] = j.at("D_se" + k).get<std::vector<double>>();
  }
  return r;
}

inline std::vector<MatrixXd> design_counterfactuals(const DyadPanel& p, const Calibration& cal) {
  std::vector<MatrixXd> cfs;
  for (const auto& t : cal.treatments) {
    cfs.push_back(counterfactual_covariates(p, t, 0));
    cfs.push_back(counterfactual_covariates(p, t, 1));
  }
  return cfs;
}

// Simulates replicate s and records estimates, standard errors and critical
// values for both clustering modes. Estimation errors are captured.
inline ReplicateRecord run_replicate(const PreparedDesign& pd, int s, const SolverOptions& opts = {}) {
  ReplicateRecord rec;
  rec.s = s;
  try {
    const DyadPanel p = simulate_panel(pd, s);
    const ThresholdGrid grid{pd.grid, pd.design.censor, pd.region_hi};
    const auto cfs = design_counterfactuals(p, pd.cal);
    const bool star = pd.design.variant == Variant::Star;
    const GridAnalysis ga = analyze_grid(p, grid, cfs, star, opts, 1);
    if (!ga.degenerate.empty()) throw DegenerateThresholdError("degenerate threshold in replicate", ga.degenerate.front());
    const int dx = p.dx();
    const auto T = static_cast<int>(pd.cal.treatments.size());
    for (int l = 0; l < dx; ++l) {
      rec.b_hat.push_back(ga.series([l](const ThresholdEstimate& e) { return e.beta_hat[l]; }));
      rec.b_cor.push_back(ga.series([l](const ThresholdEstimate& e) { return e.beta_tilde[l]; }));
    }
    for (int k = 0; k < 2 * T; ++k) {
      rec.F_hat.push_back(ga.series([k](const ThresholdEstimate& e) { return e.F_hat[k]; }));
      rec.F_cor.push_back(ga.series([k, star](const ThresholdEstimate& e) { return star ? e.F_star[k] : e.F_tilde[k]; }));
    }
    for (const auto& pt : ga.points) {
      for (auto f : pt.fit.sender_flags) rec.flagged += f != Separation::None;
      for (auto f : pt.fit.receiver_flags) rec.flagged += f != Separation::None;
    }
    std::vector<VectorXd> dphi;
    for (int t = 0; t < T; ++t) {
      std::vector<VectorXd> p0, p1;
      for (const auto& pt : ga.points) {
        p0.push_back(pt.infl.phi.col(2 * t));
        p1.push_back(pt.infl.phi.col(2 * t + 1));
      }
      dphi.push_back(average_effect_influence(ga.grid, p1, p0));
      rec.D_hat.push_back(step_mean(ga.grid, shape_restrict(rec.F_hat[2 * t + 1])) -
                          step_mean(ga.grid, shape_restrict(rec.F_hat[2 * t])));
      rec.D_cor.push_back(step_mean(ga.grid, shape_restrict(rec.F_cor[2 * t + 1])) -
                          step_mean(ga.grid, shape_restrict(rec.F_cor[2 * t])));
    }
    const std::uint64_t boot_seed = KeyedRng(pd.design.seed, kDomainSimulation).bits(static_cast<std::uint64_t>(s), 0xB007);
    for (int m = 0; m < kModes; ++m) {
      const ClusterMode mode = m == 0 ? ClusterMode::None : ClusterMode::Pairwise;
      const GridInference gi = grid_inference(p, ga, mode, boot_seed, pd.design.M);
      rec.b_se[m] = gi.se_beta;
      rec.F_se[m] = gi.se_F;
      for (int l = 0; l < dx; ++l)
        rec.b_crit[m].push_back(critical_value(max_t_draws(gi.draws_beta[l], gi.se_beta[l]), pd.design.level));
      for (int t = 0; t < T; ++t) {
        const auto tt = joint_max_t({&gi.draws_F[2 * t], &gi.draws_F[2 * t + 1]}, {&gi.se_F[2 * t], &gi.se_F[2 * t + 1]},
                                    ga.grid, "distribution");
        rec.F_crit[m].push_back(critical_value(tt, pd.design.level));
        rec.D_se[m].push_back(influence_se(p, dphi[t], mode, "average effect"));
      }
    }
    rec.ok = true;
  } catch (const Error& e) {
    rec = ReplicateRecord{};
    rec.s = s;
    rec.error = e.what();
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Aggregation

struct BandSummary {
  std::string target, correction, cluster;
  double avg_length = 0.0;
  double avg_critical_value = 0.0;
  double coverage_uniform = 0.0;
  double coverage_pointwise = 0.0;       // whole curve inside the 1.96 band
  double coverage_pointwise_rate = 0.0;  // per-point rate of the 1.96 band
  double se_sd = 0.0;
};

struct CurveSummary {
  std::string target, correction;
  std::vector<double> grid;
  VectorXd truth, bias, sd, rmse;  // absolute
  VectorXd bias_pct, sd_pct, rmse_pct;
};

struct AverageSummary {
  std::string target, correction;
  double truth = 0.0, bias = 0.0, sd = 0.0, rmse = 0.0;
  std::array<double, kModes> coverage{}, se_sd{};
};

struct McReport {
  nlohmann::json design;
  int S = 0, completed = 0, failures = 0;
  std::vector<std::string> failure_messages;
  std::vector<double> grid;
  std::vector<BandSummary> bands;
  std::vector<CurveSummary> curves;
  std::vector<AverageSummary> averages;
  double avg_flagged = 0.0;

  const BandSummary& band(const std::string& target, const std::string& correction, const std::string& cluster) const {
    for (const auto& b : bands)
      if (b.target == target && b.correction == correction && b.cluster == cluster) return b;
    throw ConfigError("no band summary for " + target + "/" + correction + "/" + cluster);
  }
  const CurveSummary& curve(const std::string& target, const std::string& correction) const {
    for (const auto& c : curves)
      if (c.target == target && c.correction == correction) return c;
    throw ConfigError("no curve summary for " + target + "/" + correction);
  }
};

namespace detail {

struct Moments {
  VectorXd mean, sd;
};

inline Moments moments(const std::vector<const VectorXd*>& xs) {
  Moments m;
  const auto S = static_cast<double>(xs.size());
  m.mean = VectorXd::Zero(xs.front()->size());
  for (const auto* x : xs) m.mean += *x;
  m.mean /= S;
  VectorXd v = VectorXd::Zero(m.mean.size());
  for (const auto* x : xs) v += (*x - m.mean).cwiseAbs2();
  m.sd = (v / S).cwiseSqrt();
  return m;
}

inline CurveSummary curve_summary(std::string target, std::string correction, const std::vector<double>& grid,
                                  const VectorXd& truth, const std::vector<const VectorXd*>& est) {
  CurveSummary c;
  c.target = std::move(target);
  c.correction = std::move(correction);
  c.grid = grid;
  c.truth = truth;
  const Moments m = moments(est);
  c.bias = m.mean - truth;
  c.sd = m.sd;
  c.rmse = (c.bias.cwiseAbs2() + c.sd.cwiseAbs2()).cwiseSqrt();
  const VectorXd scale = truth.cwiseAbs();
  c.bias_pct = 100.0 * c.bias.cwiseQuotient(scale);
  c.sd_pct = 100.0 * c.sd.cwiseQuotient(scale);
  c.rmse_pct = 100.0 * c.rmse.cwiseQuotient(scale);
  return c;
}

}  // namespace detail

// Grid average of mean(se)/SD over points with positive spread; 0 if none.
inline double se_sd_ratio(const VectorXd& se_mean, const VectorXd& sd) {
  double acc = 0.0;
  int used = 0;
  for (Eigen::Index g = 0; g < sd.size(); ++g)
    if (sd[g] > 0.0) {
      acc += se_mean[g] / sd[g];
      ++used;
    }
  return used > 0 ? acc / used : 0.0;
}

inline McReport aggregate(const PreparedDesign& pd, const std::vector<ReplicateRecord>& records) {
  McReport rep;
  rep.design = pd.design.to_json();
  rep.S = pd.design.S;
  rep.grid = pd.grid;
  std::vector<const ReplicateRecord*> ok;
  for (const auto& r : records) {
    if (r.ok) {
      ok.push_back(&r);
    } else {
      ++rep.failures;
      rep.failure_messages.push_back("replicate " + std::to_string(r.s) + ": " + r.error);
    }
  }
  rep.completed = static_cast<int>(records.size());
  if (static_cast<double>(rep.failures) >= 0.01 * pd.design.S && rep.failures > 0)
    throw Error("too many failed replicates (" + std::to_string(rep.failures) + " of " + std::to_string(pd.design.S) +
                "); first: " + rep.failure_messages.front());
  if (ok.empty()) throw Error("no successful replicates");
  const auto G = static_cast<Eigen::Index>(pd.grid.size());
  const auto& cal = pd.cal;
  const double z = pointwise_critical_value(pd.design.level);
  const double nS = static_cast<double>(ok.size());
  const char* corr_names[2] = {"uncorrected", "corrected"};
  const char* mode_names[2] = {"none", "pairwise"};
  for (const auto* r : ok) rep.avg_flagged += r->flagged / nS;

  // Coefficients: truth is constant over the grid.
  const DrTruth t0 = true_dr_params(cal, pd.grid.front());
  for (Eigen::Index l = 0; l < cal.x.cols(); ++l) {
    const std::string target = "beta_" + cal.names[static_cast<std::size_t>(l)];
    const VectorXd truth = VectorXd::Constant(G, t0.beta[l]);
    for (int c = 0; c < 2; ++c) {
      std::vector<const VectorXd*> est;
      for (const auto* r : ok) est.push_back(c == 0 ? &r->b_hat[l] : &r->b_cor[l]);
      rep.curves.push_back(detail::curve_summary(target, corr_names[c], pd.grid, truth, est));
      const VectorXd sd = rep.curves.back().sd;
      for (int m = 0; m < kModes; ++m) {
        BandSummary b{target, corr_names[c], mode_names[m]};
        VectorXd se_mean = VectorXd::Zero(G);
        for (const auto* r : ok) {
          const VectorXd& e = c == 0 ? r->b_hat[l] : r->b_cor[l];
          const VectorXd& se = r->b_se[m][l];
          const double cv = r->b_crit[m][l];
          const VectorXd dev = (e - truth).cwiseAbs();
          b.avg_length += 2.0 * cv * se.mean() / nS;
          b.avg_critical_value += cv / nS;
          b.coverage_uniform += (dev.array() <= cv * se.array()).all() ? 1.0 / nS : 0.0;
          b.coverage_pointwise += (dev.array() <= z * se.array()).all() ? 1.0 / nS : 0.0;
          b.coverage_pointwise_rate += (dev.array() <= z * se.array()).cast<double>().mean() / nS;
          se_mean += se / nS;
        }
        b.se_sd = se_sd_ratio(se_mean, sd);
        rep.bands.push_back(b);
      }
    }
  }

  // Distributions: joint over the two levels of each treatment.
  for (std::size_t t = 0; t < cal.treatments.size(); ++t) {
    const std::string target = "F_" + cal.names[static_cast<std::size_t>(cal.treatments[t].column)];
    std::array<VectorXd, 2> truth;
    for (int k = 0; k < 2; ++k) {
      const DyadPanel shell = DyadPanel::from_indices(cal.sender, cal.receiver, VectorXd::Zero(cal.n()), cal.x);
      const MatrixXd xk = counterfactual_covariates(shell, cal.treatments[t], k);
      truth[k].resize(G);
      for (Eigen::Index g = 0; g < G; ++g) truth[k][g] = true_distribution(cal, xk, pd.grid[static_cast<std::size_t>(g)]);
    }
    const double true_delta = step_mean(pd.grid, truth[1]) - step_mean(pd.grid, truth[0]);
    for (int c = 0; c < 2; ++c) {
      std::array<VectorXd, 2> sd;
      for (int k = 0; k < 2; ++k) {
        std::vector<const VectorXd*> est;
        for (const auto* r : ok) est.push_back(c == 0 ? &r->F_hat[2 * t + k] : &r->F_cor[2 * t + k]);
        rep.curves.push_back(
            detail::curve_summary(target + "_k" + std::to_string(k), corr_names[c], pd.grid, truth[k], est));
        sd[k] = rep.curves.back().sd;
      }
      for (int m = 0; m < kModes; ++m) {
        BandSummary b{target, corr_names[c], mode_names[m]};
        std::array<VectorXd, 2> se_mean{VectorXd::Zero(G), VectorXd::Zero(G)};
        for (const auto* r : ok) {
          const double cv = r->F_crit[m][t];
          bool cu = true, cp = true;
          double rate = 0.0, len = 0.0;
          for (int k = 0; k < 2; ++k) {
            const VectorXd& e = c == 0 ? r->F_hat[2 * t + k] : r->F_cor[2 * t + k];
            const VectorXd& se = r->F_se[m][2 * t + k];
            const VectorXd ctr = shape_restrict(e);
            const VectorXd lo = shape_restrict(VectorXd(ctr - cv * se)), hi = shape_restrict(VectorXd(ctr + cv * se));
            const VectorXd plo = shape_restrict(VectorXd(ctr - z * se)), phi = shape_restrict(VectorXd(ctr + z * se));
            const auto& tr = truth[k];
            cu = cu && (lo.array() <= tr.array()).all() && (tr.array() <= hi.array()).all();
            const auto inside = (plo.array() <= tr.array()) && (tr.array() <= phi.array());
            cp = cp && inside.all();
            rate += inside.cast<double>().mean() / 2.0;
            len += (hi - lo).mean() / 2.0;
            se_mean[k] += se / nS;
          }
          b.avg_length += len / nS;
          b.avg_critical_value += cv / nS;
          b.coverage_uniform += cu ? 1.0 / nS : 0.0;
          b.coverage_pointwise += cp ? 1.0 / nS : 0.0;
          b.coverage_pointwise_rate += rate / nS;
        }
        b.se_sd = 0.5 * (se_sd_ratio(se_mean[0], sd[0]) + se_sd_ratio(se_mean[1], sd[1]));
        rep.bands.push_back(b);
      }
      AverageSummary a;
      a.target = "delta_" + cal.names[static_cast<std::size_t>(cal.treatments[t].column)];
      a.correction = corr_names[c];
      a.truth = true_delta;
      double mean = 0.0, var = 0.0;
      for (const auto* r : ok) mean += (c == 0 ? r->D_hat[t] : r->D_cor[t]) / nS;
      for (const auto* r : ok) var += std::pow((c == 0 ? r->D_hat[t] : r->D_cor[t]) - mean, 2) / nS;
      a.bias = mean - true_delta;
      a.sd = std::sqrt(var);
      a.rmse = std::sqrt(a.bias * a.bias + var);
      for (int m = 0; m < kModes; ++m) {
        double cov = 0.0, se = 0.0;
        for (const auto* r : ok) {
          const double e = c == 0 ? r->D_hat[t] : r->D_cor[t];
          cov += std::abs(e - true_delta) <= z * r->D_se[m][t] ? 1.0 / nS : 0.0;
          se += r->D_se[m][t] / nS;
        }
        a.coverage[m] = cov;
        a.se_sd[m] = a.sd > 0.0 ? se / a.sd : 0.0;
      }
      rep.averages.push_back(a);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Study driver with resumable checkpoints

struct StudyOptions {
  int threads = 1;
  std::string checkpoint;  // empty: no checkpointing
  int checkpoint_every = 25;
  std::function<void(int done, int total)> progress;
  int stop_after = -1;  // test hook: stop once this many replicates are recorded
  SolverOptions solver;
};

struct StudyResult {
  bool complete = false;
  std::vector<ReplicateRecord> records;
  std::optional<McReport> report;
};

namespace detail {

inline nlohmann::json checkpoint_json(const McDesign& d, const std::vector<ReplicateRecord>& recs) {
  nlohmann::json j{{"format", "fedr-mc-checkpoint"}, {"version", 1}, {"design", d.to_json()}};
  j["records"] = nlohmann::json::array();
  for (const auto& r : recs) j["records"].push_back(to_json(r));
  return j;
}

inline void write_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + tmp + "'");
    out << text;
    if (!out) throw Error("failed writing checkpoint '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::vector<ReplicateRecord> load_checkpoint(const std::string& path, const McDesign& design) {
  std::ifstream in(path);
  if (!in) return {};
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("unreadable checkpoint '" + path + "': " + e.what());
  }
  if (j.value("format", std::string()) != "fedr-mc-checkpoint")
    throw ConfigError("'" + path + "' is not a Monte Carlo checkpoint");
  if (j.at("design") != design.to_json())
    throw ConfigError("checkpoint '" + path + "' was written for a different design");
  std::vector<ReplicateRecord> recs;
  for (const auto& r : j.at("records")) recs.push_back(record_from_json(r));
  for (std::size_t s = 0; s < recs.size(); ++s)
    if (recs[s].s != static_cast<int>(s)) throw ConfigError("checkpoint records are out of order");
  return recs;
}

inline StudyResult run_study(const McDesign& design, const StudyOptions& opt = {}) {
  const PreparedDesign pd = prepare(design);
  StudyResult res;
  if (!opt.checkpoint.empty()) res.records = load_checkpoint(opt.checkpoint, design);
  if (static_cast<int>(res.records.size()) > design.S) res.records.resize(static_cast<std::size_t>(design.S));
  const int every = std::max(1, opt.checkpoint_every);
  while (static_cast<int>(res.records.size()) < design.S) {
    const int start = static_cast<int>(res.records.size());
    const int count = std::min(every - start % every, design.S - start);
    std::vector<ReplicateRecord> batch(static_cast<std::size_t>(count));
    parallel_for(count, opt.threads, [&](int k) { batch[static_cast<std::size_t>(k)] = run_replicate(pd, start + k, opt.solver); });
    for (auto& r : batch) res.records.push_back(std::move(r));
    if (!opt.checkpoint.empty()) detail::write_atomic(opt.checkpoint, detail::checkpoint_json(design, res.records).dump());
    if (opt.progress) opt.progress(static_cast<int>(res.records.size()), design.S);
    if (opt.stop_after >= 0 && static_cast<int>(res.records.size()) >= opt.stop_after &&
        static_cast<int>(res.records.size()) < design.S)
      return res;
  }
  res.complete = true;
  res.report = aggregate(pd, res.records);
  return res;
}

}  // namespace fedr
