#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "fedr/mc.hpp"
#include "fedr/pipeline.hpp"
#include "test_util.hpp"

using namespace fedr;

namespace {

McDesign small_design(ErrorMode mode = ErrorMode::Independent) {
  McDesign d;
  d.I = d.J = 25;
  d.errors = mode;
  d.grid_indices = {0.6, 0.7, 0.8, 0.9};
  d.S = 4;
  d.M = 60;
  d.seed = 11;
  return d;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> o(v.size());
  std::iota(o.begin(), o.end(), 0);
  std::sort(o.begin(), o.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t k = 0; k < o.size(); ++k) r[o[k]] = static_cast<double>(k);
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Uncensored design so the uniform error is recoverable from the outcome.
PreparedDesign uncensored(McDesign d) {
  PreparedDesign pd = prepare(d);
  pd.design.censor = -std::numeric_limits<double>::infinity();
  return pd;
}

}  // namespace

TEST(Mc, ZeroScaleGivesCensoredIndex) {
  PreparedDesign pd = prepare(small_design());
  pd.cal.sigma = 0.0;
  const DyadPanel p = simulate_panel(pd, 0);
  const VectorXd loc = pd.cal.location(pd.cal.x);
  for (int d = 0; d < p.n(); ++d) EXPECT_EQ(p.y()[d], std::max(loc[d], 0.0));
}

TEST(Mc, PairwiseErrorsHaveTheStatedRankCorrelation) {
  McDesign d = small_design(ErrorMode::Pairwise);
  d.I = d.J = 120;
  const PreparedDesign pd = uncensored(d);
  const DyadPanel p = simulate_panel(pd, 0);
  const VectorXd loc = pd.cal.location(pd.cal.x);
  const KeyedRng rng(pd.design.seed, kDomainSimulation);
  std::vector<double> a, b, own;
  for (int dd = 0; dd < p.n(); ++dd) {
    const int q = p.partner(dd);
    if (q < 0 || p.sender(dd) > p.receiver(dd)) continue;
    a.push_back(p.y()[dd] - loc[dd]);
    b.push_back(p.y()[q] - loc[q]);
    own.push_back(rng.normal(0, KeyedRng::pair_key(p.sender(dd), p.receiver(dd))));
  }
  ASSERT_GT(a.size(), 7000u);
  // Spearman of a Gaussian copula with correlation r is (6/pi) asin(r/2).
  auto spearman = [](double r) { return 6.0 / kPi * std::asin(r / 2.0); };
  // u_ij against its own normal: r = 0.75, rank correlation 0.73.
  EXPECT_NEAR(spearman(0.75), 0.73, 0.005);
  EXPECT_NEAR(pearson(ranks(a), ranks(own)), spearman(0.75), 0.02);
  // u_ij against u_ji: r = 2 * 0.75 * sqrt(1 - 0.75^2).
  EXPECT_NEAR(pearson(ranks(a), ranks(b)), spearman(1.5 * std::sqrt(1.0 - 0.5625)), 0.01);
}

TEST(Mc, LatentErrorVarianceMatchesScale) {
  McDesign d = small_design();
  d.I = d.J = 120;
  d.synthetic.sigma = 1.7;
  const PreparedDesign pd = uncensored(d);
  const VectorXd loc = pd.cal.location(pd.cal.x);
  double s1 = 0.0, s2 = 0.0, n = 0.0;
  for (int s = 0; s < 5; ++s) {
    const DyadPanel p = simulate_panel(pd, s);
    const VectorXd e = p.y() - loc;
    s1 += e.sum();
    s2 += e.squaredNorm();
    n += p.n();
  }
  const double var = s2 / n - (s1 / n) * (s1 / n);
  EXPECT_GE(n, 1e4);
  EXPECT_NEAR(var / (1.7 * 1.7), 1.0, 0.02);
}

TEST(Mc, TrueParametersAtZero) {
  const PreparedDesign pd = prepare(small_design());
  const auto t = true_dr_params(pd.cal, 0.0);
  EXPECT_LT((t.beta + kLogisticSd * pd.cal.beta / pd.cal.sigma).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(t.alpha.sum(), t.gamma.sum(), 1e-10);
}

TEST(Mc, OnlyTheLevelMovesWithTheThreshold) {
  McDesign d = small_design();
  d.synthetic.sigma = 0.8;
  const PreparedDesign pd = prepare(d);
  const auto a = true_dr_params(pd.cal, 0.3), b = true_dr_params(pd.cal, 1.9);
  EXPECT_EQ(a.beta, b.beta);
  const double step = kLogisticSd * 1.6 / 0.8;
  for (int dd = 0; dd < pd.cal.n(); ++dd) {
    const int i = pd.cal.sender[dd], j = pd.cal.receiver[dd];
    EXPECT_NEAR((b.alpha[i] + b.gamma[j]) - (a.alpha[i] + a.gamma[j]), step, 1e-12);
  }
  // Receiver effects differ only by the normalization constant.
  const VectorXd dg = b.gamma - a.gamma;
  EXPECT_LT((dg.array() - dg[0]).abs().maxCoeff(), 1e-12);
}

TEST(Mc, IndicatorFrequenciesFollowTheModel) {
  McDesign d = small_design();
  d.I = d.J = 5;
  d.drop_diagonal = false;
  d.grid_indices = {0.6};
  const PreparedDesign pd = prepare(d);
  const int R = 20000;
  for (double t : {0.0, 0.8}) {
    VectorXd freq = VectorXd::Zero(pd.cal.n());
    for (int s = 0; s < R; ++s) freq += threshold_indicators(simulate_panel(pd, s), t) / R;
    const auto tr = true_dr_params(pd.cal, t);
    const VectorXd idx = pd.cal.x * tr.beta;
    for (int dd = 0; dd < pd.cal.n(); ++dd) {
      const double p = logistic_cdf(idx[dd] + tr.alpha[pd.cal.sender[dd]] + tr.gamma[pd.cal.receiver[dd]]);
      EXPECT_NEAR(freq[dd], p, 0.015) << t << " " << dd;
    }
  }
}

TEST(Mc, StudyReportInvariants) {
  const auto res = run_study(small_design());
  ASSERT_TRUE(res.complete);
  const McReport& rep = *res.report;
  EXPECT_EQ(rep.completed, 4);
  EXPECT_EQ(rep.failures, 0);
  for (const auto& c : rep.curves)
    for (Eigen::Index g = 0; g < c.rmse.size(); ++g)
      EXPECT_NEAR(c.rmse[g] * c.rmse[g], c.bias[g] * c.bias[g] + c.sd[g] * c.sd[g], 1e-12);
  for (const auto& b : rep.bands) {
    for (double v : {b.coverage_uniform, b.coverage_pointwise, b.coverage_pointwise_rate}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0 + 1e-12);
    }
    EXPECT_LE(b.coverage_pointwise, b.coverage_pointwise_rate + 1e-12);
    EXPECT_GT(b.avg_length, 0.0);
  }
  EXPECT_EQ(rep.bands.size(), 4u * 2u * 2u);
  EXPECT_EQ(rep.averages.size(), 2u * 2u);
}

TEST(Mc, SingleReplicateStudy) {
  McDesign d = small_design();
  d.S = 1;
  const auto res = run_study(d);
  ASSERT_TRUE(res.complete);
  EXPECT_EQ(res.records.size(), 1u);
  for (const auto& b : res.report->bands) {
    EXPECT_TRUE(b.coverage_uniform == 0.0 || b.coverage_uniform == 1.0);
    EXPECT_TRUE(std::isfinite(b.se_sd));
  }
}

TEST(Mc, ResumedStudyMatchesUninterrupted) {
  McDesign d = small_design(ErrorMode::Pairwise);
  d.S = 6;
  const auto path = (std::filesystem::temp_directory_path() / "fedr_test_checkpoint.json").string();
  std::filesystem::remove(path);
  StudyOptions o;
  o.checkpoint = path;
  o.checkpoint_every = 2;
  o.stop_after = 2;
  const auto first = run_study(d, o);
  EXPECT_FALSE(first.complete);
  EXPECT_EQ(first.records.size(), 2u);
  o.stop_after = -1;
  const auto resumed = run_study(d, o);
  const auto straight = run_study(d);
  ASSERT_TRUE(resumed.complete);
  ASSERT_EQ(resumed.records.size(), straight.records.size());
  for (std::size_t s = 0; s < straight.records.size(); ++s)
    EXPECT_EQ(to_json(resumed.records[s]).dump(), to_json(straight.records[s]).dump());
  for (std::size_t k = 0; k < straight.report->bands.size(); ++k) {
    EXPECT_EQ(resumed.report->bands[k].coverage_uniform, straight.report->bands[k].coverage_uniform);
    EXPECT_EQ(resumed.report->bands[k].se_sd, straight.report->bands[k].se_sd);
  }
  McDesign other = d;
  other.seed = 99;
  EXPECT_THROW(load_checkpoint(path, other), ConfigError);
  std::filesystem::remove(path);
}

TEST(Mc, ThreadCountDoesNotChangeRecords) {
  McDesign d = small_design();
  d.S = 3;
  StudyOptions one, three;
  three.threads = 3;
  const auto a = run_study(d, one), b = run_study(d, three);
  for (std::size_t s = 0; s < a.records.size(); ++s)
    EXPECT_EQ(to_json(a.records[s]).dump(), to_json(b.records[s]).dump());
}

TEST(Mc, RecordRoundTrip) {
  const auto rec = run_replicate(prepare(small_design()), 2);
  ASSERT_TRUE(rec.ok) << rec.error;
  EXPECT_EQ(to_json(record_from_json(to_json(rec))).dump(), to_json(rec).dump());
}

TEST(Mc, DesignJsonRoundTripAndValidation) {
  McDesign d = small_design(ErrorMode::Pairwise);
  d.synthetic.effect_sd = 0.4;
  EXPECT_EQ(McDesign::from_json(d.to_json()).to_json(), d.to_json());
  auto bad = d.to_json();
  bad["errors"] = "clustered";
  EXPECT_THROW(McDesign::from_json(bad), ConfigError);
  bad = d.to_json();
  bad["grid_indices"] = {0.5, 0.4};
  EXPECT_THROW(McDesign::from_json(bad), ConfigError);
}

TEST(Pipeline, EstimateOnSimulatedPanel) {
  McDesign d = small_design();
  d.I = d.J = 20;
  const DyadPanel p = simulate_panel(prepare(d), 0);
  EstimateOptions o;
  o.grid_mode = QuantileIndexed{{0.6, 0.7, 0.8, 0.9}};
  o.region = {0.0, p.y().maxCoeff()};
  o.draws = 100;
  o.levels = {0.9, 0.95};
  const auto r = estimate(p, o);
  ASSERT_EQ(r.bands.size(), 2u);
  EXPECT_GE(r.bands[1].crit_F, r.bands[0].crit_F);
  for (const auto& lb : r.bands) {
    EXPECT_EQ(lb.beta_uniform.size(), 2u);
    EXPECT_EQ(lb.F_uniform[0].grid.size(), r.analysis.size());
    for (int k = 0; k < 2; ++k)
      EXPECT_TRUE((lb.F_uniform[k].lower.array() <= lb.F_pointwise[k].lower.array() + 1e-15).all());
  }
}
