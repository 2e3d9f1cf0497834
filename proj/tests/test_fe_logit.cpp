#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "fedr/fe_logit.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fedr;

namespace {

// Panels with a fitted median threshold and no separated units.
struct Case {
  DyadPanel panel;
  double y;
};

std::vector<Case> small_cases(int count) {
  std::vector<Case> out;
  for (std::uint64_t seed = 1; out.size() < static_cast<std::size_t>(count) && seed < 500; ++seed) {
    const int I = 3 + static_cast<int>(seed % 3), J = 3 + static_cast<int>((seed / 3) % 3);
    auto p = testutil::random_panel(I, J, 2, seed, false, 0.3);
    const double y = testutil::median_threshold(p);
    try {
      const auto fit = fit_threshold(p, y);
      if (fit.has_degenerate_units() || fit.beta.cwiseAbs().maxCoeff() > 8.0) continue;
      out.push_back(Case{std::move(p), y});
    } catch (const Error&) {
    }
  }
  return out;
}

}  // namespace

TEST(FeLogit, SymmetricTwoByTwo) {
  std::vector<int> s{0, 0, 1, 1}, r{0, 1, 0, 1};
  VectorXd y(4);
  y << 0.0, 1.0, 1.0, 0.0;  // indicator pattern at 0.5: [[1,0],[0,1]]
  const auto p = DyadPanel::from_indices(s, r, y, MatrixXd(4, 0));
  const auto fit = fit_threshold(p, 0.5);
  for (int d = 0; d < 4; ++d) {
    EXPECT_NEAR(fit.index[d], 0.0, 1e-12);
    EXPECT_NEAR(fit.prob[d], 0.5, 1e-12);
  }
}

TEST(FeLogit, MatchesDenseNewtonOracle) {
  const auto cases = small_cases(20);
  ASSERT_GE(cases.size(), 20u);
  for (const auto& c : cases) {
    const auto fit = fit_threshold(c.panel, c.y);
    const VectorXd ref = oracle::logit_fit(c.panel, c.y);
    EXPECT_LT((fit.theta() - ref).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(FeLogit, NormalizationAndTranslationInvariance) {
  const auto p = testutil::random_panel(6, 5, 2, 11);
  const double y = testutil::median_threshold(p);
  const auto fit = fit_threshold(p, y);
  EXPECT_NEAR(fit.alpha.sum() - fit.gamma.sum(), 0.0, 1e-10);
  VectorXd shifted = fit.theta();
  shifted.segment(2, 6).array() += 1.7;
  shifted.segment(8, 5).array() -= 1.7;
  EXPECT_NEAR(logit_loglik(p, y, shifted), logit_loglik(p, y, fit.theta()), 1e-10);
}

TEST(FeLogit, EcdfAndPerUnitFirstOrderConditions) {
  const auto p = testutil::random_panel(12, 10, 2, 5);
  for (double tau : {0.2, 0.5, 0.8}) {
    std::vector<double> v(p.y().data(), p.y().data() + p.n());
    const double y = empirical_quantile(v, tau);
    const auto fit = fit_threshold(p, y);
    const VectorXd z = threshold_indicators(p, y);
    EXPECT_NEAR(fit.prob.mean(), z.mean(), 1e-10);
    for (int i = 0; i < p.I(); ++i) {
      if (fit.sender_flags[i] != Separation::None) continue;
      double s = 0.0;
      for (int d : p.dyads_of_sender(i)) s += z[d] - fit.prob[d];
      EXPECT_NEAR(s, 0.0, 1e-8);
    }
    for (int j = 0; j < p.J(); ++j) {
      if (fit.receiver_flags[j] != Separation::None) continue;
      double s = 0.0;
      for (int d : p.dyads_of_receiver(j)) s += z[d] - fit.prob[d];
      EXPECT_NEAR(s, 0.0, 1e-8);
    }
    EXPECT_LE(fit.grad_norm, 1e-8);
    for (int d = 0; d < p.n(); ++d) {
      EXPECT_GT(fit.prob[d], 0.0);
      EXPECT_LT(fit.prob[d], 1.0);
    }
  }
}

TEST(FeLogit, ObjectiveTraceMonotone) {
  const auto p = testutil::random_panel(15, 15, 2, 8, true, 1.5);
  const auto fit = fit_threshold(p, testutil::median_threshold(p));
  for (std::size_t k = 1; k < fit.objective_trace.size(); ++k)
    EXPECT_GE(fit.objective_trace[k], fit.objective_trace[k - 1] - 1e-12 * std::abs(fit.objective_trace[k - 1]));
}

TEST(FeLogit, RowOrderInvariance) {
  const auto p = testutil::random_panel(7, 6, 2, 21);
  std::vector<int> perm(p.n());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::vector<int> s, r;
  VectorXd y(p.n());
  MatrixXd x(p.n(), p.dx());
  for (int k = 0; k < p.n(); ++k) {
    s.push_back(p.sender(perm[k]));
    r.push_back(p.receiver(perm[k]));
    y[k] = p.y()[perm[k]];
    x.row(k) = p.x().row(perm[k]);
  }
  const auto q = DyadPanel::from_indices(s, r, y, x);
  const double t = testutil::median_threshold(p);
  const auto a = fit_threshold(p, t);
  const auto b = fit_threshold(q, t);
  EXPECT_LT((a.beta - b.beta).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((a.alpha - b.alpha).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(FeLogit, SeparatedSenderIsClampedAndFlagged) {
  auto base = testutil::random_panel(8, 8, 1, 4);
  VectorXd y = base.y();
  const double t = testutil::median_threshold(base);
  for (int d : base.dyads_of_sender(2)) y[d] = t - 10.0;  // sender 2 always below
  const auto p = DyadPanel::from_indices(base.senders(), base.receivers(), y, base.x());
  const auto fit = fit_threshold(p, t);
  EXPECT_EQ(fit.sender_flags[2], Separation::AllOne);
  EXPECT_TRUE(fit.has_degenerate_units());
  for (int d : p.dyads_of_sender(2)) EXPECT_GT(fit.prob[d], 1.0 - 1e-9);
  EXPECT_LE(fit.grad_norm, 1e-8);
}

TEST(FeLogit, DegenerateThreshold) {
  const auto p = testutil::random_panel(4, 4, 1, 2);
  EXPECT_THROW(fit_threshold(p, p.y().minCoeff() - 1.0), DegenerateThresholdError);
  EXPECT_THROW(fit_threshold(p, p.y().maxCoeff() + 1.0), DegenerateThresholdError);
}

TEST(FitAll, SingletonMatchesFitThreshold) {
  const auto p = testutil::random_panel(6, 6, 2, 3);
  const double t = testutil::median_threshold(p);
  const auto all = fit_all(p, ThresholdGrid{{t}, t, t});
  ASSERT_EQ(all.fits.size(), 1u);
  const auto one = fit_threshold(p, t);
  EXPECT_EQ(all.fits[0]->beta, one.beta);
}

TEST(FitAll, DegeneratePointReportedOthersSucceed) {
  const auto p = testutil::random_panel(10, 10, 2, 12);
  std::vector<double> v(p.y().data(), p.y().data() + p.n());
  const double lo = p.y().minCoeff() - 1.0;
  ThresholdGrid g{{lo, empirical_quantile(v, 0.3), empirical_quantile(v, 0.6)}, lo, 10.0};
  const auto all = fit_all(p, g);
  EXPECT_EQ(all.status[0], FitStatus::Degenerate);
  EXPECT_FALSE(all.fits[0].has_value());
  EXPECT_EQ(all.status[1], FitStatus::Ok);
  EXPECT_EQ(all.status[2], FitStatus::Ok);
  // Warm starts only change iteration counts.
  const auto cold = fit_threshold(p, g[2]);
  EXPECT_LT((cold.theta() - all.fits[2]->theta()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Hessian, PseudoInverseMatchesSvdOracle) {
  const auto cases = small_cases(20);
  for (const auto& c : cases) {
    const auto fit = fit_threshold(c.panel, c.y);
    const auto H = hessian(fit, c.panel);
    const MatrixXd Hd = oracle::hessian(c.panel, fit.index.unaryExpr([](double v) { return logistic_d1(v); }));
    const MatrixXd Hp = oracle::pinv_svd(Hd);
    MatrixXd ours(H.dim(), H.dim());
    for (int k = 0; k < H.dim(); ++k) ours.col(k) = H.pinv_apply(VectorXd::Unit(H.dim(), k));
    EXPECT_LT((ours - Hp).cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, Hp.cwiseAbs().maxCoeff()));
  }
}

TEST(Hessian, NullSpaceAndRecovery) {
  const auto p = testutil::random_panel(9, 7, 2, 31, false, 1.0);
  const auto fit = fit_threshold(p, testutil::median_threshold(p));
  const auto H = hessian(fit, p);
  const VectorXd v = H.null_direction();
  EXPECT_LT(H.pinv_apply(v).cwiseAbs().maxCoeff(), 1e-10);
  const MatrixXd Hd = H.dense(p);
  EXPECT_LT((Hd * v).cwiseAbs().maxCoeff(), 1e-12);
  const KeyedRng rng(5);
  VectorXd z(H.dim());
  for (int k = 0; k < H.dim(); ++k) z[k] = rng.normal(0, k);
  z -= (v.dot(z) / v.squaredNorm()) * v;
  EXPECT_LT((H.pinv_apply(Hd * z) - z).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Hessian, CollinearCovariateDiagnosed) {
  auto base = testutil::random_panel(6, 6, 1, 9);
  MatrixXd x(base.n(), 2);
  for (int d = 0; d < base.n(); ++d) {
    x(d, 0) = base.x()(d, 0);
    x(d, 1) = 0.3 * base.sender(d) - 1.1 * base.receiver(d);  // a_i + b_j
  }
  const auto p = DyadPanel::from_indices(base.senders(), base.receivers(), base.y(), x);
  EXPECT_THROW(fit_threshold(p, testutil::median_threshold(p)), SingularSystemError);
}
