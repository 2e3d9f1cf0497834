#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fedr/quantile_effects.hpp"
#include "test_util.hpp"

using namespace fedr;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

VectorXd random_cdf(std::mt19937_64& g, int G) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(G));
  for (double& x : v) x = u(g);
  std::sort(v.begin(), v.end());
  return Eigen::Map<VectorXd>(v.data(), G);
}

Band band_of(const std::vector<double>& grid, const VectorXd& lo, const VectorXd& c, const VectorXd& hi) {
  Band b;
  b.grid = grid;
  b.center = c;
  b.lower = lo;
  b.upper = hi;
  b.se = VectorXd::Ones(c.size());
  b.label = "F";
  return b;
}

}  // namespace

TEST(Quantile, LeftInverseExamples) {
  const std::vector<double> grid{1, 2, 3, 4};
  const VectorXd F = vec({0.1, 0.4, 0.4, 0.9});
  bool capped = true;
  EXPECT_EQ(left_inverse(grid, F, 0.05, 9.0, &capped), 1.0);
  EXPECT_FALSE(capped);
  EXPECT_EQ(left_inverse(grid, F, 0.1, 9.0), 1.0);
  EXPECT_EQ(left_inverse(grid, F, 0.3, 9.0), 2.0);
  EXPECT_EQ(left_inverse(grid, F, 0.4, 9.0), 2.0);
  EXPECT_EQ(left_inverse(grid, F, 0.41, 9.0), 4.0);
  EXPECT_EQ(left_inverse(grid, F, 0.95, 9.0, &capped), 9.0);
  EXPECT_TRUE(capped);
}

TEST(Quantile, InvertedBandsContainQuantilesOfContainedCdfs) {
  std::mt19937_64 g(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> grid;
  for (int i = 0; i < 15; ++i) grid.push_back(0.5 * i - 2.0);
  std::vector<double> taus;
  for (int t = 1; t < 20; ++t) taus.push_back(0.05 * t);
  for (int rep = 0; rep < 200; ++rep) {
    // Three ordered CDFs L <= F <= U built from sorted uniforms.
    const VectorXd F = random_cdf(g, 15);
    VectorXd L = F, U = F;
    for (int i = 0; i < 15; ++i) {
      L[i] = std::max(0.0, F[i] - 0.2 * u(g));
      U[i] = std::min(1.0, F[i] + 0.2 * u(g));
    }
    L = shape_restrict(L);
    U = shape_restrict(U);
    for (int i = 0; i < 15; ++i) {
      ASSERT_LE(L[i], F[i]);
      ASSERT_GE(U[i], F[i]);
    }
    const auto q = invert_band(band_of(grid, L, F, U), taus, 7.0);
    for (std::size_t t = 0; t < taus.size(); ++t) {
      const double qf = left_inverse(grid, F, taus[t], 7.0);
      EXPECT_LE(q.lower[static_cast<Eigen::Index>(t)], qf);
      EXPECT_GE(q.upper[static_cast<Eigen::Index>(t)], qf);
      EXPECT_EQ(q.center[static_cast<Eigen::Index>(t)], qf);
    }
  }
}

TEST(Quantile, DifferenceBandsContainDifferences) {
  std::mt19937_64 g(77);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    QuantileBand a, b;
    a.tau = b.tau = {0.25, 0.5, 0.75};
    a.center.resize(3), a.lower.resize(3), a.upper.resize(3);
    b.center.resize(3), b.lower.resize(3), b.upper.resize(3);
    a.capped = b.capped = {false, false, false};
    VectorXd q1(3), q0(3);
    for (int t = 0; t < 3; ++t) {
      q1[t] = u(g);
      q0[t] = u(g);
      a.lower[t] = q1[t] - std::abs(u(g));
      a.upper[t] = q1[t] + std::abs(u(g));
      b.lower[t] = q0[t] - std::abs(u(g));
      b.upper[t] = q0[t] + std::abs(u(g));
      a.center[t] = q1[t];
      b.center[t] = q0[t];
    }
    const auto d = qe_band(a, b);
    for (int t = 0; t < 3; ++t) {
      EXPECT_LE(d.lower[t], q1[t] - q0[t]);
      EXPECT_GE(d.upper[t], q1[t] - q0[t]);
      EXPECT_NEAR(d.upper[t] - d.lower[t], (a.upper[t] - a.lower[t]) + (b.upper[t] - b.lower[t]), 1e-14);
    }
  }
}

TEST(Quantile, InversionRejectsNonDistributionBands) {
  const std::vector<double> grid{0, 1, 2};
  const VectorXd ok = vec({0.1, 0.5, 1.0});
  EXPECT_THROW(invert_band(band_of(grid, vec({-0.1, 0.4, 0.9}), ok, ok), {0.5}, 2.0), ConfigError);
  EXPECT_THROW(invert_band(band_of(grid, ok, ok, vec({0.3, 0.2, 1.0})), {0.5}, 2.0), ConfigError);
  EXPECT_THROW(invert_band(band_of(grid, ok, ok, ok), {1.0}, 2.0), ConfigError);
}

TEST(Quantile, CappedIndicesAreTrimmed) {
  const std::vector<double> grid{0, 1, 2};
  const auto q = invert_band(band_of(grid, vec({0.0, 0.3, 0.6}), vec({0.2, 0.5, 0.8}), vec({0.4, 0.7, 1.0})),
                             {0.1, 0.5, 0.7}, 2.0);
  EXPECT_EQ(q.capped, (std::vector<bool>{false, false, true}));
  std::vector<double> trimmed;
  EXPECT_EQ(trim_taus({q}, &trimmed), (std::vector<double>{0.1, 0.5}));
  EXPECT_EQ(trimmed, (std::vector<double>{0.7}));
}

TEST(Quantile, StepMeanExamples) {
  EXPECT_NEAR(step_mean({0, 1, 2}, vec({0.5, 0.5, 1.0})), 1.0, 1e-15);
  EXPECT_NEAR(step_mean({-2, -1, 0, 1}, vec({0.25, 0.5, 0.75, 1.0})), -0.5, 1e-15);
  EXPECT_NEAR(step_mean({3, 5}, vec({0.5, 1.0})), 4.0, 1e-15);
  EXPECT_NEAR(step_mean({-5, -3}, vec({0.5, 1.0})), -4.0, 1e-15);
}

TEST(Quantile, StepMeanIsTheMeanOfTheGridDistribution) {
  std::mt19937_64 g(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> grid;
    double y = -3.0 * u(g);
    for (int i = 0; i < 12; ++i) grid.push_back(y += 0.1 + u(g));
    VectorXd p(12);
    for (int i = 0; i < 12; ++i) p[i] = u(g);
    p /= p.sum();
    VectorXd F(12);
    double acc = 0.0, mean = 0.0;
    for (int i = 0; i < 12; ++i) {
      acc += p[i];
      F[i] = acc;
      mean += p[i] * grid[static_cast<std::size_t>(i)];
    }
    F[11] = 1.0;
    EXPECT_NEAR(step_mean(grid, F), mean, 1e-12);
  }
}

TEST(Quantile, AverageEffect) {
  const auto p = testutil::random_panel(10, 10, 1, 3);
  const std::vector<double> grid{0, 1, 2, 3};
  const VectorXd F0 = vec({0.4, 0.7, 0.9, 1.0}), F1 = vec({0.2, 0.5, 0.8, 0.999});
  std::vector<VectorXd> phi0, phi1;
  for (int g = 0; g < 4; ++g) {
    VectorXd a(p.n()), b(p.n());
    for (int d = 0; d < p.n(); ++d) {
      a[d] = std::sin(0.3 * d + g);
      b[d] = std::cos(0.7 * d - g);
    }
    phi0.push_back(a);
    phi1.push_back(b);
  }
  const auto ae = average_effect(p, grid, F0, F1, phi0, phi1, ClusterMode::None, 0.95);
  EXPECT_NEAR(ae.mu0, step_mean(grid, F0), 0.0);
  EXPECT_NEAR(ae.delta, ae.mu1 - ae.mu0, 1e-15);
  EXPECT_NEAR(ae.delta, (0.4 - 0.2) + (0.7 - 0.5) + (0.9 - 0.8), 1e-12);
  VectorXd ref = VectorXd::Zero(p.n());
  for (int g = 0; g < 3; ++g) ref -= phi1[g] - phi0[g];
  EXPECT_NEAR(ae.se, ref.norm() / p.n(), 1e-14);
  EXPECT_FALSE(ae.bootstrap);
  EXPECT_NEAR(ae.upper - ae.delta, 1.959963984540054 * ae.se, 1e-9);
  EXPECT_FALSE(ae.support_incomplete);
  const auto flagged = average_effect(p, grid, F0, vec({0.2, 0.5, 0.8, 0.99}), phi0, phi1, ClusterMode::None, 0.95);
  EXPECT_TRUE(flagged.support_incomplete);
  const Multipliers m(p, 4, ClusterMode::None);
  const auto boot = average_effect(p, grid, F0, F1, phi0, phi1, ClusterMode::None, 0.95, &m, 3000);
  EXPECT_TRUE(boot.bootstrap);
  EXPECT_NEAR(boot.critical_value, 1.96, 0.2);
}
