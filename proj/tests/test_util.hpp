#pragma once

// Random small panels for tests.

#include <cmath>
#include <cstdint>
#include <vector>

#include "fedr/logistic.hpp"
#include "fedr/panel.hpp"
#include "fedr/rng.hpp"

namespace fedr::testutil {

// Complete I x J panel (optionally without the diagonal) with `dx` covariates.
// Column 0 is continuous; column 1 (if present) is binary. Outcomes follow a
// logistic location model so that mid-range thresholds are non-degenerate.
inline DyadPanel random_panel(int I, int J, int dx, std::uint64_t seed, bool drop_diagonal = false,
                              double effect_scale = 0.5) {
  const KeyedRng rng(seed, 99);
  std::vector<int> s, r;
  std::vector<double> ys;
  std::vector<std::vector<double>> xs;
  VectorXd a(I), c(J);
  for (int i = 0; i < I; ++i) a[i] = effect_scale * rng.normal(1, i);
  for (int j = 0; j < J; ++j) c[j] = effect_scale * rng.normal(2, j);
  for (int i = 0; i < I; ++i)
    for (int j = 0; j < J; ++j) {
      if (drop_diagonal && i == j) continue;
      const std::uint64_t key = KeyedRng::pair_key(i, j);
      std::vector<double> xr;
      for (int k = 0; k < dx; ++k) xr.push_back(k == 1 ? (rng.uniform(3 + k, key) < 0.4 ? 1.0 : 0.0) : rng.normal(3 + k, key));
      double idx = a[i] + c[j];
      for (int k = 0; k < dx; ++k) idx += 0.5 * xr[k];
      ys.push_back(idx + logistic_quantile(rng.uniform(10, key)));
      s.push_back(i);
      r.push_back(j);
      xs.push_back(std::move(xr));
    }
  MatrixXd x(static_cast<Eigen::Index>(ys.size()), dx);
  for (std::size_t d = 0; d < ys.size(); ++d)
    for (int k = 0; k < dx; ++k) x(static_cast<Eigen::Index>(d), k) = xs[d][k];
  VectorXd y = Eigen::Map<VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size()));
  return DyadPanel::from_indices(std::move(s), std::move(r), std::move(y), std::move(x));
}

// A threshold near the sample median.
inline double median_threshold(const DyadPanel& p) {
  std::vector<double> v(p.y().data(), p.y().data() + p.n());
  return empirical_quantile(v, 0.5);
}

}  // namespace fedr::testutil
