#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "vlmaudit/core.hpp"

namespace vlmaudit {

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman's rho on average ranks. Undefined (nullopt) with fewer than two
/// points or when either side is constant.
inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error(ErrorKind::InvalidArgument, "spearman: length mismatch");
  if (x.size() < 2) return std::nullopt;
  auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  auto constant = [](const std::vector<double>& r) {
    return std::all_of(r.begin(), r.end(), [&](double v) { return v == r.front(); });
  };
  if (constant(rx) || constant(ry)) return std::nullopt;
  return pearson(rx, ry);
}

/// Upper tail of the chi-square distribution with `dof` degrees of freedom.
inline double chi2_upper_tail(double x, double dof) {
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(dof / 2.0, x / 2.0);
}

/// Fisher's method: X = -2 sum ln p_i ~ chi2(2N) under the null.
inline double fisher_combined_p(const std::vector<double>& ps) {
  if (ps.empty()) throw Error(ErrorKind::InvalidArgument, "fisher: no p-values");
  // summing in sorted order makes the result independent of item order
  std::vector<double> sorted = ps;
  std::sort(sorted.begin(), sorted.end());
  double x = 0.0;
  for (double p : sorted) {
    if (!(p > 0.0 && p <= 1.0)) throw Error(ErrorKind::InvalidArgument, "fisher: p outside (0, 1]");
    x -= 2.0 * std::log(p);
  }
  return chi2_upper_tail(x, 2.0 * static_cast<double>(ps.size()));
}

/// Pearson chi-square goodness-of-fit p-value against equal cell
/// probabilities.
inline double chi2_uniformity_p(const std::vector<std::size_t>& counts) {
  if (counts.size() < 2) throw Error(ErrorKind::InvalidArgument, "chi2: need at least two cells");
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  if (total == 0.0) throw Error(ErrorKind::InvalidArgument, "chi2: no observations");
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0.0;
  for (auto c : counts) stat += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  return chi2_upper_tail(stat, static_cast<double>(counts.size() - 1));
}

}  // namespace vlmaudit
