#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "accpp/core/error.hpp"

namespace accpp {

namespace detail {

inline long double log_choose(long long n, long long k) {
  return std::lgamma(static_cast<long double>(n + 1)) - std::lgamma(static_cast<long double>(k + 1)) -
         std::lgamma(static_cast<long double>(n - k + 1));
}

}  // namespace detail

/// One-sided Fisher exact test on
///            accepted  rejected
///   top         a         b
///   random      c         d
/// P(X >= a) for X hypergeometric with all margins fixed.
inline double fisher_one_sided(long long a, long long b, long long c, long long d) {
  ACCPP_REQUIRE(a >= 0 && b >= 0 && c >= 0 && d >= 0, ErrorCode::validation, "table counts must be nonnegative");
  const long long n_top = a + b, accepted = a + c, N = a + b + c + d;
  if (N == 0) return 1.0;
  const long long hi = std::min(n_top, accepted);
  const long double denom = detail::log_choose(N, n_top);
  long double p = 0.0L;
  for (long long x = a; x <= hi; ++x)
    p += std::exp(detail::log_choose(accepted, x) + detail::log_choose(N - accepted, n_top - x) - denom);
  return static_cast<double>(std::min(p, 1.0L));
}

struct BhGroup {
  std::size_t total = 0, rejected = 0;
  double fraction = 0.0;
};

struct BhResult {
  std::vector<bool> reject;
  std::map<std::string, BhGroup> groups;
  double fraction = 0.0;  // overall rejected / total
};

/// Benjamini-Hochberg at level q, applied separately within each group label.
/// An empty `groups` puts everything in one group "all".
inline BhResult bh_fdr(const std::vector<double>& p, double q = 0.05, const std::vector<std::string>& groups = {}) {
  ACCPP_REQUIRE(q > 0.0 && q <= 1.0, ErrorCode::config, "FDR level must be in (0, 1]");
  ACCPP_REQUIRE(groups.empty() || groups.size() == p.size(), ErrorCode::shape_mismatch,
                "group labels must match the p-values");
  for (double v : p)
    ACCPP_REQUIRE(v >= 0.0 && v <= 1.0, ErrorCode::out_of_range, "p-value " + std::to_string(v) + " outside [0, 1]");
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < p.size(); ++i) members[groups.empty() ? "all" : groups[i]].push_back(i);
  BhResult r;
  r.reject.assign(p.size(), false);
  std::size_t rejected_all = 0;
  for (auto& [name, idx] : members) {
    std::stable_sort(idx.begin(), idx.end(), [&p](std::size_t x, std::size_t y) { return p[x] < p[y]; });
    const auto m = idx.size();
    std::size_t k = 0;  // largest rank i with p_(i) <= i q / m
    for (std::size_t i = 1; i <= m; ++i)
      if (p[idx[i - 1]] <= static_cast<double>(i) * q / static_cast<double>(m)) k = i;
    for (std::size_t i = 0; i < k; ++i) r.reject[idx[i]] = true;
    r.groups[name] = {m, k, static_cast<double>(k) / static_cast<double>(m)};
    rejected_all += k;
  }
  r.fraction = p.empty() ? 0.0 : static_cast<double>(rejected_all) / static_cast<double>(p.size());
  return r;
}

}  // namespace accpp
