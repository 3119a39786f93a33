#pragma once

#include <string>
#include <vector>

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/qk/unified_head.hpp"

namespace accpp {

/// A destination direction p and the source direction q it reads best, both
/// unit norm. `sv` lists the channels p (or q) loads on.
struct SignalPair {
  int layer = 0, head = 0;
  Vector p, q;
  std::vector<int> sv;
};

/// Either a pair or, when the form annihilates the input, nothing: every unit
/// partner then scores zero and none is preferred.
struct PairResult {
  bool degenerate = false;
  SignalPair pair;  // partner side left empty when degenerate
};

inline constexpr double kPairDegenerateRel = 1e-12;

namespace detail {

inline Vector unit_input(const Vector& x, Eigen::Index dim, const char* what) {
  ACCPP_REQUIRE(x.size() == dim, ErrorCode::shape_mismatch,
                std::string(what) + " has length " + std::to_string(x.size()) + ", expected " + std::to_string(dim));
  ACCPP_REQUIRE(x.allFinite(), ErrorCode::non_finite, std::string(what) + " has non-finite entries");
  const double n = x.norm();
  ACCPP_REQUIRE(n > 0.0, ErrorCode::validation, std::string(what) + " is the zero vector");
  return x / n;
}

inline std::vector<int> loaded_channels(const Matrix& basis, const Vector& sigma, const Vector& x) {
  std::vector<int> out;
  const Vector c = basis.transpose() * x;
  for (Eigen::Index k = 0; k < c.size(); ++k)
    if (sigma(k) > kRankCutoff * sigma(0) && std::abs(c(k)) > 1e-9) out.push_back(static_cast<int>(k));
  return out;
}

// q = normalize(B Σ A^T x), degenerate when ‖Σ A^T x‖ is negligible against σ1.
inline PairResult pair_through(const UnifiedHead& h, const Vector& x, const Matrix& A, const Matrix& B, bool from_dst) {
  const Vector u = unit_input(x, A.rows(), from_dst ? "destination signal p" : "source signal q");
  const auto& sig = h.svd.sigma;
  PairResult r;
  r.pair.layer = h.layer;
  r.pair.head = h.head;
  (from_dst ? r.pair.p : r.pair.q) = u;
  r.pair.sv = loaded_channels(A, sig, u);
  const Vector y = B * sig.cwiseProduct(A.transpose() * u);
  const double n = y.norm();
  if (sig.size() == 0 || sig(0) == 0.0 || n <= kPairDegenerateRel * sig(0)) {
    r.degenerate = true;
    return r;
  }
  (from_dst ? r.pair.q : r.pair.p) = y / n;
  return r;
}

}  // namespace detail

/// q* = Ω^T p / ‖Ω^T p‖ with Ω = U Σ V^T. For rope heads p and q are effective
/// (already mapped) vectors.
inline PairResult pair_from_destination(const UnifiedHead& h, const Vector& p) {
  return detail::pair_through(h, p, h.svd.U, h.svd.V, true);
}

/// p* = Ω q / ‖Ω q‖.
inline PairResult pair_from_source(const UnifiedHead& h, const Vector& q) {
  return detail::pair_through(h, q, h.svd.V, h.svd.U, false);
}

}  // namespace accpp
