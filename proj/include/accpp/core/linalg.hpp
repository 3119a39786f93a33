#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "accpp/core/error.hpp"

namespace accpp {

// All engine arithmetic is float64; bundles store float32 and are upcast on load.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Relative cutoff below which a singular value counts as zero.
inline constexpr double kRankCutoff = 1e-12;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Thin SVD of a rank-limited product. U and V are D x R with orthonormal
/// columns, sigma is sorted descending.
struct SvdResult {
  Matrix U;
  Vector sigma;
  Matrix V;

  Eigen::Index rank() const {
    if (sigma.size() == 0 || sigma(0) == 0.0) return 0;
    Eigen::Index r = 0;
    for (Eigen::Index k = 0; k < sigma.size(); ++k)
      if (sigma(k) >= kRankCutoff * sigma(0)) ++r;
    return r;
  }

  Matrix reconstruct() const { return U * sigma.asDiagonal() * V.transpose(); }
};

namespace detail {

// Flip (u_k, v_k) so the largest-magnitude entry of u_k is positive.
inline void canonicalize_signs(Matrix& U, Matrix& V) {
  for (Eigen::Index k = 0; k < U.cols(); ++k) {
    Eigen::Index arg = 0;
    U.col(k).cwiseAbs().maxCoeff(&arg);
    if (U(arg, k) < 0.0) {
      U.col(k) *= -1.0;
      V.col(k) *= -1.0;
    }
  }
}

inline void thin_qr(const Matrix& W, Matrix& Q, Matrix& Rfac) {
  const auto D = W.rows();
  const auto R = W.cols();
  Eigen::HouseholderQR<Matrix> qr(W);
  Q = qr.householderQ() * Matrix::Identity(D, R);
  Rfac = qr.matrixQR().topRows(R).triangularView<Eigen::Upper>();
}

}  // namespace detail

/// SVD of Wq * Wk^T without forming the D x D product: QR both factors, then
/// decompose the R x R core.
inline SvdResult product_svd(const Matrix& Wq, const Matrix& Wk) {
  ACCPP_REQUIRE(Wq.rows() == Wk.rows() && Wq.cols() == Wk.cols(), ErrorCode::validation,
                "product_svd: factor shapes differ");
  ACCPP_REQUIRE(Wq.rows() >= Wq.cols(), ErrorCode::validation, "product_svd: requires D >= R");
  ACCPP_REQUIRE(all_finite(Wq) && all_finite(Wk), ErrorCode::validation,
                "product_svd: non-finite input");

  Matrix Qq, Rq, Qk, Rk;
  detail::thin_qr(Wq, Qq, Rq);
  detail::thin_qr(Wk, Qk, Rk);

  const Matrix core = Rq * Rk.transpose();
  Eigen::JacobiSVD<Matrix> svd(core, Eigen::ComputeFullU | Eigen::ComputeFullV);

  SvdResult out;
  out.U = Qq * svd.matrixU();
  out.V = Qk * svd.matrixV();
  out.sigma = svd.singularValues();
  detail::canonicalize_signs(out.U, out.V);
  return out;
}

/// Thin SVD of a single tall matrix, same sign convention as product_svd.
inline SvdResult thin_svd(const Matrix& W) {
  ACCPP_REQUIRE(all_finite(W), ErrorCode::validation, "thin_svd: non-finite input");
  Eigen::JacobiSVD<Matrix> svd(W, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  detail::canonicalize_signs(out.U, out.V);
  return out;
}

/// Moore-Penrose inverse of a full-column-rank D x R matrix.
inline Matrix pseudoinverse(const Matrix& W) {
  ACCPP_REQUIRE(W.size() > 0, ErrorCode::validation, "pseudoinverse: empty matrix");
  const SvdResult s = thin_svd(W);
  const double smax = s.sigma(0);
  const double smin = s.sigma(s.sigma.size() - 1);
  ACCPP_REQUIRE(smax > 0.0 && smin >= kRankCutoff * smax, ErrorCode::degenerate_rank,
                "pseudoinverse: matrix is rank deficient");
  return s.V * s.sigma.cwiseInverse().asDiagonal() * s.U.transpose();
}

/// sigma_max / sigma_min. Returns +inf when sigma_min falls under the rank cutoff.
inline double condition_number(const Matrix& W) {
  ACCPP_REQUIRE(all_finite(W), ErrorCode::validation, "condition_number: non-finite input");
  ACCPP_REQUIRE(W.size() > 0 && W.cwiseAbs().maxCoeff() > 0.0, ErrorCode::undefined_condition,
                "condition_number: zero matrix");
  Eigen::JacobiSVD<Matrix> svd(W);
  const Vector& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  if (smin < kRankCutoff * smax) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

/// Empirical CDF: right-continuous step function over a fixed sample.
class Ecdf {
 public:
  explicit Ecdf(std::vector<double> samples) : sorted_(std::move(samples)) {
    ACCPP_REQUIRE(!sorted_.empty(), ErrorCode::empty_input, "ecdf: no samples");
    std::sort(sorted_.begin(), sorted_.end());
  }

  double query(double x) const {
    const auto it = std::upper_bound(sorted_.begin(), sorted_.end(), x);
    return static_cast<double>(it - sorted_.begin()) / static_cast<double>(sorted_.size());
  }

  std::span<const double> samples() const { return sorted_; }
  std::size_t size() const { return sorted_.size(); }

  /// Smallest sample value v with query(v) >= p.
  double quantile(double p) const {
    const double clamped = std::clamp(p, 0.0, 1.0);
    auto idx = static_cast<std::size_t>(std::ceil(clamped * static_cast<double>(sorted_.size())));
    idx = std::max<std::size_t>(idx, 1);
    return sorted_[idx - 1];
  }

 private:
  std::vector<double> sorted_;
};

inline Ecdf ecdf_build(std::vector<double> samples) { return Ecdf(std::move(samples)); }

inline double softmax_entry(const Vector& z, Eigen::Index s) {
  const double m = z.maxCoeff();
  return std::exp(z(s) - m) / (z.array() - m).exp().sum();
}

inline Vector softmax(const Vector& z) {
  const double m = z.maxCoeff();
  Vector e = (z.array() - m).exp();
  return e / e.sum();
}

}  // namespace accpp
