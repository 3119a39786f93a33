#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <utility>
#include <vector>

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/model/bundle.hpp"
#include "accpp/model/transformer.hpp"

namespace accpp {

struct Channel {
  int k = 0;
  Vector u;
  double sigma = 0.0;
  Vector v;
};

/// One head's QK circuit as a pure bilinear form on effective vectors:
///   score(d, s) = x~_d^T Omega x~_s
/// where x~_d = M_d^T (x_d + c_d) and x~_s = M_s (x_s + c_s). Without RoPE the
/// M maps are the identity. Omega is kept factored as U diag(sigma) V^T.
class UnifiedHead {
 public:
  using RopePair = std::pair<Matrix, Matrix>;

  int layer = 0;
  int head = 0;
  Architecture arch;
  Matrix W_Q, W_K;      // D x R
  Vector b_Q, b_K;      // R, zero without bias
  Vector c_d, c_s;      // D, zero without bias
  Matrix Q_pinv_T;      // (W_Q^+)^T, D x R
  Matrix K_pinv_T;      // (W_K^+)^T = (W_K^T)^+, D x R
  SvdResult svd;

  int d_model() const { return static_cast<int>(W_Q.rows()); }
  int d_head() const { return static_cast<int>(W_Q.cols()); }
  bool rope() const { return has_rope(arch.variant); }
  bool bias() const { return has_bias(arch.variant); }

  Channel channel(int k) const {
    ACCPP_REQUIRE(k >= 0 && k < svd.sigma.size(), ErrorCode::out_of_range, "channel index out of range");
    return {k, svd.U.col(k), svd.sigma(k), svd.V.col(k)};
  }

  /// Dense Omega. Only for tests and small D.
  Matrix omega() const { return W_Q * W_K.transpose(); }

  /// M_d^T y for a destination-side residual-space vector y at position `pos`.
  Vector dst_map(const Vector& y, int pos) const {
    if (!rope()) return y;
    const Matrix rot = rope_rotation(arch, pos);
    Vector q = W_Q.transpose() * y;                      // R
    Vector q_rot = rot.transpose() * q;                  // (q^T R)^T
    return Q_pinv_T * q_rot;
  }

  /// M_s y for a source-side vector at position `pos`.
  Vector src_map(const Vector& y, int pos) const {
    if (!rope()) return y;
    const Matrix rot = rope_rotation(arch, pos);
    Vector k = W_K.transpose() * y;
    Vector k_rot = rot.transpose() * k;
    return K_pinv_T * k_rot;
  }

  Vector dst_effective(const Vector& x, int pos) const { return dst_map(bias() ? Vector(x + c_d) : x, pos); }
  Vector src_effective(const Vector& x, int pos) const { return src_map(bias() ? Vector(x + c_s) : x, pos); }

  /// Bilinear score on effective vectors via the channels.
  double score(const Vector& xd_eff, const Vector& xs_eff) const {
    const Vector a = svd.U.transpose() * xd_eff;
    const Vector b = svd.V.transpose() * xs_eff;
    return (a.array() * svd.sigma.array() * b.array()).sum();
  }

  double unified_score(const Vector& x_d, int d, const Vector& x_s, int s) const {
    return score(dst_effective(x_d, d), src_effective(x_s, s));
  }

  /// The variant's own formula: rotated (x W_Q + b_Q) . rotated (x W_K + b_K).
  double native_score(const Vector& x_d, int d, const Vector& x_s, int s) const {
    Vector q = W_Q.transpose() * x_d;
    Vector k = W_K.transpose() * x_s;
    if (bias()) {
      q += b_Q;
      k += b_K;
    }
    if (rope()) {
      q = rope_rotation(arch, d).transpose() * q;
      k = rope_rotation(arch, s).transpose() * k;
    }
    return q.dot(k);
  }

  /// Explicit (M_d, M_s) at one position, memoized.
  const RopePair& rope_operators(int pos) const {
    ACCPP_REQUIRE(rope(), ErrorCode::not_rope, "rope_operators called on a head without rotary embedding");
    ACCPP_REQUIRE(pos >= 0, ErrorCode::out_of_range, "negative position");
    {
      std::shared_lock lock(memo_->mu);
      auto it = memo_->ops.find(pos);
      if (it != memo_->ops.end()) return *it->second;
    }
    const Matrix rot = rope_rotation(arch, pos);
    auto ops = std::make_unique<RopePair>(W_Q * rot * Q_pinv_T.transpose(),
                                          K_pinv_T * rot.transpose() * W_K.transpose());
    std::unique_lock lock(memo_->mu);
    auto [it, inserted] = memo_->ops.emplace(pos, std::move(ops));
    return *it->second;
  }

 private:
  struct Memo {
    std::shared_mutex mu;
    std::map<int, std::unique_ptr<RopePair>> ops;
  };
  std::shared_ptr<Memo> memo_ = std::make_shared<Memo>();
};

/// Build the unified form for one head. Heads flagged ill-conditioned by
/// validate_bundle are refused unless `allow_flagged` is set.
inline UnifiedHead build_unified_head(const ModelBundle& bundle, int layer, int head, bool allow_flagged = false) {
  const auto& w = bundle.head(layer, head);
  const auto& a = bundle.arch;
  if (!allow_flagged) {
    const auto diag = bundle.diagnostics.heads.empty() ? validate_bundle(bundle) : bundle.diagnostics;
    const auto& hd = diag.at(layer, head, a.n_heads);
    ACCPP_REQUIRE(!hd.unsupported, ErrorCode::unsupported_head,
                  "head " + std::to_string(layer) + "." + std::to_string(head) + " is ill-conditioned (kappa W_Q " +
                      std::to_string(hd.cond_W_Q) + ", W_K^T " + std::to_string(hd.cond_W_K_T) + ")");
  }
  UnifiedHead u;
  u.layer = layer;
  u.head = head;
  u.arch = a;
  u.W_Q = w.W_Q;
  u.W_K = w.W_K;
  const int D = a.d_model, R = a.d_head;
  u.svd = product_svd(w.W_Q, w.W_K);
  try {
    u.Q_pinv_T = pseudoinverse(w.W_Q).transpose();
    u.K_pinv_T = pseudoinverse(w.W_K).transpose();
  } catch (const Error& e) {
    // Plain heads never need the inverses; the others cannot be unified.
    if (has_bias(a.variant) || has_rope(a.variant))
      throw Error(ErrorCode::unsupported_head, std::string("head cannot be unified: ") + e.what());
    u.Q_pinv_T = Matrix::Zero(D, R);
    u.K_pinv_T = Matrix::Zero(D, R);
  }
  if (has_bias(a.variant)) {
    u.b_Q = w.b_Q;
    u.b_K = w.b_K;
    u.c_d = u.Q_pinv_T * w.b_Q;
    u.c_s = u.K_pinv_T * w.b_K;
  } else {
    u.b_Q = Vector::Zero(R);
    u.b_K = Vector::Zero(R);
    u.c_d = Vector::Zero(D);
    u.c_s = Vector::Zero(D);
  }
  return u;
}

struct EffectiveVectors {
  Vector x_dst;        // x~_d
  std::vector<Vector> x_src;  // x~_s for each requested source
};

/// Effective vectors for destination d and the given sources, read from the
/// head's attention input in the cache.
inline EffectiveVectors effective_vectors(const ActivationCache& cache, const UnifiedHead& head, int d,
                                          const std::vector<int>& sources) {
  const int N = cache.n_tokens();
  ACCPP_REQUIRE(d >= 0 && d < N, ErrorCode::out_of_range, "destination index out of range");
  const Matrix& X = cache.attn_input.at(static_cast<std::size_t>(head.layer));
  EffectiveVectors out;
  out.x_dst = head.dst_effective(X.row(d).transpose(), d);
  for (int s : sources) {
    ACCPP_REQUIRE(s >= 0 && s < N, ErrorCode::out_of_range, "source index out of range");
    out.x_src.push_back(head.src_effective(X.row(s).transpose(), s));
  }
  return out;
}

}  // namespace accpp
