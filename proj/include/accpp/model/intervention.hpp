#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/model/component.hpp"
#include "accpp/model/transformer.hpp"
#include "accpp/qk/unified_head.hpp"

namespace accpp {

enum class Side { dst, src };

inline const char* to_string(Side s) { return s == Side::dst ? "dst" : "src"; }
inline Side side_from_string(const std::string& s) {
  if (s == "dst") return Side::dst;
  if (s == "src") return Side::src;
  throw Error(ErrorCode::parse, "unknown side '" + s + "'");
}

/// Removal of selected signals from one head's attention row d. Deltas are
/// in effective-vector space: row d only for dst, rows 0..d for src.
struct Intervention {
  Side side = Side::dst;
  int layer = 0;
  int head = 0;
  int d = 0;
  std::vector<std::pair<ComponentId, int>> removed;
  Matrix deltas;  // (d+1) x D
};

struct InterventionResult {
  Vector row;     // new A_d, length d+1
  Matrix logits;  // N x V
};

/// New attention row for the intervention, without the downstream pass.
inline Vector intervened_row(const ActivationCache& cache, const UnifiedHead& uh, const Intervention& iv) {
  const int N = cache.n_tokens();
  const int d = iv.d;
  ACCPP_REQUIRE(d >= 0 && d < N, ErrorCode::out_of_range, "intervention row out of range");
  ACCPP_REQUIRE(iv.deltas.rows() == d + 1 && iv.deltas.cols() == uh.d_model(), ErrorCode::shape_mismatch,
                "intervention deltas must be (d+1) x D");
  std::vector<int> sources(static_cast<std::size_t>(d + 1));
  for (int j = 0; j <= d; ++j) sources[static_cast<std::size_t>(j)] = j;
  auto eff = effective_vectors(cache, uh, d, sources);
  Vector xd = eff.x_dst;
  if (iv.side == Side::dst) xd -= iv.deltas.row(d).transpose();
  Vector z(d + 1);
  for (int j = 0; j <= d; ++j) {
    Vector xs = eff.x_src[static_cast<std::size_t>(j)];
    if (iv.side == Side::src) xs -= iv.deltas.row(j).transpose();
    z(j) = uh.score(xd, xs);
  }
  return softmax(z / std::sqrt(static_cast<double>(uh.d_head())));
}

inline InterventionResult apply_intervention(const ModelBundle& bundle, const ActivationCache& cache,
                                             const UnifiedHead& uh, const Intervention& iv) {
  ACCPP_REQUIRE(iv.layer >= 0 && iv.layer < bundle.arch.n_layers && iv.head >= 0 && iv.head < bundle.arch.n_heads,
                ErrorCode::out_of_range, "intervention layer/head out of range");
  ACCPP_REQUIRE(uh.layer == iv.layer && uh.head == iv.head, ErrorCode::validation,
                "unified head does not match intervention");
  InterventionResult out;
  out.row = intervened_row(cache, uh, iv);
  AttentionOverride ov{iv.layer, iv.head, iv.d, out.row};
  out.logits = forward(bundle, cache.token_ids, &ov).logits;
  return out;
}

inline InterventionResult apply_intervention(const ModelBundle& bundle, const ActivationCache& cache,
                                             const Intervention& iv) {
  return apply_intervention(bundle, cache, build_unified_head(bundle, iv.layer, iv.head), iv);
}

}  // namespace accpp
