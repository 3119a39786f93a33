#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <numeric>
#include <vector>

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/model/component.hpp"
#include "accpp/model/intervention.hpp"
#include "accpp/model/transformer.hpp"
#include "accpp/qk/unified_head.hpp"

namespace accpp {

inline constexpr int kDefaultIgSteps = 64;

struct CandidateIndex {
  ComponentId component;
  int sv = 0;

  friend bool operator==(const CandidateIndex&, const CandidateIndex&) = default;
  friend auto operator<=>(const CandidateIndex& a, const CandidateIndex& b) {
    if (auto c = a.component <=> b.component; c != 0) return c;
    return a.sv <=> b.sv;
  }
};

/// Everything the solver needs about one head on one prompt: the unified
/// form and every upstream component's write mapped to effective space and
/// projected on the channels.
struct HeadContext {
  const ActivationCache* cache = nullptr;
  UnifiedHead uh;
  std::vector<ComponentId> components;  // sorted; includes qk_bias for bias variants
  std::vector<Matrix> eff_dst, eff_src;  // per component, N x D
  std::vector<Matrix> coord_dst;         // per component, N x R: u_k . o~_c^j
  std::vector<Matrix> coord_src;         // per component, N x R: v_k . o~_c^j
  Matrix x_dst, x_src;                   // N x D effective vectors of the full input

  int layer() const { return uh.layer; }
  int head() const { return uh.head; }
  int n_tokens() const { return cache->n_tokens(); }
  int rank_dim() const { return static_cast<int>(uh.svd.sigma.size()); }
};

inline HeadContext make_head_context(const ModelBundle& bundle, const ActivationCache& cache, const UnifiedHead& uh) {
  HeadContext ctx;
  ctx.cache = &cache;
  ctx.uh = uh;
  const int N = cache.n_tokens();
  const int D = uh.d_model();
  auto decomp = attention_input_decomposition(bundle, cache, uh.layer);
  if (uh.bias()) {
    decomp.components.push_back(ComponentId::qk_bias(uh.layer, uh.head));
    decomp.outputs.push_back(Matrix());  // filled below
  }
  std::vector<std::size_t> order(decomp.components.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return decomp.components[i] < decomp.components[j]; });
  ctx.x_dst = Matrix::Zero(N, D);
  ctx.x_src = Matrix::Zero(N, D);
  for (std::size_t i : order) {
    const ComponentId& c = decomp.components[i];
    Matrix ed(N, D), es(N, D);
    for (int j = 0; j < N; ++j) {
      if (c.kind == ComponentKind::qk_bias) {
        ed.row(j) = uh.dst_map(uh.c_d, j).transpose();
        es.row(j) = uh.src_map(uh.c_s, j).transpose();
      } else {
        const Vector o = decomp.outputs[i].row(j).transpose();
        ed.row(j) = uh.dst_map(o, j).transpose();
        es.row(j) = uh.src_map(o, j).transpose();
      }
    }
    ctx.x_dst += ed;
    ctx.x_src += es;
    ctx.coord_dst.push_back(ed * uh.svd.U);
    ctx.coord_src.push_back(es * uh.svd.V);
    ctx.components.push_back(c);
    ctx.eff_dst.push_back(std::move(ed));
    ctx.eff_src.push_back(std::move(es));
  }
  return ctx;
}

inline HeadContext make_head_context(const ModelBundle& bundle, const ActivationCache& cache, int layer, int head) {
  return make_head_context(bundle, cache, build_unified_head(bundle, layer, head));
}

/// Candidate vectors s_c^k. dst: one Q x D block at token d. src: one block
/// per source position j <= d.
struct CandidateSignals {
  Side side = Side::dst;
  int d = 0;
  std::vector<CandidateIndex> index;
  std::vector<Matrix> vectors;  // dst: 1 entry; src: d+1 entries
};

inline std::vector<CandidateIndex> candidate_index(const HeadContext& ctx) {
  std::vector<CandidateIndex> out;
  for (const auto& c : ctx.components)
    for (int k = 0; k < ctx.rank_dim(); ++k) out.push_back({c, k});
  return out;
}

inline Vector candidate_vector(const HeadContext& ctx, Side side, std::size_t comp, int k, int token) {
  if (side == Side::dst) return ctx.uh.svd.U.col(k) * ctx.coord_dst[comp](token, k);
  return ctx.uh.svd.V.col(k) * ctx.coord_src[comp](token, k);
}

inline CandidateSignals candidate_signals(const HeadContext& ctx, Side side, int d) {
  ACCPP_REQUIRE(d >= 0 && d < ctx.n_tokens(), ErrorCode::out_of_range, "destination index out of range");
  CandidateSignals out;
  out.side = side;
  out.d = d;
  out.index = candidate_index(ctx);
  const int R = ctx.rank_dim();
  auto block = [&](int token) {
    Matrix m(static_cast<Eigen::Index>(out.index.size()), ctx.uh.d_model());
    for (std::size_t c = 0; c < ctx.components.size(); ++c)
      for (int k = 0; k < R; ++k)
        m.row(static_cast<Eigen::Index>(c * static_cast<std::size_t>(R) + static_cast<std::size_t>(k))) =
            candidate_vector(ctx, side, c, k, token).transpose();
    return m;
  };
  if (side == Side::dst) {
    out.vectors.push_back(block(d));
  } else {
    for (int j = 0; j <= d; ++j) out.vectors.push_back(block(j));
  }
  return out;
}

/// Rows are candidates (c,k), columns are sources j <= d. The 1/sqrt(R)
/// factor is folded in, so column sums are the pre-softmax logits of row d.
struct ContributionMatrix {
  Side side = Side::dst;
  int d = 0;
  std::vector<CandidateIndex> index;
  Matrix C;  // Q x (d+1)

  Vector column_sums() const { return C.colwise().sum().transpose(); }
  int n_sources() const { return static_cast<int>(C.cols()); }
};

inline ContributionMatrix contribution_matrix(const HeadContext& ctx, Side side, int d) {
  ACCPP_REQUIRE(d >= 0 && d < ctx.n_tokens(), ErrorCode::out_of_range, "destination index out of range");
  const int R = ctx.rank_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(ctx.uh.d_head()));
  const Vector& sigma = ctx.uh.svd.sigma;
  ContributionMatrix out;
  out.side = side;
  out.d = d;
  out.index = candidate_index(ctx);
  out.C.resize(static_cast<Eigen::Index>(out.index.size()), d + 1);
  if (side == Side::dst) {
    // (u_k . o~_c^d) sigma_k (v_k . x~_j)
    const Matrix vx = ctx.x_src.topRows(d + 1) * ctx.uh.svd.V;  // (d+1) x R
    for (std::size_t c = 0; c < ctx.components.size(); ++c)
      for (int k = 0; k < R; ++k)
        out.C.row(static_cast<Eigen::Index>(c * static_cast<std::size_t>(R) + static_cast<std::size_t>(k))) =
            (ctx.coord_dst[c](d, k) * sigma(k) * scale) * vx.col(k).transpose();
  } else {
    // (x~_d . u_k) sigma_k (v_k . o~_c^j)
    const Vector ux = ctx.uh.svd.U.transpose() * ctx.x_dst.row(d).transpose();
    for (std::size_t c = 0; c < ctx.components.size(); ++c)
      for (int k = 0; k < R; ++k)
        out.C.row(static_cast<Eigen::Index>(c * static_cast<std::size_t>(R) + static_cast<std::size_t>(k))) =
            (ux(k) * sigma(k) * scale) * ctx.coord_src[c].col(k).head(d + 1).transpose();
  }
  return out;
}

/// Integrated gradients of softmax_s along z(t) = t * colsum(C), trapezoid
/// rule with `steps` intervals.
inline Vector ig_attributions(const Matrix& C, int s, int steps = kDefaultIgSteps) {
  ACCPP_REQUIRE(s >= 0 && s < C.cols(), ErrorCode::causal_mask, "source index must satisfy s <= d");
  ACCPP_REQUIRE(steps >= 1, ErrorCode::config, "IG needs at least one step");
  const Vector z = C.colwise().sum().transpose();
  Vector ig = Vector::Zero(C.rows());
  for (int m = 0; m <= steps; ++m) {
    const double t = static_cast<double>(m) / steps;
    const double w = (m == 0 || m == steps) ? 0.5 : 1.0;
    const Vector p = softmax(t * z);
    // dp_s/dz_j = p_s (delta_sj - p_j), so the row-i directional derivative is p_s (C_is - C_i . p)
    ig += (w * p(s)) * (C.col(s) - C * p);
  }
  return ig / steps;
}

inline Vector ig_attributions(const ContributionMatrix& cm, int s, int steps = kDefaultIgSteps) {
  return ig_attributions(cm.C, s, steps);
}

struct RemovedSignal {
  CandidateIndex index;
  double ig = 0.0;
  Vector vector;  // residual/effective space; dst at d, src at s
};

struct SignalSet {
  int layer = 0;
  int head = 0;
  int d = 0;
  int s = 0;
  Side side = Side::dst;
  std::vector<RemovedSignal> removed;
  double initial_weight = 0.0;
  double final_weight = 0.0;
  double tau_used = 0.0;
};

/// Remove candidates in descending IG order (ties by index order) until the
/// recomputed weight of source s falls below tau. IG stays fixed throughout;
/// once the positive candidates are exhausted the walk continues into the
/// negative ones, which always terminates because removing everything
/// leaves the uniform weight 1/(d+1).
inline SignalSet greedy_solve(const Matrix& C, const std::vector<CandidateIndex>& index, int s, double tau,
                              const Vector& ig) {
  ACCPP_REQUIRE(tau > 0.0, ErrorCode::config, "tau must be positive");
  const auto Q = C.rows();
  const auto n = C.cols();
  ACCPP_REQUIRE(s >= 0 && s < n, ErrorCode::causal_mask, "source index must satisfy s <= d");
  ACCPP_REQUIRE(ig.size() == Q && static_cast<Eigen::Index>(index.size()) == Q, ErrorCode::shape_mismatch,
                "IG and index must have one entry per row");
  ACCPP_REQUIRE(tau > 1.0 / static_cast<double>(n), ErrorCode::config,
                "tau " + std::to_string(tau) + " is unreachable: uniform weight is " + std::to_string(1.0 / n));

  std::vector<Eigen::Index> order(static_cast<std::size_t>(Q));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    if (ig(a) != ig(b)) return ig(a) > ig(b);
    return index[static_cast<std::size_t>(a)] < index[static_cast<std::size_t>(b)];
  });

  SignalSet out;
  out.s = s;
  out.d = static_cast<int>(n) - 1;
  out.tau_used = tau;
  Vector z = C.colwise().sum().transpose();
  double w = softmax_entry(z, s);
  out.initial_weight = w;
  std::size_t next = 0;
  while (w >= tau && next < order.size()) {
    const Eigen::Index i = order[next++];
    z -= C.row(i).transpose();
    if (next == order.size()) z.setZero();  // drop accumulated rounding
    w = softmax_entry(z, s);
    out.removed.push_back({index[static_cast<std::size_t>(i)], ig(i), Vector()});
  }
  out.final_weight = w;
  return out;
}

inline SignalSet greedy_solve(const ContributionMatrix& cm, int s, double tau, const Vector& ig) {
  auto out = greedy_solve(cm.C, cm.index, s, tau, ig);
  out.side = cm.side;
  return out;
}

inline std::size_t component_slot(const HeadContext& ctx, const ComponentId& c) {
  for (std::size_t i = 0; i < ctx.components.size(); ++i)
    if (ctx.components[i] == c) return i;
  throw Error(ErrorCode::out_of_range, "component " + c.label() + " is not upstream of this head");
}

/// Full ACC++ solve for one attention weight A_ds.
inline SignalSet solve_pair(const HeadContext& ctx, int d, int s, Side side, double tau,
                            int steps = kDefaultIgSteps) {
  ACCPP_REQUIRE(d >= 0 && d < ctx.n_tokens(), ErrorCode::out_of_range, "destination index out of range");
  ACCPP_REQUIRE(s >= 0 && s <= d, ErrorCode::causal_mask, "source index must satisfy s <= d");
  const auto cm = contribution_matrix(ctx, side, d);
  const Vector ig = ig_attributions(cm, s, steps);
  SignalSet out = greedy_solve(cm, s, tau, ig);
  out.layer = ctx.layer();
  out.head = ctx.head();
  out.d = d;
  for (auto& r : out.removed)
    r.vector = candidate_vector(ctx, side, component_slot(ctx, r.index.component), r.index.sv,
                                side == Side::dst ? d : s);
  return out;
}

/// Intervention that removes a set of candidates from row d.
inline Intervention make_intervention(const HeadContext& ctx, Side side, int d,
                                      const std::vector<CandidateIndex>& removed) {
  Intervention iv;
  iv.side = side;
  iv.layer = ctx.layer();
  iv.head = ctx.head();
  iv.d = d;
  iv.deltas = Matrix::Zero(d + 1, ctx.uh.d_model());
  for (const auto& r : removed) {
    iv.removed.emplace_back(r.component, r.sv);
    const std::size_t slot = component_slot(ctx, r.component);
    if (side == Side::dst) {
      iv.deltas.row(d) += candidate_vector(ctx, side, slot, r.sv, d).transpose();
    } else {
      for (int j = 0; j <= d; ++j) iv.deltas.row(j) += candidate_vector(ctx, side, slot, r.sv, j).transpose();
    }
  }
  return iv;
}

inline Intervention make_intervention(const HeadContext& ctx, const SignalSet& set) {
  std::vector<CandidateIndex> idx;
  for (const auto& r : set.removed) idx.push_back(r.index);
  return make_intervention(ctx, set.side, set.d, idx);
}

}  // namespace accpp
