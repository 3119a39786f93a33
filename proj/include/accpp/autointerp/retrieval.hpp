#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "accpp/autointerp/corpus.hpp"
#include "accpp/core/error.hpp"
#include "accpp/pairing/pairing.hpp"
#include "accpp/qk/unified_head.hpp"

namespace accpp {

struct ScoredContext {
  int chunk = 0;
  int d = 0, s = 0;  // s <= d, positions within the chunk
  double score = 0.0;
  std::string text;  // rendered with markers

  auto key() const { return std::make_tuple(chunk, d, s); }
};

/// Wraps the destination in << >> and the source in [[ ]]; one token that is
/// both becomes <<[[tok]]>>.
inline std::string render_context(const std::vector<std::string>& tokens, int d, int s) {
  ACCPP_REQUIRE(s >= 0 && s <= d && d < static_cast<int>(tokens.size()), ErrorCode::causal_mask,
                "render needs 0 <= s <= d < length");
  std::string out;
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    const auto& tok = tokens[static_cast<std::size_t>(t)];
    if (t == d && t == s) out += "<<[[" + tok + "]]>>";
    else if (t == d) out += "<<" + tok + ">>";
    else if (t == s) out += "[[" + tok + "]]";
    else out += tok;
  }
  return out;
}

namespace detail {

// Effective-vector projections a_t = x̃_t·p (dst) and b_t = x̃_t·q (src) for one chunk.
inline std::pair<Vector, Vector> chunk_projections(const CorpusStore& store, const UnifiedHead& head, int chunk,
                                                   const Vector& p, const Vector& q) {
  const Matrix X = store.chunk_residuals(head.layer, chunk);
  Vector a(kChunkLen), b(kChunkLen);
  for (int t = 0; t < kChunkLen; ++t) {
    const Vector x = X.row(t).transpose();
    a(t) = head.dst_effective(x, t).dot(p);
    b(t) = head.src_effective(x, t).dot(q);
  }
  return {a, b};
}

inline bool ranks_before(const ScoredContext& x, const ScoredContext& y) {
  if (x.score != y.score) return x.score > y.score;
  return x.key() < y.key();
}

}  // namespace detail

/// score(d, s) = (x̃_d·p)(q·x̃_s) over every causal pair in the store, best first;
/// ties go to the smaller (chunk, d, s).
inline std::vector<ScoredContext> score_contexts(const CorpusStore& store, const UnifiedHead& head, const Vector& p,
                                                 const Vector& q, std::size_t top_k = 40) {
  ACCPP_REQUIRE(store.has_layer(head.layer), ErrorCode::missing_layer,
                "corpus store has no residuals for layer " + std::to_string(head.layer));
  ACCPP_REQUIRE(p.size() == store.d_model && q.size() == store.d_model, ErrorCode::shape_mismatch,
                "signal pair width differs from the corpus");
  std::vector<ScoredContext> all;
  all.reserve(store.size() * kChunkLen * (kChunkLen + 1) / 2);
  for (int c = 0; c < static_cast<int>(store.size()); ++c) {
    const auto [a, b] = detail::chunk_projections(store, head, c, p, q);
    for (int d = 0; d < kChunkLen; ++d)
      for (int s = 0; s <= d; ++s) all.push_back({c, d, s, a(d) * b(s), {}});
  }
  const auto k = std::min(top_k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), detail::ranks_before);
  all.resize(k);
  for (auto& sc : all)
    if (!store.chunks[static_cast<std::size_t>(sc.chunk)].tokens.empty())
      sc.text = render_context(store.chunks[static_cast<std::size_t>(sc.chunk)].tokens, sc.d, sc.s);
  return all;
}

inline std::vector<ScoredContext> score_contexts(const CorpusStore& store, const UnifiedHead& head,
                                                 const SignalPair& pair, std::size_t top_k = 40) {
  return score_contexts(store, head, pair.p, pair.q, top_k);
}

/// Uniform causal (chunk, d, s) triples, distinct and outside `exclude`.
inline std::vector<ScoredContext> sample_random_contexts(const CorpusStore& store, const UnifiedHead& head,
                                                         const Vector& p, const Vector& q,
                                                         const std::vector<ScoredContext>& exclude, std::size_t n,
                                                         std::uint64_t seed) {
  constexpr std::size_t per_chunk = kChunkLen * (kChunkLen + 1) / 2;
  const std::size_t total = store.size() * per_chunk;
  std::set<std::tuple<int, int, int>> taken;
  for (const auto& e : exclude) taken.insert(e.key());
  ACCPP_REQUIRE(total >= taken.size() + n, ErrorCode::empty_input, "corpus too small for the random controls");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<ScoredContext> out;
  while (out.size() < n) {
    std::size_t r = pick(rng);
    const int c = static_cast<int>(r / per_chunk);
    r %= per_chunk;
    // r indexes the lower triangle row by row
    int d = 0;
    while (static_cast<std::size_t>((d + 1) * (d + 2) / 2) <= r) ++d;
    const int s = static_cast<int>(r) - d * (d + 1) / 2;
    if (!taken.insert({c, d, s}).second) continue;
    const auto [a, b] = detail::chunk_projections(store, head, c, p, q);
    ScoredContext sc{c, d, s, a(d) * b(s), {}};
    if (!store.chunks[static_cast<std::size_t>(c)].tokens.empty())
      sc.text = render_context(store.chunks[static_cast<std::size_t>(c)].tokens, d, s);
    out.push_back(std::move(sc));
  }
  return out;
}

}  // namespace accpp
