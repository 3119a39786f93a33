#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "accpp/core/error.hpp"
#include "accpp/trace/graph.hpp"

namespace accpp {

enum class Granularity { node, edge, edge_sv };

inline const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::node: return "node";
    case Granularity::edge: return "edge";
    case Granularity::edge_sv: return "edge_sv";
  }
  return "?";
}

inline Granularity granularity_from_string(const std::string& s) {
  if (s == "node") return Granularity::node;
  if (s == "edge") return Granularity::edge;
  if (s == "edge_sv") return Granularity::edge_sv;
  throw Error(ErrorCode::config, "unknown granularity '" + s + "'");
}

/// Sparse binary vector over heads and MLPs (node), upstream->downstream
/// pairs (edge), or those pairs with a channel index (edge_sv). Tokens and
/// side never enter a key.
struct ComponentVector {
  Granularity granularity = Granularity::node;
  std::set<std::string> keys;
};

inline bool counted_component(const ComponentId& c) { return c.is_head() || c.is_mlp(); }

inline std::string edge_key(const ComponentId& up, const ComponentId& down) { return up.label() + ">" + down.label(); }

inline ComponentVector component_vector(const CircuitGraph& g, Granularity gran) {
  ComponentVector v{gran, {}};
  if (gran == Granularity::node) {
    for (const auto& n : g.nodes)
      if (counted_component(n.ref.component)) v.keys.insert(n.ref.component.label());
    return v;
  }
  for (const auto& e : g.edges) {
    if (!counted_component(e.upstream.component)) continue;
    const auto key = edge_key(e.upstream.component, e.downstream.component);
    if (gran == Granularity::edge) {
      v.keys.insert(key);
    } else {
      for (int k : e.sv) v.keys.insert(key + "#" + std::to_string(k));
    }
  }
  return v;
}

/// Every possible node key for an L-layer, H-head model.
inline std::vector<std::string> node_vocabulary(int L, int H) {
  std::vector<std::string> out;
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) out.push_back(ComponentId::attn_head(l, h).label());
    out.push_back(ComponentId::mlp(l).label());
  }
  return out;
}

/// Every possible edge key: a head or MLP feeding a head in a later layer.
inline std::vector<std::string> edge_vocabulary(int L, int H) {
  std::vector<std::string> out;
  for (int ld = 1; ld < L; ++ld)
    for (int hd = 0; hd < H; ++hd)
      for (int lu = 0; lu < ld; ++lu) {
        for (int hu = 0; hu < H; ++hu)
          out.push_back(edge_key(ComponentId::attn_head(lu, hu), ComponentId::attn_head(ld, hd)));
        out.push_back(edge_key(ComponentId::mlp(lu), ComponentId::attn_head(ld, hd)));
      }
  return out;
}

inline double jaccard_distance(const ComponentVector& a, const ComponentVector& b) {
  ACCPP_REQUIRE(a.granularity == b.granularity, ErrorCode::granularity_mismatch,
                std::string("cannot compare ") + to_string(a.granularity) + " with " + to_string(b.granularity));
  if (a.keys.empty() && b.keys.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& k : a.keys) inter += b.keys.count(k);
  const std::size_t uni = a.keys.size() + b.keys.size() - inter;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

/// Pairwise distances; rows are split across `jobs` threads.
inline Matrix jaccard_matrix(const std::vector<ComponentVector>& vs, int jobs = 1) {
  const auto n = static_cast<Eigen::Index>(vs.size());
  for (const auto& v : vs)
    ACCPP_REQUIRE(v.granularity == vs.front().granularity, ErrorCode::granularity_mismatch,
                  "component vectors mix granularities");
  Matrix D = Matrix::Zero(n, n);
  auto work = [&](int tid, int nt) {
    for (Eigen::Index i = tid; i < n; i += nt)
      for (Eigen::Index j = i + 1; j < n; ++j)
        D(i, j) = jaccard_distance(vs[static_cast<std::size_t>(i)], vs[static_cast<std::size_t>(j)]);
  };
  jobs = std::max(1, jobs);
  std::vector<std::thread> pool;
  for (int t = 1; t < jobs; ++t) pool.emplace_back(work, t, jobs);
  work(0, jobs);
  for (auto& t : pool) t.join();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) D(j, i) = D(i, j);
  return D;
}

}  // namespace accpp
