#pragma once

#include <map>
#include <vector>

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/trace/graph.hpp"

namespace accpp {

/// Normalized sums of the signals entering one head-at-token node.
struct SignalSummary {
  NodeRef node;
  Vector s_dst, s_src;                 // unit norm or zero
  bool dst_degenerate = false;         // incoming signals cancel out
  bool src_degenerate = false;
  int n_dst = 0, n_src = 0;            // incoming signal vectors
};

namespace detail {

inline void normalize_summary(Vector& v, double mass, bool& degenerate) {
  const double nrm = v.norm();
  if (mass == 0.0) return;
  if (nrm <= 1e-12 * mass) {
    v.setZero();
    degenerate = true;
    return;
  }
  v /= nrm;
}

}  // namespace detail

inline std::map<NodeRef, SignalSummary> signal_summaries(const CircuitGraph& g) {
  std::map<NodeRef, SignalSummary> out;
  std::map<NodeRef, std::pair<double, double>> mass;
  Eigen::Index dim = -1;
  for (const auto& e : g.edges) {
    ACCPP_REQUIRE(e.vectors.size() == e.sv.size(), ErrorCode::missing_vectors,
                  "edge into " + e.downstream.key() + " has no embedded signal vectors; re-trace with vectors kept");
    for (const auto& v : e.vectors) {
      if (dim < 0) dim = v.size();
      ACCPP_REQUIRE(v.size() == dim, ErrorCode::shape_mismatch, "signal vectors differ in length");
    }
  }
  if (dim < 0) return out;
  for (const auto& e : g.edges) {
    auto [it, fresh] = out.try_emplace(e.downstream);
    auto& s = it->second;
    if (fresh) {
      s.node = e.downstream;
      s.s_dst = Vector::Zero(dim);
      s.s_src = Vector::Zero(dim);
    }
    auto& m = mass[e.downstream];
    for (const auto& v : e.vectors) {
      if (e.side == Side::dst) {
        s.s_dst += v;
        m.first += v.norm();
        ++s.n_dst;
      } else {
        s.s_src += v;
        m.second += v.norm();
        ++s.n_src;
      }
    }
  }
  for (auto& [node, s] : out) {
    detail::normalize_summary(s.s_dst, mass[node].first, s.dst_degenerate);
    detail::normalize_summary(s.s_src, mass[node].second, s.src_degenerate);
  }
  return out;
}

struct SimilarityMatrix {
  std::vector<NodeRef> rows, cols;  // only nodes with a nonzero summary on this side
  Matrix sim;
};

struct SignalSimilarity {
  SimilarityMatrix dst, src;
};

namespace detail {

inline SimilarityMatrix similarity_side(const std::map<NodeRef, SignalSummary>& a,
                                        const std::map<NodeRef, SignalSummary>& b, bool dst) {
  SimilarityMatrix out;
  std::vector<Vector> ra, rb;
  for (const auto& [n, s] : a) {
    const Vector& v = dst ? s.s_dst : s.s_src;
    if (v.norm() > 0.0) {
      out.rows.push_back(n);
      ra.push_back(v);
    }
  }
  for (const auto& [n, s] : b) {
    const Vector& v = dst ? s.s_dst : s.s_src;
    if (v.norm() > 0.0) {
      out.cols.push_back(n);
      rb.push_back(v);
    }
  }
  out.sim = Matrix::Zero(static_cast<Eigen::Index>(ra.size()), static_cast<Eigen::Index>(rb.size()));
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ACCPP_REQUIRE(rb.empty() || ra[i].size() == rb.front().size(), ErrorCode::shape_mismatch,
                  "signal summaries differ in width");
    for (std::size_t j = 0; j < rb.size(); ++j)
      out.sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::clamp(ra[i].dot(rb[j]), -1.0, 1.0);
  }
  return out;
}

}  // namespace detail

inline SignalSimilarity signal_similarity(const std::map<NodeRef, SignalSummary>& a,
                                          const std::map<NodeRef, SignalSummary>& b) {
  ACCPP_REQUIRE(!a.empty() && !b.empty(), ErrorCode::missing_vectors, "signal summaries are empty");
  return {detail::similarity_side(a, b, true), detail::similarity_side(a, b, false)};
}

inline SignalSimilarity signal_similarity(const CircuitGraph& a, const CircuitGraph& b) {
  return signal_similarity(signal_summaries(a), signal_summaries(b));
}

inline std::string similarity_tsv(const SimilarityMatrix& m) {
  std::ostringstream os;
  os.precision(17);
  os << "node";
  for (const auto& c : m.cols) os << '\t' << c.key();
  os << '\n';
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    os << m.rows[i].key();
    for (std::size_t j = 0; j < m.cols.size(); ++j)
      os << '\t' << m.sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    os << '\n';
  }
  return os.str();
}

}  // namespace accpp
