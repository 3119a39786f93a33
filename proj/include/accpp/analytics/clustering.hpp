#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/model/bundle.hpp"

namespace accpp {

// Leaves are clusters 0..n-1; the i-th merge creates cluster n+i.
struct Merge {
  int a = 0, b = 0;  // a < b
  double height = 0.0;
  int size = 0;
};

struct Dendrogram {
  int n = 0;
  std::vector<Merge> merges;
  std::vector<int> leaf_order;
};

namespace detail {

inline void check_distance_matrix(const Matrix& D) {
  ACCPP_REQUIRE(D.rows() == D.cols(), ErrorCode::non_symmetric, "distance matrix must be square");
  ACCPP_REQUIRE(D.allFinite(), ErrorCode::non_finite, "distance matrix has non-finite entries");
  for (Eigen::Index i = 0; i < D.rows(); ++i) {
    ACCPP_REQUIRE(D(i, i) == 0.0, ErrorCode::non_symmetric, "distance matrix diagonal must be zero");
    for (Eigen::Index j = i + 1; j < D.cols(); ++j)
      ACCPP_REQUIRE(std::abs(D(i, j) - D(j, i)) <= 1e-12 * std::max(1.0, std::abs(D(i, j))), ErrorCode::non_symmetric,
                    "distance matrix is not symmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
  }
}

// smaller cluster first; equal sizes keep the lower id first
inline void leaf_order_rec(const Dendrogram& dg, const std::vector<int>& sizes, int id, std::vector<int>& out) {
  if (id < dg.n) {
    out.push_back(id);
    return;
  }
  const auto& m = dg.merges[static_cast<std::size_t>(id - dg.n)];
  int first = m.a, second = m.b;
  if (sizes[static_cast<std::size_t>(second)] < sizes[static_cast<std::size_t>(first)]) std::swap(first, second);
  leaf_order_rec(dg, sizes, first, out);
  leaf_order_rec(dg, sizes, second, out);
}

inline std::vector<int> cluster_sizes(const Dendrogram& dg) {
  std::vector<int> sizes(static_cast<std::size_t>(2 * dg.n - 1 > 0 ? 2 * dg.n - 1 : dg.n), 1);
  for (std::size_t i = 0; i < dg.merges.size(); ++i) sizes[static_cast<std::size_t>(dg.n) + i] = dg.merges[i].size;
  return sizes;
}

}  // namespace detail

/// UPGMA via Lance-Williams updates. Ties go to the lexicographically
/// smallest (a, b) cluster-id pair.
inline Dendrogram average_linkage(const Matrix& D) {
  detail::check_distance_matrix(D);
  const int n = static_cast<int>(D.rows());
  ACCPP_REQUIRE(n >= 1, ErrorCode::empty_input, "cannot cluster zero items");
  Dendrogram dg;
  dg.n = n;
  const int total = 2 * n - 1;
  Matrix dist = Matrix::Zero(total, total);
  dist.topLeftCorner(n, n) = D;
  std::vector<int> size(static_cast<std::size_t>(total), 1);
  std::vector<int> active(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = i;

  for (int step = 0; step < n - 1; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 1;
    // active stays sorted by id, so the first strict minimum is the smallest pair
    for (std::size_t i = 0; i < active.size(); ++i)
      for (std::size_t j = i + 1; j < active.size(); ++j) {
        const double v = dist(active[i], active[j]);
        if (v < best) {
          best = v;
          bi = i;
          bj = j;
        }
      }
    const int a = active[bi], b = active[bj], c = n + step;
    const int sa = size[static_cast<std::size_t>(a)], sb = size[static_cast<std::size_t>(b)];
    size[static_cast<std::size_t>(c)] = sa + sb;
    for (int k : active) {
      if (k == a || k == b) continue;
      const double v = (sa * dist(a, k) + sb * dist(b, k)) / (sa + sb);
      dist(c, k) = dist(k, c) = v;
    }
    dg.merges.push_back({a, b, best, sa + sb});
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bi));
    active.push_back(c);
  }
  detail::leaf_order_rec(dg, detail::cluster_sizes(dg), total - 1, dg.leaf_order);
  return dg;
}

namespace detail {

// Labels 0..k-1 numbered by each cluster's smallest leaf.
inline std::vector<int> labels_after(const Dendrogram& dg, std::size_t n_merges) {
  std::vector<int> parent(static_cast<std::size_t>(dg.n));
  for (int i = 0; i < dg.n; ++i) parent[static_cast<std::size_t>(i)] = i;
  std::function<int(int)> root = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)];
    return x;
  };
  // representative leaf of every cluster id
  std::vector<int> rep(static_cast<std::size_t>(2 * dg.n), -1);
  for (int i = 0; i < dg.n; ++i) rep[static_cast<std::size_t>(i)] = i;
  for (std::size_t m = 0; m < dg.merges.size(); ++m) {
    const auto& mg = dg.merges[m];
    const int ra = rep[static_cast<std::size_t>(mg.a)], rb = rep[static_cast<std::size_t>(mg.b)];
    rep[static_cast<std::size_t>(dg.n) + m] = ra;
    if (m < n_merges) parent[static_cast<std::size_t>(root(rb))] = root(ra);
  }
  std::map<int, int> label_of_root;
  std::vector<int> labels(static_cast<std::size_t>(dg.n));
  for (int i = 0; i < dg.n; ++i) {
    const int r = root(i);
    auto it = label_of_root.find(r);
    if (it == label_of_root.end()) it = label_of_root.emplace(r, static_cast<int>(label_of_root.size())).first;
    labels[static_cast<std::size_t>(i)] = it->second;
  }
  return labels;
}

}  // namespace detail

inline std::vector<int> cut_k(const Dendrogram& dg, int k) {
  ACCPP_REQUIRE(k >= 1 && k <= dg.n, ErrorCode::config,
                "k must be in [1, " + std::to_string(dg.n) + "], got " + std::to_string(k));
  return detail::labels_after(dg, static_cast<std::size_t>(dg.n - k));
}

/// Applies every merge with height <= h.
inline std::vector<int> cut_height(const Dendrogram& dg, double h) {
  std::size_t m = 0;
  while (m < dg.merges.size() && dg.merges[m].height <= h) ++m;
  return detail::labels_after(dg, m);
}

inline int medoid(const std::vector<int>& members, const std::function<double(int, int)>& dist) {
  ACCPP_REQUIRE(!members.empty(), ErrorCode::empty_input, "medoid of an empty cluster");
  std::vector<int> sorted = members;
  std::sort(sorted.begin(), sorted.end());
  int best = sorted.front();
  double best_sum = std::numeric_limits<double>::infinity();
  for (int i : sorted) {
    double sum = 0.0;
    for (int j : sorted) sum += i == j ? 0.0 : dist(i, j);
    if (sum < best_sum) {
      best_sum = sum;
      best = i;
    }
  }
  return best;
}

inline int medoid(const std::vector<int>& members, const Matrix& D) {
  return medoid(members, [&D](int i, int j) { return D(i, j); });
}

struct WithinDistance {
  std::string group;
  std::size_t size = 0;
  double mean_within = 0.0;
  double normalized = 0.0;
};

/// Mean within-group distance over the mean distance across all pairs.
inline std::vector<WithinDistance> normalized_within_distance(const std::map<std::string, std::vector<int>>& groups,
                                                              const Matrix& D) {
  detail::check_distance_matrix(D);
  const auto n = D.rows();
  ACCPP_REQUIRE(n >= 2, ErrorCode::degenerate_group, "baseline needs at least two items");
  double overall = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) overall += D(i, j);
  overall /= static_cast<double>(n * (n - 1) / 2);
  std::vector<WithinDistance> out;
  for (const auto& [name, members] : groups) {
    ACCPP_REQUIRE(members.size() >= 2, ErrorCode::degenerate_group,
                  "group '" + name + "' has fewer than two members");
    double within = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < members.size(); ++i)
      for (std::size_t j = i + 1; j < members.size(); ++j, ++pairs) {
        ACCPP_REQUIRE(members[i] >= 0 && members[i] < n && members[j] >= 0 && members[j] < n,
                      ErrorCode::out_of_range, "group member out of range");
        within += D(members[i], members[j]);
      }
    within /= static_cast<double>(pairs);
    double norm;
    if (overall > 0.0) norm = within / overall;
    else norm = 0.0;  // every pair identical
    out.push_back({name, members.size(), within, norm});
  }
  return out;
}

// ---------------------------------------------------------------- export

inline std::string distance_matrix_tsv(const std::vector<std::string>& ids, const Matrix& D) {
  ACCPP_REQUIRE(static_cast<Eigen::Index>(ids.size()) == D.rows(), ErrorCode::shape_mismatch, "id count != matrix size");
  std::ostringstream os;
  os.precision(17);
  os << "id";
  for (const auto& id : ids) os << '\t' << id;
  os << '\n';
  for (Eigen::Index i = 0; i < D.rows(); ++i) {
    os << ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < D.cols(); ++j) os << '\t' << D(i, j);
    os << '\n';
  }
  return os.str();
}

inline Matrix distance_matrix_from_tsv(const std::string& text, std::vector<std::string>* ids_out = nullptr) {
  std::istringstream is(text);
  std::string line;
  ACCPP_REQUIRE(std::getline(is, line), ErrorCode::parse, "empty distance table");
  std::vector<std::string> ids;
  {
    std::istringstream hs(line);
    std::string cell;
    std::getline(hs, cell, '\t');
    while (std::getline(hs, cell, '\t')) ids.push_back(cell);
  }
  const auto n = static_cast<Eigen::Index>(ids.size());
  Matrix D(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    ACCPP_REQUIRE(std::getline(is, line), ErrorCode::parse, "distance table is missing rows");
    std::istringstream rs(line);
    std::string cell;
    std::getline(rs, cell, '\t');
    for (Eigen::Index j = 0; j < n; ++j) {
      ACCPP_REQUIRE(std::getline(rs, cell, '\t'), ErrorCode::parse, "short row in distance table");
      try {
        D(i, j) = std::stod(cell);
      } catch (const std::exception&) {
        throw Error(ErrorCode::parse, "bad number '" + cell + "' in distance table");
      }
    }
  }
  if (ids_out) *ids_out = ids;
  return D;
}

inline std::string assignments_tsv(const std::vector<std::string>& ids, const std::vector<int>& labels) {
  ACCPP_REQUIRE(ids.size() == labels.size(), ErrorCode::shape_mismatch, "id count != label count");
  std::ostringstream os;
  os << "id\tcluster\n";
  for (std::size_t i = 0; i < ids.size(); ++i) os << ids[i] << '\t' << labels[i] << '\n';
  return os.str();
}

inline nlohmann::json dendrogram_to_json(const Dendrogram& dg, const std::vector<std::string>& ids = {}) {
  nlohmann::json j;
  j["n"] = dg.n;
  j["merges"] = nlohmann::json::array();
  for (const auto& m : dg.merges) j["merges"].push_back({{"a", m.a}, {"b", m.b}, {"height", m.height}, {"size", m.size}});
  j["leaf_order"] = dg.leaf_order;
  if (!ids.empty()) j["ids"] = ids;
  return j;
}

}  // namespace accpp
