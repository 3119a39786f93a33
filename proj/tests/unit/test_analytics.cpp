#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "accpp/analytics/circuits.hpp"
#include "accpp/analytics/clustering.hpp"
#include "accpp/analytics/ioi.hpp"
#include "accpp/analytics/signals.hpp"
#include "accpp/model/toy_vocab.hpp"
#include "accpp/trace/tracer.hpp"
#include "test_util.hpp"

using namespace accpp;

namespace {

IoiWordLists toy_words() { return {default_names(), default_places(), default_objects()}; }

Matrix random_distance(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix D = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) D(i, j) = D(j, i) = u(rng);
  return D;
}

// Brute-force UPGMA: cluster distance recomputed from all leaf pairs every step.
std::vector<std::pair<std::vector<int>, double>> naive_linkage(const Matrix& D) {
  const int n = static_cast<int>(D.rows());
  std::vector<std::vector<int>> clusters;
  for (int i = 0; i < n; ++i) clusters.push_back({i});
  std::vector<std::pair<std::vector<int>, double>> out;
  while (clusters.size() > 1) {
    double best = 1e300;
    std::size_t bi = 0, bj = 1;
    for (std::size_t i = 0; i < clusters.size(); ++i)
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        double s = 0;
        for (int a : clusters[i])
          for (int b : clusters[j]) s += D(a, b);
        s /= static_cast<double>(clusters[i].size() * clusters[j].size());
        if (s < best) best = s, bi = i, bj = j;
      }
    auto merged = clusters[bi];
    merged.insert(merged.end(), clusters[bj].begin(), clusters[bj].end());
    std::sort(merged.begin(), merged.end());
    out.push_back({merged, best});
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bi));
    clusters.push_back(merged);
  }
  return out;
}

std::vector<std::vector<int>> merge_members(const Dendrogram& dg) {
  std::vector<std::vector<int>> members;
  for (int i = 0; i < dg.n; ++i) members.push_back({i});
  std::vector<std::vector<int>> out;
  for (const auto& m : dg.merges) {
    auto v = members[static_cast<std::size_t>(m.a)];
    const auto& w = members[static_cast<std::size_t>(m.b)];
    v.insert(v.end(), w.begin(), w.end());
    std::sort(v.begin(), v.end());
    members.push_back(v);
    out.push_back(v);
  }
  return out;
}

CircuitEdge make_edge(ComponentId up, int ut, ComponentId down, int d, Side side, std::vector<int> sv,
                      std::vector<Vector> vecs) {
  CircuitEdge e;
  e.upstream = {up, ut};
  e.downstream = {down, d};
  e.side = side;
  e.d = d;
  e.s = 0;
  e.sv = std::move(sv);
  e.vectors = std::move(vecs);
  return e;
}

}  // namespace

TEST(Ioi, TemplateOneMatchesExample) {
  auto p = make_ioi_prompt(1, IoiOrder::BABA, "Jim", "Michael", "office", "computer");
  EXPECT_EQ(p.text, "Then, Michael and Jim went to the office. Michael gave a computer to");
  EXPECT_EQ(p.answer, " Jim");
  auto q = make_ioi_prompt(1, IoiOrder::ABBA, "Jim", "Michael", "office", "computer");
  EXPECT_EQ(q.text, "Then, Jim and Michael went to the office. Michael gave a computer to");
  auto r = make_ioi_prompt(14, IoiOrder::ABBA, "Jim", "Michael", "office", "computer");
  EXPECT_EQ(r.text, "The office Jim and Michael went to had a computer. Michael gave it to");
  EXPECT_THROW(make_ioi_prompt(16, IoiOrder::ABBA, "a", "b", "c", "d"), Error);
}

TEST(Ioi, DatasetShapeAndDeterminism) {
  auto a = gen_ioi_dataset(toy_words(), 1, 5);
  EXPECT_EQ(a.size(), 30u);
  auto b = gen_ioi_dataset(toy_words(), 3, 5);
  EXPECT_EQ(b.size(), 90u);
  auto c = gen_ioi_dataset(toy_words(), 3, 5);
  Tokenizer tok(default_toy_vocab());
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(b[i].text, c[i].text);
    EXPECT_NE(b[i].name_a, b[i].name_b);
    EXPECT_NO_THROW(tok.encode(b[i].text));
    EXPECT_NO_THROW(tok.encode(b[i].answer));
    // the repeated subject B comes after A's first mention
    const auto last = b[i].text.rfind(b[i].name_b);
    EXPECT_GT(last, b[i].text.find(b[i].name_a));
  }
  auto d = gen_ioi_dataset(toy_words(), 3, 6);
  bool differs = false;
  for (std::size_t i = 0; i < b.size(); ++i) differs |= b[i].text != d[i].text;
  EXPECT_TRUE(differs);
  IoiWordLists empty = toy_words();
  empty.places.clear();
  EXPECT_THROW(gen_ioi_dataset(empty, 1, 0), Error);
}

TEST(Circuits, VocabularyCounts) {
  EXPECT_EQ(edge_vocabulary(12, 12).size(), 10296u);
  EXPECT_EQ(node_vocabulary(12, 12).size(), 156u);
  auto ev = edge_vocabulary(3, 2);
  EXPECT_EQ(std::set<std::string>(ev.begin(), ev.end()).size(), ev.size());
  EXPECT_EQ(ev.size(), static_cast<std::size_t>(3 * (2 + 1) * 2 * 2 / 2));
}

TEST(Circuits, VectorsAndJaccard) {
  CircuitGraph g;
  EXPECT_TRUE(component_vector(g, Granularity::edge).keys.empty());
  g.nodes.push_back({{ComponentId::attn_head(1, 0), 4}, "", {"seed"}, 1.0});
  g.nodes.push_back({{ComponentId::attn_head(0, 1), 4}, "", {"leaf"}, 0.0});
  g.nodes.push_back({{ComponentId::embed(), 4}, "", {"leaf"}, 0.0});
  g.edges.push_back(make_edge(ComponentId::attn_head(0, 1), 4, ComponentId::attn_head(1, 0), 4, Side::dst, {0, 2},
                              {Vector::Ones(3), Vector::Ones(3)}));
  g.edges.push_back(make_edge(ComponentId::embed(), 4, ComponentId::attn_head(1, 0), 4, Side::dst, {1},
                              {Vector::Ones(3)}));
  auto node = component_vector(g, Granularity::node);
  auto edge = component_vector(g, Granularity::edge);
  auto esv = component_vector(g, Granularity::edge_sv);
  EXPECT_EQ(node.keys, (std::set<std::string>{"attn.0.1", "attn.1.0"}));
  EXPECT_EQ(edge.keys.size(), 1u);
  EXPECT_EQ(esv.keys.size(), 2u);
  EXPECT_THROW(jaccard_distance(node, edge), Error);

  ComponentVector a{Granularity::node, {"a", "b"}}, b{Granularity::node, {"b", "c"}}, c{Granularity::node, {"x"}},
      e{Granularity::node, {}};
  EXPECT_NEAR(jaccard_distance(a, b), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(jaccard_distance(a, a), 0.0);
  EXPECT_EQ(jaccard_distance(a, c), 1.0);
  EXPECT_EQ(jaccard_distance(e, e), 0.0);
  EXPECT_EQ(jaccard_distance(a, e), 1.0);
}

TEST(Circuits, JaccardIsAMetric) {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.4);
  std::vector<ComponentVector> vs;
  for (int i = 0; i < 25; ++i) {
    ComponentVector v{Granularity::edge, {}};
    for (int k = 0; k < 12; ++k)
      if (coin(rng)) v.keys.insert("k" + std::to_string(k));
    vs.push_back(v);
  }
  auto D = jaccard_matrix(vs, 3);
  EXPECT_EQ(D, jaccard_matrix(vs, 1));
  for (int i = 0; i < 25; ++i)
    for (int j = 0; j < 25; ++j) {
      EXPECT_EQ(D(i, j), D(j, i));
      if (vs[i].keys == vs[j].keys) {
        EXPECT_EQ(D(i, j), 0.0);
      } else {
        EXPECT_GT(D(i, j), 0.0);
      }
      for (int k = 0; k < 25; ++k) EXPECT_LE(D(i, k), D(i, j) + D(j, k) + 1e-12);
    }
}

TEST(Circuits, TracedVectorsRefine) {
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    auto b = synth_toy_model(testutil::sharp_config(AttnVariant::bias, NormMode::frozen_ln, seed, 3, 2, 8));
    Tokenizer tok(b.vocab);
    auto ids = tok.encode("Then, Michael and Jim went to the office. Michael gave a computer to");
    auto c = forward(b, ids);
    Eigen::Index t;
    c.logits.row(c.n_tokens() - 1).maxCoeff(&t);
    CircuitGraph g;
    try {
      g = trace(b, ids, static_cast<int>(t));
    } catch (const Error&) {
      continue;
    }
    auto node = component_vector(g, Granularity::node);
    auto edge = component_vector(g, Granularity::edge);
    auto esv = component_vector(g, Granularity::edge_sv);
    std::set<std::string> from_edges, stripped;
    for (const auto& k : edge.keys) {
      const auto gt = k.find('>');
      from_edges.insert(k.substr(0, gt));
      from_edges.insert(k.substr(gt + 1));
    }
    for (const auto& k : esv.keys) stripped.insert(k.substr(0, k.find('#')));
    EXPECT_EQ(stripped, edge.keys);
    // seeds without inbound edges can be isolated, so edges give a subset
    for (const auto& k : from_edges) EXPECT_TRUE(node.keys.count(k)) << k;
  }
}

TEST(Clustering, SmallExamples) {
  Matrix D(3, 3);
  D << 0, 0.9, 0.9, 0.9, 0, 0.1, 0.9, 0.1, 0;
  auto dg = average_linkage(D);
  ASSERT_EQ(dg.merges.size(), 2u);
  EXPECT_EQ(dg.merges[0].a, 1);
  EXPECT_EQ(dg.merges[0].b, 2);
  EXPECT_DOUBLE_EQ(dg.merges[0].height, 0.1);
  EXPECT_DOUBLE_EQ(dg.merges[1].height, 0.9);
  EXPECT_EQ(dg.merges[1].size, 3);
  EXPECT_EQ(dg.leaf_order, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(cut_k(dg, 2), (std::vector<int>{0, 1, 1}));
  EXPECT_EQ(cut_height(dg, 0.5), (std::vector<int>{0, 1, 1}));
  EXPECT_EQ(cut_height(dg, 1.0), (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(cut_k(dg, 3), (std::vector<int>{0, 1, 2}));
  EXPECT_THROW(cut_k(dg, 0), Error);

  Matrix two(2, 2);
  two << 0, 0.4, 0.4, 0;
  EXPECT_EQ(average_linkage(two).merges.size(), 1u);

  Matrix bad = D;
  bad(0, 1) = 0.3;
  try {
    average_linkage(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_symmetric);
  }
}

TEST(Clustering, TiesGoToSmallestPair) {
  Matrix D = Matrix::Constant(4, 4, 0.5);
  D.diagonal().setZero();
  auto dg = average_linkage(D);
  EXPECT_EQ(dg.merges[0].a, 0);
  EXPECT_EQ(dg.merges[0].b, 1);
  EXPECT_EQ(dg.merges[1].a, 2);
  EXPECT_EQ(dg.merges[1].b, 3);
}

TEST(Clustering, MatchesNaiveReference) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 2 + trial % 20;
    auto D = random_distance(n, rng);
    auto dg = average_linkage(D);
    auto ref = naive_linkage(D);
    auto got = merge_members(dg);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_EQ(got[i], ref[i].first);
      EXPECT_NEAR(dg.merges[i].height, ref[i].second, 1e-12);
      if (i) {
        EXPECT_GE(dg.merges[i].height, dg.merges[i - 1].height - 1e-12);
      }
    }
    auto order = dg.leaf_order;
    std::sort(order.begin(), order.end());
    std::vector<int> iota(static_cast<std::size_t>(n));
    std::iota(iota.begin(), iota.end(), 0);
    EXPECT_EQ(order, iota);
  }
}

TEST(Clustering, PermutationEquivariant) {
  std::mt19937_64 rng(8);
  auto D = random_distance(12, rng);
  std::vector<int> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix P(12, 12);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) P(i, j) = D(perm[i], perm[j]);
  for (int k = 1; k <= 12; ++k) {
    auto la = cut_k(average_linkage(D), k);
    auto lb = cut_k(average_linkage(P), k);
    for (int i = 0; i < 12; ++i)
      for (int j = 0; j < 12; ++j)
        EXPECT_EQ(la[perm[i]] == la[perm[j]], lb[i] == lb[j]);
  }
}

TEST(Clustering, MedoidAndWithinDistance) {
  std::mt19937_64 rng(4);
  auto D = random_distance(10, rng);
  std::vector<int> all(10);
  std::iota(all.begin(), all.end(), 0);
  int best = -1;
  double bs = 1e300;
  for (int i = 0; i < 10; ++i) {
    const double s = D.row(i).sum();
    if (s < bs) bs = s, best = i;
  }
  EXPECT_EQ(medoid(all, D), best);
  EXPECT_EQ(medoid({7}, D), 7);
  Matrix two = Matrix::Zero(4, 4);
  two(1, 3) = two(3, 1) = 0.5;
  EXPECT_EQ(medoid({3, 1}, two), 1);
  EXPECT_THROW(medoid({}, D), Error);

  Matrix Z = Matrix::Zero(5, 5);
  auto zero = normalized_within_distance({{"g", {0, 1, 2}}}, Z);
  EXPECT_EQ(zero[0].normalized, 0.0);
  EXPECT_THROW(normalized_within_distance({{"g", {0}}}, Z), Error);

  // tight group {0,1,2} in a diffuse pool
  Matrix T = Matrix::Constant(8, 8, 1.0);
  T.diagonal().setZero();
  for (int i : {0, 1, 2})
    for (int j : {0, 1, 2})
      if (i != j) T(i, j) = 0.1;
  auto tight = normalized_within_distance({{"tight", {0, 1, 2}}, {"rest", {3, 4, 5, 6, 7}}}, T);
  EXPECT_LT(tight[1].normalized, 1.0);  // std::map orders "rest" before "tight"
  EXPECT_EQ(tight[1].group, "tight");
  EXPECT_GT(tight[0].normalized, 1.0);

  // random groups from an exchangeable pool sit near 1
  auto R = random_distance(200, rng);
  std::vector<int> idx(200);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto rnd = normalized_within_distance({{"x", std::vector<int>(idx.begin(), idx.begin() + 100)}}, R);
  EXPECT_NEAR(rnd[0].normalized, 1.0, 0.05);
}

TEST(Clustering, ExportRoundTrip) {
  std::mt19937_64 rng(2);
  auto D = random_distance(5, rng);
  std::vector<std::string> ids = {"a", "b", "c", "d", "e"};
  std::vector<std::string> back_ids;
  auto back = distance_matrix_from_tsv(distance_matrix_tsv(ids, D), &back_ids);
  EXPECT_EQ(back_ids, ids);
  EXPECT_EQ(back, D);
  auto dg = average_linkage(D);
  auto j = dendrogram_to_json(dg, ids);
  EXPECT_EQ(j["merges"].size(), 4u);
  EXPECT_EQ(assignments_tsv(ids, cut_k(dg, 5)), "id\tcluster\na\t0\nb\t1\nc\t2\nd\t3\ne\t4\n");
  EXPECT_THROW(distance_matrix_from_tsv("id\ta\na\tzz\n"), Error);
}

TEST(Signals, SummariesAndSimilarity) {
  const auto h = ComponentId::attn_head(1, 0);
  Vector v(3), w(3);
  v << 3, 4, 0;
  w << 0, 0, 2;
  CircuitGraph g;
  g.edges.push_back(make_edge(ComponentId::embed(), 2, h, 2, Side::dst, {0}, {v}));
  g.edges.push_back(make_edge(ComponentId::mlp(0), 1, h, 2, Side::src, {0, 1}, {w, Vector(-w)}));
  auto s = signal_summaries(g);
  ASSERT_EQ(s.size(), 1u);
  const auto& sum = s.begin()->second;
  EXPECT_TRUE(sum.s_dst.isApprox(v / 5.0));
  EXPECT_TRUE(sum.s_src.isZero());
  EXPECT_TRUE(sum.src_degenerate);
  EXPECT_FALSE(sum.dst_degenerate);

  auto self = signal_similarity(g, g);
  ASSERT_EQ(self.dst.sim.rows(), 1);
  EXPECT_NEAR(self.dst.sim(0, 0), 1.0, 1e-12);
  EXPECT_EQ(self.src.sim.size(), 0);  // zero rows dropped

  CircuitGraph neg = g, orth = g;
  neg.edges[0].vectors[0] = -v;
  Vector o(3);
  o << 4, -3, 0;
  orth.edges[0].vectors[0] = o;
  EXPECT_NEAR(signal_similarity(g, neg).dst.sim(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(signal_similarity(g, orth).dst.sim(0, 0), 0.0, 1e-12);

  CircuitGraph bare = g;
  bare.edges[0].vectors.clear();
  try {
    signal_summaries(bare);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::missing_vectors);
  }
}

TEST(Signals, TracedSummariesAreUnit) {
  auto b = synth_toy_model(testutil::sharp_config(AttnVariant::rope, NormMode::frozen_ln, 6, 3, 2, 8));
  Tokenizer tok(b.vocab);
  auto ids = tok.encode("Then, Michael and Jim went to the office. Michael gave a computer to");
  auto c = forward(b, ids);
  Eigen::Index t;
  c.logits.row(c.n_tokens() - 1).maxCoeff(&t);
  auto g = trace(b, ids, static_cast<int>(t));
  auto sums = signal_summaries(g);
  for (const auto& [n, s] : sums) {
    // recompute from the raw edges
    Vector dst = Vector::Zero(b.arch.d_model), src = dst;
    for (const auto& e : g.edges)
      if (e.downstream == n)
        for (const auto& x : e.vectors) (e.side == Side::dst ? dst : src) += x;
    if (dst.norm() > 1e-9) {
      EXPECT_TRUE(s.s_dst.isApprox(dst.normalized(), 1e-9));
    }
    if (src.norm() > 1e-9) {
      EXPECT_TRUE(s.s_src.isApprox(src.normalized(), 1e-9));
    }
    for (const Vector* x : {&s.s_dst, &s.s_src}) {
      if (!x->isZero()) {
        EXPECT_NEAR(x->norm(), 1.0, 1e-12);
      }
    }
  }
}
