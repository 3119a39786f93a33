#pragma once

#include <algorithm>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "accpp/acc/solver.hpp"
#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/model/intervention.hpp"
#include "accpp/model/tokenizer.hpp"
#include "accpp/model/transformer.hpp"
#include "accpp/trace/graph.hpp"

namespace accpp {

inline constexpr double kDefaultTauScale = 2.5;
inline constexpr double kDefaultSeedRho = 0.25;

/// tau(d) = scale / (d + 1) for a 0-based destination index d, i.e. scale
/// over the number of visible sources.
struct TauPolicy {
  double scale = kDefaultTauScale;

  explicit TauPolicy(double s = kDefaultTauScale) : scale(s) {
    ACCPP_REQUIRE(s > 1.0, ErrorCode::config, "tau scale must exceed 1 (uniform attention already reaches tau)");
  }
  double tau(int d) const { return scale / static_cast<double>(d + 1); }
};

struct TauCalibration {
  Ecdf ecdf;
  double suggested_scale = kDefaultTauScale;
  std::size_t n_prompts = 0;
};

/// ECDF of (d+1) * A_ds over every layer, head, row d and source s <= d.
inline TauCalibration calibrate_tau(const ModelBundle& bundle, const std::vector<std::vector<int>>& prompts) {
  ACCPP_REQUIRE(!prompts.empty(), ErrorCode::empty_input, "calibrate_tau: empty corpus");
  std::vector<double> stats;
  for (const auto& ids : prompts) {
    auto cache = forward(bundle, ids);
    for (const auto& layer : cache.weights)
      for (const auto& w : layer)
        for (int d = 0; d < cache.n_tokens(); ++d)
          for (int s = 0; s <= d; ++s) stats.push_back(static_cast<double>(d + 1) * w(d, s));
  }
  return {Ecdf(std::move(stats)), kDefaultTauScale, prompts.size()};
}

struct Seed {
  ComponentId component;
  double attribution = 0.0;
};

/// Direct logit attribution at the last token through the frozen final LN.
/// Keeps components at or above rho times the largest positive attribution.
inline std::vector<Seed> seed_components(const ModelBundle& bundle, const ActivationCache& cache, int target,
                                         double rho = kDefaultSeedRho, int contrast = -1) {
  const int V = bundle.arch.vocab_size;
  ACCPP_REQUIRE(target >= 0 && target < V, ErrorCode::out_of_range, "target token not in vocabulary");
  ACCPP_REQUIRE(contrast < V, ErrorCode::out_of_range, "contrast token not in vocabulary");
  ACCPP_REQUIRE(rho > 0.0 && rho <= 1.0, ErrorCode::config, "rho must lie in (0, 1]");
  Vector dir = bundle.unembed.col(target);
  if (contrast >= 0) dir -= bundle.unembed.col(contrast);
  const auto fin = final_decomposition(bundle, cache);
  const int last = cache.n_tokens() - 1;
  std::vector<Seed> all;
  double best = 0.0;
  for (std::size_t i = 0; i < fin.components.size(); ++i) {
    const double a = fin.outputs[i].row(last).dot(dir);
    all.push_back({fin.components[i], a});
    best = std::max(best, a);
  }
  std::vector<Seed> out;
  if (best <= 0.0) return out;
  for (const auto& s : all)
    if (s.attribution >= rho * best) out.push_back(s);
  std::stable_sort(out.begin(), out.end(), [](const Seed& a, const Seed& b) {
    if (a.attribution != b.attribution) return a.attribution > b.attribution;
    return a.component < b.component;
  });
  return out;
}

struct TraceConfig {
  TauPolicy tau{};
  double rho = kDefaultSeedRho;
  int contrast = -1;
  int ig_steps = kDefaultIgSteps;
  bool keep_vectors = true;
  std::uint64_t seed = 0;  // recorded only; tracing is deterministic
};

/// Lazily built per-head solver state for one cache.
class HeadContextCache {
 public:
  HeadContextCache(const ModelBundle& b, const ActivationCache& c) : bundle_(b), cache_(c) {}
  const HeadContext& get(int layer, int head) {
    auto key = std::make_pair(layer, head);
    auto it = ctx_.find(key);
    if (it == ctx_.end()) it = ctx_.emplace(key, make_head_context(bundle_, cache_, layer, head)).first;
    return it->second;
  }

 private:
  const ModelBundle& bundle_;
  const ActivationCache& cache_;
  std::map<std::pair<int, int>, HeadContext> ctx_;
};

/// Recursive circuit construction from the direct-logit seeds.
inline CircuitGraph trace(const ModelBundle& bundle, const std::vector<int>& token_ids, int target,
                          const TraceConfig& cfg = {}, const std::string& prompt = {}) {
  const auto cache = forward(bundle, token_ids);
  const auto seeds = seed_components(bundle, cache, target, cfg.rho, cfg.contrast);
  ACCPP_REQUIRE(!seeds.empty(), ErrorCode::no_seed, "no component has a positive direct effect on the target");

  CircuitGraph g;
  g.prompt = prompt;
  g.token_ids = token_ids;
  g.tokens = cache.tokens;
  g.target = target;
  g.contrast = cfg.contrast;
  g.tau_scale = cfg.tau.scale;
  g.rho = cfg.rho;
  g.ig_steps = cfg.ig_steps;
  g.model_id = bundle.arch.model_id;
  g.n_layers = bundle.arch.n_layers;
  g.n_heads = bundle.arch.n_heads;
  g.seed = cfg.seed;

  std::map<NodeRef, std::size_t> node_index;
  auto node = [&](const NodeRef& r) -> CircuitNode& {
    auto it = node_index.find(r);
    if (it == node_index.end()) {
      it = node_index.emplace(r, g.nodes.size()).first;
      g.nodes.push_back({r, cache.tokens[static_cast<std::size_t>(r.token)], {}, 0.0});
    }
    return g.nodes[it->second];
  };
  auto add_role = [](CircuitNode& n, const std::string& role) {
    if (std::find(n.roles.begin(), n.roles.end(), role) == n.roles.end()) n.roles.push_back(role);
  };

  std::deque<NodeRef> work;
  std::set<NodeRef> queued;
  const int last = cache.n_tokens() - 1;
  for (const auto& s : seeds) {
    NodeRef r{s.component, last};
    auto& n = node(r);
    add_role(n, "seed");
    n.seed_attribution = s.attribution;
    if (r.component.is_head()) {
      if (queued.insert(r).second) work.push_back(r);
    } else {
      add_role(n, "leaf");
    }
  }

  HeadContextCache contexts(bundle, cache);
  std::set<std::tuple<int, int, int, int>> solved;  // (layer, head, d, s)
  while (!work.empty()) {
    const NodeRef cur = work.front();
    work.pop_front();
    add_role(node(cur), "expanded");
    const int l = cur.component.layer, h = cur.component.head, t = cur.token;
    const auto& w = cache.weights[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
    const double tau = cfg.tau.tau(t);
    const auto& ctx = contexts.get(l, h);
    for (int sp = 0; sp <= t; ++sp) {
      if (w(t, sp) < tau) continue;
      if (!solved.insert({l, h, t, sp}).second) continue;
      for (Side side : {Side::dst, Side::src}) {
        const auto set = solve_pair(ctx, t, sp, side, tau, cfg.ig_steps);
        const int attach = side == Side::dst ? t : sp;
        // group removed candidates by upstream component
        std::map<ComponentId, CircuitEdge> grouped;
        for (const auto& r : set.removed) {
          auto& e = grouped[r.index.component];
          e.upstream = {r.index.component, attach};
          e.sv.push_back(r.index.sv);
          e.ig.push_back(r.ig);
          if (cfg.keep_vectors) e.vectors.push_back(r.vector);
        }
        for (auto& [comp, e] : grouped) {
          e.downstream = cur;
          e.side = side;
          e.d = t;
          e.s = sp;
          e.weight_before = set.initial_weight;
          e.weight_after = set.final_weight;
          e.tau = tau;
          auto& up = node(e.upstream);
          if (comp.is_head()) {
            if (queued.insert(e.upstream).second) work.push_back(e.upstream);
          } else {
            add_role(up, "leaf");
          }
          g.edges.push_back(std::move(e));
        }
      }
    }
  }
  std::sort(g.nodes.begin(), g.nodes.end(), [](const CircuitNode& a, const CircuitNode& b) { return a.ref < b.ref; });
  return g;
}

inline CircuitGraph trace(const ModelBundle& bundle, const std::string& prompt, const std::string& target_token,
                          const TraceConfig& cfg = {}) {
  Tokenizer tok(bundle.vocab);
  return trace(bundle, tok.encode(prompt), tok.id_of(target_token), cfg, prompt);
}

struct GraphCheck {
  bool acyclic = true;
  bool layer_ordered = true;
  std::size_t solves_checked = 0;
  std::size_t solves_sound = 0;
  std::size_t edges_checked = 0;
  std::size_t edges_sound = 0;
  std::vector<std::string> failures;

  bool ok() const { return acyclic && layer_ordered && solves_sound == solves_checked && edges_sound == edges_checked; }
};

/// Structural checks plus a replay of every recorded solve: the union of
/// edges sharing (head, d, s, side) is removed through apply_intervention and
/// the new weight must fall below the recorded tau.
inline GraphCheck verify_graph(const ModelBundle& bundle, const CircuitGraph& g) {
  GraphCheck out;
  std::map<NodeRef, std::vector<NodeRef>> adj;
  for (const auto& e : g.edges) {
    if (!(e.upstream.component.stage() < e.downstream.component.stage()) || !e.downstream.component.is_head()) {
      out.layer_ordered = false;
      out.failures.push_back("edge " + e.upstream.key() + " -> " + e.downstream.key() + " is not layer-ordered");
    }
    adj[e.upstream].push_back(e.downstream);
  }
  // iterative three-colour DFS
  std::map<NodeRef, int> colour;
  for (const auto& [start, _] : adj) {
    if (colour[start] != 0) continue;
    std::vector<std::pair<NodeRef, std::size_t>> stack{{start, 0}};
    colour[start] = 1;
    while (!stack.empty() && out.acyclic) {
      auto& [n, i] = stack.back();
      const auto& next = adj[n];
      if (i == next.size()) {
        colour[n] = 2;
        stack.pop_back();
        continue;
      }
      const NodeRef m = next[i++];
      if (colour[m] == 1) {
        out.acyclic = false;
        out.failures.push_back("cycle through " + m.key());
      } else if (colour[m] == 0) {
        colour[m] = 1;
        stack.push_back({m, 0});
      }
    }
  }

  const auto cache = forward(bundle, g.token_ids);
  HeadContextCache contexts(bundle, cache);
  std::map<std::tuple<NodeRef, int, int, int>, std::vector<std::size_t>> solves;  // (head node, d, s, side)
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto& e = g.edges[i];
    solves[{e.downstream, e.d, e.s, static_cast<int>(e.side)}].push_back(i);
  }
  for (const auto& [key, edge_ids] : solves) {
    const auto& [head_node, d, s, side_i] = key;
    ++out.solves_checked;
    out.edges_checked += edge_ids.size();
    const double tau = g.edges[edge_ids.front()].tau;
    InterventionResult res;
    try {
      // malformed edges (already flagged above) can fail here; count them unsound
      ACCPP_REQUIRE(head_node.component.is_head(), ErrorCode::validation, "downstream is not a head");
      const auto& ctx = contexts.get(head_node.component.layer, head_node.component.head);
      std::vector<CandidateIndex> removed;
      for (std::size_t i : edge_ids)
        for (int k : g.edges[i].sv) removed.push_back({g.edges[i].upstream.component, k});
      const auto iv = make_intervention(ctx, static_cast<Side>(side_i), d, removed);
      res = apply_intervention(bundle, cache, ctx.uh, iv);
    } catch (const Error& err) {
      out.failures.push_back("replay of " + head_node.key() + " failed: " + err.what());
      continue;
    }
    const bool sound = res.row(s) < tau;
    if (sound) {
      ++out.solves_sound;
      out.edges_sound += edge_ids.size();
    } else {
      out.failures.push_back("replay of " + head_node.key() + " d=" + std::to_string(d) + " s=" + std::to_string(s) +
                             " leaves weight " + std::to_string(res.row(s)) + " >= tau " + std::to_string(tau));
    }
  }
  return out;
}

}  // namespace accpp
