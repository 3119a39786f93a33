#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/model/bundle.hpp"
#include "accpp/model/component.hpp"
#include "accpp/model/intervention.hpp"

namespace accpp {

inline constexpr const char* kGraphVersion = "accpp-circuit/1";

struct NodeRef {
  ComponentId component;
  int token = 0;

  friend bool operator==(const NodeRef&, const NodeRef&) = default;
  friend auto operator<=>(const NodeRef& a, const NodeRef& b) {
    if (auto c = a.component <=> b.component; c != 0) return c;
    return a.token <=> b.token;
  }
  std::string key() const { return component.label() + "@" + std::to_string(token); }
};

struct CircuitNode {
  NodeRef ref;
  std::string token_str;
  std::vector<std::string> roles;  // "seed", "leaf", "expanded"
  double seed_attribution = 0.0;   // direct logit effect, seeds only
};

/// One upstream component at one token feeding one solved attention weight.
struct CircuitEdge {
  NodeRef upstream;
  NodeRef downstream;  // always an attention head at token d
  Side side = Side::dst;
  int d = 0;
  int s = 0;
  std::vector<int> sv;
  std::vector<double> ig;
  std::vector<Vector> vectors;  // one per sv; at d for dst, at s for src
  double weight_before = 0.0;
  double weight_after = 0.0;
  double tau = 0.0;
};

struct CircuitGraph {
  std::string prompt;
  std::vector<int> token_ids;
  std::vector<std::string> tokens;
  int target = -1;
  int contrast = -1;  // -1: none
  double tau_scale = 2.5;
  double rho = 0.25;
  int ig_steps = 64;
  std::string model_id;
  int n_layers = 0;
  int n_heads = 0;
  std::uint64_t seed = 0;
  std::vector<CircuitNode> nodes;
  std::vector<CircuitEdge> edges;

  const CircuitNode* find(const NodeRef& r) const {
    for (const auto& n : nodes)
      if (n.ref == r) return &n;
    return nullptr;
  }
  bool has_vectors() const {
    for (const auto& e : edges)
      if (e.vectors.size() != e.sv.size()) return false;
    return true;
  }
};

// ---------------------------------------------------------------- JSON

inline nlohmann::json node_ref_json(const NodeRef& r) { return {{"component", r.component.label()}, {"token", r.token}}; }
inline NodeRef node_ref_from_json(const nlohmann::json& j) {
  return {ComponentId::parse(j.at("component").get<std::string>()), j.at("token").get<int>()};
}

inline nlohmann::json graph_to_json(const CircuitGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    auto j = node_ref_json(n.ref);
    j["token_str"] = n.token_str;
    j["roles"] = n.roles;
    j["seed_attribution"] = n.seed_attribution;
    nodes.push_back(std::move(j));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges) {
    nlohmann::json vecs = nlohmann::json::array();
    for (const auto& v : e.vectors) vecs.push_back(std::vector<double>(v.data(), v.data() + v.size()));
    edges.push_back({{"upstream", node_ref_json(e.upstream)},
                     {"downstream", node_ref_json(e.downstream)},
                     {"side", to_string(e.side)},
                     {"d", e.d},
                     {"s", e.s},
                     {"sv", e.sv},
                     {"ig", e.ig},
                     {"vectors", vecs},
                     {"weight_before", e.weight_before},
                     {"weight_after", e.weight_after},
                     {"tau", e.tau}});
  }
  return {{"version", kGraphVersion},
          {"prompt", g.prompt},
          {"token_ids", g.token_ids},
          {"tokens", g.tokens},
          {"target", g.target},
          {"contrast", g.contrast},
          {"tau_scale", g.tau_scale},
          {"rho", g.rho},
          {"ig_steps", g.ig_steps},
          {"model_id", g.model_id},
          {"n_layers", g.n_layers},
          {"n_heads", g.n_heads},
          {"seed", g.seed},
          {"nodes", nodes},
          {"edges", edges}};
}

inline CircuitGraph graph_from_json(const nlohmann::json& j) {
  try {
    ACCPP_REQUIRE(j.value("version", std::string()) == kGraphVersion, ErrorCode::schema_version,
                  "graph version " + j.value("version", std::string("<none>")) + " is not " + kGraphVersion);
    CircuitGraph g;
    g.prompt = j.at("prompt").get<std::string>();
    g.token_ids = j.at("token_ids").get<std::vector<int>>();
    g.tokens = j.at("tokens").get<std::vector<std::string>>();
    g.target = j.at("target").get<int>();
    g.contrast = j.at("contrast").get<int>();
    g.tau_scale = j.at("tau_scale").get<double>();
    g.rho = j.at("rho").get<double>();
    g.ig_steps = j.at("ig_steps").get<int>();
    g.model_id = j.at("model_id").get<std::string>();
    g.n_layers = j.at("n_layers").get<int>();
    g.n_heads = j.at("n_heads").get<int>();
    g.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& n : j.at("nodes"))
      g.nodes.push_back({node_ref_from_json(n), n.at("token_str").get<std::string>(),
                         n.at("roles").get<std::vector<std::string>>(), n.at("seed_attribution").get<double>()});
    for (const auto& e : j.at("edges")) {
      CircuitEdge ce;
      ce.upstream = node_ref_from_json(e.at("upstream"));
      ce.downstream = node_ref_from_json(e.at("downstream"));
      ce.side = side_from_string(e.at("side").get<std::string>());
      ce.d = e.at("d").get<int>();
      ce.s = e.at("s").get<int>();
      ce.sv = e.at("sv").get<std::vector<int>>();
      ce.ig = e.at("ig").get<std::vector<double>>();
      for (const auto& v : e.at("vectors")) {
        auto xs = v.get<std::vector<double>>();
        ce.vectors.push_back(Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size())));
      }
      ce.weight_before = e.at("weight_before").get<double>();
      ce.weight_after = e.at("weight_after").get<double>();
      ce.tau = e.at("tau").get<double>();
      g.edges.push_back(std::move(ce));
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("circuit graph: ") + e.what());
  }
}

inline std::string graph_to_string(const CircuitGraph& g) { return graph_to_json(g).dump(2) + "\n"; }

inline void save_graph(const CircuitGraph& g, const std::filesystem::path& p) { detail::write_text(p, graph_to_string(g)); }

inline CircuitGraph load_graph(const std::filesystem::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, p.string() + ": " + e.what());
  }
  return graph_from_json(j);
}

// ---------------------------------------------------------------- views

namespace detail {

inline std::string escape_dot(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

inline std::string escape_html(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string sv_list(const std::vector<int>& sv) {
  std::string out;
  for (std::size_t i = 0; i < sv.size(); ++i) out += (i ? "," : "") + std::to_string(sv[i]);
  return out;
}

}  // namespace detail

/// Optional per-edge annotation, keyed by edge index.
using EdgeNotes = std::map<std::size_t, std::string>;

inline std::string graph_to_dot(const CircuitGraph& g, const EdgeNotes& notes = {}) {
  std::ostringstream os;
  os << "digraph circuit {\n  rankdir=BT;\n";
  for (const auto& n : g.nodes) {
    os << "  \"" << detail::escape_dot(n.ref.key()) << "\" [label=\"" << detail::escape_dot(n.ref.component.label())
       << "\\n" << detail::escape_dot(n.token_str) << " @" << n.ref.token << "\"";
    for (const auto& r : n.roles)
      if (r == "seed") os << ", shape=doubleoctagon";
    os << "];\n";
  }
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto& e = g.edges[i];
    os << "  \"" << detail::escape_dot(e.upstream.key()) << "\" -> \"" << detail::escape_dot(e.downstream.key())
       << "\" [label=\"" << to_string(e.side) << " " << e.d << "->" << e.s << " sv=" << detail::sv_list(e.sv);
    if (auto it = notes.find(i); it != notes.end()) os << "\\n" << detail::escape_dot(it->second);
    os << "\"];\n";
  }
  os << "}\n";
  return os.str();
}

/// Static single-file page: layered SVG drawing plus node and edge tables.
inline std::string graph_to_html(const CircuitGraph& g, const EdgeNotes& notes = {}) {
  using detail::escape_html;
  std::map<NodeRef, std::pair<double, double>> pos;
  int max_stage = 0;
  for (const auto& n : g.nodes) max_stage = std::max(max_stage, n.ref.component.stage());
  const double W = 1000.0, rowh = 70.0;
  std::map<int, std::vector<NodeRef>> rows;
  for (const auto& n : g.nodes) rows[n.ref.component.stage()].push_back(n.ref);
  for (auto& [stage, refs] : rows)
    for (std::size_t i = 0; i < refs.size(); ++i)
      pos[refs[i]] = {W * (static_cast<double>(i) + 1.0) / (static_cast<double>(refs.size()) + 1.0),
                      rowh * (max_stage - stage + 1)};
  const double H = rowh * (max_stage + 2);

  std::ostringstream os;
  os << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>circuit</title>\n"
     << "<style>body{font-family:sans-serif}table{border-collapse:collapse}td,th{border:1px solid #ccc;"
        "padding:2px 6px}text{font-size:11px}</style></head><body>\n";
  os << "<h2>" << escape_html(g.prompt) << "</h2>\n";
  os << "<p>target token id " << g.target << ", model " << escape_html(g.model_id) << ", tau scale " << g.tau_scale
     << ", " << g.nodes.size() << " nodes, " << g.edges.size() << " edges</p>\n";
  os << "<svg width=\"" << W << "\" height=\"" << H << "\" xmlns=\"http://www.w3.org/2000/svg\">\n";
  for (const auto& e : g.edges) {
    auto a = pos.find(e.upstream), b = pos.find(e.downstream);
    if (a == pos.end() || b == pos.end()) continue;
    os << "<line x1=\"" << a->second.first << "\" y1=\"" << a->second.second << "\" x2=\"" << b->second.first
       << "\" y2=\"" << b->second.second << "\" stroke=\"" << (e.side == Side::dst ? "#1f77b4" : "#d62728")
       << "\" stroke-opacity=\"0.6\"/>\n";
  }
  for (const auto& n : g.nodes) {
    const auto& p = pos[n.ref];
    os << "<circle cx=\"" << p.first << "\" cy=\"" << p.second << "\" r=\"6\" fill=\""
       << (n.ref.component.is_head() ? "#2ca02c" : "#7f7f7f") << "\"/><text x=\"" << p.first + 8 << "\" y=\""
       << p.second + 4 << "\">" << escape_html(n.ref.key()) << "</text>\n";
  }
  os << "</svg>\n<h3>Nodes</h3>\n<table><tr><th>component</th><th>token</th><th>roles</th></tr>\n";
  for (const auto& n : g.nodes) {
    std::string roles;
    for (const auto& r : n.roles) roles += (roles.empty() ? "" : " ") + r;
    os << "<tr><td>" << escape_html(n.ref.component.label()) << "</td><td>" << n.ref.token << " "
       << escape_html(n.token_str) << "</td><td>" << escape_html(roles) << "</td></tr>\n";
  }
  os << "</table>\n<h3>Edges</h3>\n<table><tr><th>upstream</th><th>downstream</th><th>side</th><th>d</th><th>s</th>"
        "<th>sv</th><th>note</th></tr>\n";
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto& e = g.edges[i];
    auto it = notes.find(i);
    os << "<tr><td>" << escape_html(e.upstream.key()) << "</td><td>" << escape_html(e.downstream.key()) << "</td><td>"
       << to_string(e.side) << "</td><td>" << e.d << "</td><td>" << e.s << "</td><td>" << detail::sv_list(e.sv)
       << "</td><td>" << (it == notes.end() ? "" : escape_html(it->second)) << "</td></tr>\n";
  }
  os << "</table>\n</body></html>\n";
  return os.str();
}

struct GraphStats {
  std::size_t nodes = 0;
  std::size_t edges = 0;
  std::size_t head_nodes = 0;
  double mean_sv_per_edge = 0.0;
  double rank1_fraction = 0.0;  // edges carrying a single channel
};

inline GraphStats graph_stats(const CircuitGraph& g) {
  GraphStats s;
  s.nodes = g.nodes.size();
  s.edges = g.edges.size();
  for (const auto& n : g.nodes) s.head_nodes += n.ref.component.is_head() ? 1 : 0;
  if (!g.edges.empty()) {
    double total = 0, ones = 0;
    for (const auto& e : g.edges) {
      total += static_cast<double>(e.sv.size());
      ones += e.sv.size() == 1 ? 1 : 0;
    }
    s.mean_sv_per_edge = total / static_cast<double>(g.edges.size());
    s.rank1_fraction = ones / static_cast<double>(g.edges.size());
  }
  return s;
}

}  // namespace accpp
