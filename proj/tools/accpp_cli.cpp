// accpp: command-line front end for tracing, clustering and signal interpretation.

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "accpp/analytics/circuits.hpp"
#include "accpp/analytics/clustering.hpp"
#include "accpp/analytics/ioi.hpp"
#include "accpp/analytics/signals.hpp"
#include "accpp/autointerp/client.hpp"
#include "accpp/autointerp/corpus.hpp"
#include "accpp/autointerp/http_client.hpp"
#include "accpp/autointerp/interpret.hpp"
#include "accpp/autointerp/retrieval.hpp"
#include "accpp/autointerp/stats.hpp"
#include "accpp/model/bundle.hpp"
#include "accpp/model/toy_vocab.hpp"
#include "accpp/pairing/pairing.hpp"
#include "accpp/trace/graph.hpp"
#include "accpp/trace/tracer.hpp"

namespace fs = std::filesystem;
using namespace accpp;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- plumbing

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::config:
    case ErrorCode::empty_input:
    case ErrorCode::out_of_range:
    case ErrorCode::causal_mask:
    case ErrorCode::granularity_mismatch: return 2;
    case ErrorCode::io:
    case ErrorCode::overwrite_refused: return 3;
    case ErrorCode::parse:
    case ErrorCode::schema_version:
    case ErrorCode::checksum:
    case ErrorCode::missing_tensor:
    case ErrorCode::shape_mismatch: return 4;
    case ErrorCode::transport: return 5;
    case ErrorCode::no_seed:
    case ErrorCode::missing_vectors:
    case ErrorCode::missing_layer: return 7;
    default: return 6;  // numerical or model conditions
  }
}

struct Common {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out;
  bool force = false;
};

/// Output directory with a manifest listing every file written.
class RunDir {
 public:
  RunDir(const Common& c, std::string command, std::vector<std::string> argv)
      : dir_(c.out), command_(std::move(command)), argv_(std::move(argv)), seed_(c.seed) {
    ACCPP_REQUIRE(!dir_.empty(), ErrorCode::config, "--out is required");
    if (fs::exists(dir_ / "run.json"))
      ACCPP_REQUIRE(c.force, ErrorCode::overwrite_refused, dir_.string() + " already holds a run (use --force)");
    fs::create_directories(dir_);
  }
  fs::path path(const std::string& name) const { return dir_ / name; }
  void write(const std::string& name, const std::string& text) {
    fs::create_directories((dir_ / name).parent_path());
    detail::write_text(dir_ / name, text);
    outputs_[name] = sha256_hex(std::string_view(text));
  }
  void finish(const json& summary = json::object()) {
    json files = json::array();
    for (const auto& [name, sha] : outputs_) files.push_back({{"file", name}, {"sha256", sha}});
    json m = {{"tool", "accpp"}, {"command", command_}, {"argv", argv_}, {"seed", seed_},
              {"outputs", files}, {"summary", summary}};
    detail::write_text(dir_ / "run.json", m.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  std::string command_;
  std::vector<std::string> argv_;
  std::uint64_t seed_;
  std::map<std::string, std::string> outputs_;
};

/// Runs fn(i) for i < n on up to `jobs` threads; the lowest-index failure is rethrown.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
  std::vector<std::exception_ptr> errs(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errs[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::max(1, jobs) && static_cast<std::size_t>(t) < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  ACCPP_REQUIRE(in, ErrorCode::io, "cannot open " + p.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  for (const auto& line : read_lines(p)) {
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse, p.string() + ": " + e.what());
    }
  }
  return out;
}

std::string to_jsonl(const std::vector<json>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.dump() + "\n";
  return s;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) {
      try {
        out.push_back(std::stoi(item));
      } catch (const std::exception&) {
        throw Error(ErrorCode::config, "bad integer '" + item + "' in list");
      }
    }
  return out;
}

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const json& j) {
  const auto x = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
}

// Prompts from plain lines, or the gen-ioi JSONL (text + answer).
struct PromptSpec {
  std::string text;
  std::string answer;  // empty: trace the model's own prediction
};

std::vector<PromptSpec> read_prompts(const fs::path& p) {
  std::vector<PromptSpec> out;
  if (p.extension() == ".jsonl") {
    for (const auto& j : read_jsonl(p)) out.push_back({j.at("text").get<std::string>(), j.value("answer", "")});
  } else {
    for (const auto& l : read_lines(p)) out.push_back({l, ""});
  }
  ACCPP_REQUIRE(!out.empty(), ErrorCode::empty_input, "no prompts in " + p.string());
  return out;
}

std::vector<fs::path> graph_files(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(in))
        if (e.path().extension() == ".json" && e.path().filename() != "run.json") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.emplace_back(in);
    }
  }
  ACCPP_REQUIRE(!out.empty(), ErrorCode::empty_input, "no graph files given");
  return out;
}

// ---------------------------------------------------------------- endpoints

struct EndpointOpts {
  std::string url = "http://localhost:8000/v1";
  std::string model = "interpreter";
  std::string api_key_env = "ACCPP_API_KEY";
  double temperature = 0.0;
  int retries = 2;
  int backoff_ms = 500;
  std::string record, replay;
};

void add_endpoint_opts(CLI::App* sub, EndpointOpts& e, const std::string& default_model) {
  e.model = default_model;
  sub->add_option("--endpoint", e.url,
                  "chat-completion base URL, or mock:fixed | mock:none | mock:yes | mock:coin")->capture_default_str();
  sub->add_option("--model", e.model, "model name sent to the endpoint")->capture_default_str();
  sub->add_option("--api-key-env", e.api_key_env, "env var holding the bearer token")->capture_default_str();
  sub->add_option("--temperature", e.temperature)->capture_default_str();
  sub->add_option("--retries", e.retries)->capture_default_str();
  sub->add_option("--backoff-ms", e.backoff_ms)->capture_default_str();
  auto* rec = sub->add_option("--record", e.record, "append endpoint exchanges to this JSONL log");
  sub->add_option("--replay", e.replay, "answer from a recorded JSONL log instead of the endpoint")->excludes(rec);
}

// Offline stand-ins, deterministic per request.
std::string mock_reply(const std::string& kind, const ChatRequest& req, std::uint64_t seed) {
  const bool judge = req.messages.front().content == std::string(kFuzzingScoringPrompt);
  if (!judge) {
    if (kind == "none") return "Nothing stands out.\n[interpretation]: no valid interpretation found";
    return "Mock reading of the marked tokens.\n[interpretation]: marked tokens share a mock pattern";
  }
  std::seed_seq sq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(std::hash<std::string>{}(req.messages.back().content))};
  std::mt19937_64 rng(sq);
  std::string out = "{\n";
  for (int k = 1; k <= kFuzzBatch; ++k) {
    const int v = kind == "yes" ? 1 : kind == "coin" ? static_cast<int>(rng() & 1u) : 0;
    out += std::to_string(k) + ": " + std::to_string(v) + (k < kFuzzBatch ? ",\n" : "\n");
  }
  return out + "}";
}

struct Endpoint {
  std::unique_ptr<ChatClient> base;
  std::unique_ptr<ChatClient> wrapper;
  EndpointCall call;
  ChatClient& client() { return wrapper ? *wrapper : *base; }
};

Endpoint make_endpoint(const EndpointOpts& e, std::uint64_t seed) {
  Endpoint ep;
  ep.call.model = e.model;
  ep.call.temperature = e.temperature;
  ACCPP_REQUIRE(e.retries >= 0 && e.backoff_ms >= 0, ErrorCode::config, "retries and backoff must be nonnegative");
  ep.call.retry = {e.retries, std::chrono::milliseconds(e.backoff_ms)};
  if (!e.replay.empty()) {
    ep.base = std::make_unique<ReplayChatClient>(e.replay);
    return ep;
  }
  if (e.url.rfind("mock:", 0) == 0) {
    const auto kind = e.url.substr(5);
    ACCPP_REQUIRE(kind == "fixed" || kind == "none" || kind == "yes" || kind == "coin", ErrorCode::config,
                  "unknown mock endpoint '" + e.url + "'");
    ep.base = std::make_unique<MockChatClient>([kind, seed](const ChatRequest& r) { return mock_reply(kind, r, seed); });
  } else {
    ep.base = std::make_unique<HttpChatClient>(EndpointConfig{e.url, e.api_key_env, 120});
  }
  if (!e.record.empty()) ep.wrapper = std::make_unique<RecordingChatClient>(*ep.base, e.record);
  return ep;
}

// ---------------------------------------------------------------- commands

struct SynthOpts {
  int layers = 2, heads = 2, d_model = 8, n_ctx = 64;
  std::string variant = "plain", norm = "frozen_ln", model_id = "toy";
  double init_std = 0.02, embed_std = -1.0, qk_gain = 1.0;
  bool sharp = false;
};

void cmd_synth(const Common& c, const SynthOpts& o, const std::vector<std::string>& argv) {
  SynthConfig cfg;
  cfg.n_layers = o.layers;
  cfg.n_heads = o.heads;
  cfg.d_model = o.d_model;
  cfg.n_ctx = o.n_ctx;
  cfg.variant = json(o.variant).get<AttnVariant>();
  cfg.norm_mode = json(o.norm).get<NormMode>();
  cfg.seed = c.seed;
  cfg.model_id = o.model_id;
  cfg.init_std = o.init_std;
  cfg.embed_std = o.embed_std;
  cfg.qk_gain = o.qk_gain;
  if (o.sharp) {
    // larger weights so attention is peaked enough to trace
    cfg.init_std = 1.0 / std::sqrt(static_cast<double>(o.d_model));
    cfg.embed_std = 1.0;
    cfg.qk_gain = 2.0;
  }
  ACCPP_REQUIRE(json(o.variant) == json(cfg.variant), ErrorCode::config, "unknown variant " + o.variant);
  ACCPP_REQUIRE(json(o.norm) == json(cfg.norm_mode), ErrorCode::config, "unknown norm mode " + o.norm);
  auto b = synth_toy_model(cfg);
  save_bundle(b, c.out, c.force);
  (void)argv;
  std::cout << "wrote " << c.out << " (" << o.variant << ", L=" << o.layers << ", H=" << o.heads << ", D=" << o.d_model
            << ")\n";
}

void cmd_validate(const std::string& bundle_dir) {
  auto b = load_bundle(bundle_dir);
  json heads = json::array();
  for (const auto& h : b.diagnostics.heads)
    heads.push_back({{"layer", h.layer}, {"head", h.head}, {"cond_W_Q", h.cond_W_Q}, {"cond_W_K_T", h.cond_W_K_T},
                     {"unsupported", h.unsupported}});
  json out = {{"model_id", b.arch.model_id}, {"variant", b.arch.variant}, {"all_clear", b.diagnostics.all_clear()},
              {"heads", heads}};
  std::cout << out.dump(2) << "\n";
}

struct TraceOpts {
  std::string bundle, prompt, prompts, target, contrast, formats = "json";
  double tau_scale = kDefaultTauScale, rho = kDefaultSeedRho;
  int ig_steps = kDefaultIgSteps;
  bool no_vectors = false, verify = false;
};

void cmd_trace(const Common& c, const TraceOpts& o, const std::vector<std::string>& argv) {
  TraceConfig cfg{TauPolicy(o.tau_scale), o.rho, -1, o.ig_steps, !o.no_vectors, c.seed};
  ACCPP_REQUIRE(o.ig_steps >= 1, ErrorCode::config, "--ig-steps must be positive");
  ACCPP_REQUIRE(o.rho > 0 && o.rho <= 1, ErrorCode::config, "--rho must be in (0, 1]");
  ACCPP_REQUIRE(o.prompt.empty() != o.prompts.empty(), ErrorCode::config, "give exactly one of --prompt or --prompts");
  std::set<std::string> formats;
  for (std::stringstream ss(o.formats); ss.good();) {
    std::string f;
    std::getline(ss, f, ',');
    ACCPP_REQUIRE(f == "json" || f == "dot" || f == "html", ErrorCode::config, "unknown format '" + f + "'");
    formats.insert(f);
  }
  const auto bundle = load_bundle(o.bundle);
  Tokenizer tok(bundle.vocab);
  if (!o.contrast.empty()) cfg.contrast = tok.id_of(o.contrast);
  std::vector<PromptSpec> prompts =
      o.prompt.empty() ? read_prompts(o.prompts) : std::vector<PromptSpec>{{o.prompt, o.target}};
  if (!o.target.empty())
    for (auto& p : prompts) p.answer = o.target;

  RunDir run(c, "trace", argv);
  std::vector<json> rows(prompts.size());
  std::vector<std::string> failures(prompts.size());
  std::mutex mu;
  parallel_for(prompts.size(), c.jobs, [&](std::size_t i) {
    const auto ids = tok.encode(prompts[i].text);
    int target;
    if (!prompts[i].answer.empty()) {
      target = tok.id_of(prompts[i].answer);
    } else {
      const auto cache = forward(bundle, ids);
      Eigen::Index t;
      cache.logits.row(cache.n_tokens() - 1).maxCoeff(&t);
      target = static_cast<int>(t);
    }
    char name[32];
    std::snprintf(name, sizeof name, "graph_%04zu", i);
    json row = {{"id", name}, {"prompt", prompts[i].text}, {"target", bundle.vocab[static_cast<std::size_t>(target)]}};
    try {
      const auto g = trace(bundle, ids, target, cfg, prompts[i].text);
      const auto st = graph_stats(g);
      row["nodes"] = st.nodes;
      row["edges"] = st.edges;
      if (o.verify) {
        const auto chk = verify_graph(bundle, g);
        row["verified"] = chk.ok();
        if (!chk.ok()) failures[i] = std::string(name) + ": " + chk.failures.front();
      }
      std::lock_guard lk(mu);
      if (formats.count("json")) run.write(std::string("graphs/") + name + ".json", graph_to_string(g));
      if (formats.count("dot")) run.write(std::string("graphs/") + name + ".dot", graph_to_dot(g));
      if (formats.count("html")) run.write(std::string("graphs/") + name + ".html", graph_to_html(g));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::no_seed) throw;
      row["skipped"] = "no-seed";
    }
    rows[i] = row;
  });
  std::string index = "id\tprompt\ttarget\tnodes\tedges\tstatus\n";
  std::size_t traced = 0, bad = 0;
  for (const auto& r : rows) {
    const bool skipped = r.contains("skipped");
    traced += !skipped;
    std::string status = skipped ? "no-seed" : "ok";
    if (r.value("verified", true) == false) {
      status = "unsound";
      ++bad;
    }
    index += r["id"].get<std::string>() + "\t" + r["prompt"].get<std::string>() + "\t" + r["target"].get<std::string>() +
             "\t" + (skipped ? "0" : std::to_string(r["nodes"].get<int>())) + "\t" +
             (skipped ? "0" : std::to_string(r["edges"].get<int>())) + "\t" + status + "\n";
  }
  run.write("index.tsv", index);
  run.finish({{"prompts", prompts.size()}, {"traced", traced}, {"unsound", bad}});
  std::cout << "traced " << traced << "/" << prompts.size() << " prompts into " << c.out << "\n";
  for (const auto& f : failures)
    if (!f.empty()) throw Error(ErrorCode::validation, "verification failed: " + f);
}

void cmd_calibrate(const Common& c, const std::string& bundle_dir, const std::string& prompts_file,
                   const std::vector<std::string>& argv) {
  const auto bundle = load_bundle(bundle_dir);
  Tokenizer tok(bundle.vocab);
  std::vector<std::vector<int>> ids;
  for (const auto& p : read_prompts(prompts_file)) ids.push_back(tok.encode(p.text));
  const auto cal = calibrate_tau(bundle, ids);
  RunDir run(c, "calibrate-tau", argv);
  std::ostringstream os;
  os.precision(17);
  os << "value\tecdf\n";
  const auto s = cal.ecdf.samples();
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i + 1 == s.size() || s[i + 1] != s[i]) os << s[i] << '\t' << cal.ecdf.query(s[i]) << '\n';
  run.write("ecdf.tsv", os.str());
  json summary = {{"n_prompts", cal.n_prompts},
                  {"n_samples", s.size()},
                  {"suggested_scale", cal.suggested_scale},
                  {"fraction_below_default", cal.ecdf.query(kDefaultTauScale)},
                  {"quantiles", {{"0.5", cal.ecdf.quantile(0.5)}, {"0.9", cal.ecdf.quantile(0.9)},
                                 {"0.99", cal.ecdf.quantile(0.99)}}}};
  run.write("tau.json", summary.dump(2) + "\n");
  run.finish(summary);
  std::cout << "suggested tau scale " << cal.suggested_scale << " from " << s.size() << " attention weights\n";
}

void cmd_gen_ioi(const Common& c, const std::string& names, const std::string& places, const std::string& objects, int n,
                 const std::vector<std::string>& argv) {
  IoiWordLists w{default_names(), default_places(), default_objects()};
  if (!names.empty()) w.names = read_lines(names);
  if (!places.empty()) w.places = read_lines(places);
  if (!objects.empty()) w.objects = read_lines(objects);
  const auto ds = gen_ioi_dataset(w, n, c.seed);
  std::vector<json> rows;
  for (const auto& p : ds)
    rows.push_back({{"text", p.text}, {"answer", p.answer}, {"name_a", p.name_a}, {"name_b", p.name_b},
                    {"place", p.place}, {"object", p.object}, {"order", to_string(p.order)},
                    {"template", p.template_id}});
  RunDir run(c, "gen-ioi", argv);
  run.write("ioi.jsonl", to_jsonl(rows));
  run.finish({{"prompts", rows.size()}});
  std::cout << "wrote " << rows.size() << " prompts\n";
}

struct Loaded {
  std::vector<std::string> ids;
  std::vector<CircuitGraph> graphs;
};

Loaded load_graphs(const std::vector<std::string>& inputs) {
  Loaded l;
  for (const auto& f : graph_files(inputs)) {
    l.ids.push_back(f.stem().string());
    l.graphs.push_back(load_graph(f));
  }
  return l;
}

void cmd_cluster(const Common& c, const std::vector<std::string>& inputs, const std::string& gran, int k, double height,
                 const std::vector<std::string>& argv) {
  ACCPP_REQUIRE((k > 0) != (height >= 0), ErrorCode::config, "give exactly one of --k or --height");
  const auto g = granularity_from_string(gran);
  auto l = load_graphs(inputs);
  std::vector<ComponentVector> vecs;
  for (const auto& gr : l.graphs) vecs.push_back(component_vector(gr, g));
  const Matrix D = jaccard_matrix(vecs, c.jobs);
  const auto dg = average_linkage(D);
  const auto labels = k > 0 ? cut_k(dg, k) : cut_height(dg, height);
  RunDir run(c, "cluster", argv);
  run.write("distances.tsv", distance_matrix_tsv(l.ids, D));
  run.write("assignments.tsv", assignments_tsv(l.ids, labels));
  run.write("dendrogram.json", dendrogram_to_json(dg, l.ids).dump(2) + "\n");
  const int n_clusters = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  run.finish({{"graphs", l.ids.size()}, {"clusters", n_clusters}, {"granularity", gran}});
  std::cout << l.ids.size() << " graphs in " << n_clusters << " clusters\n";
}

std::map<std::string, std::string> read_two_column(const fs::path& p) {
  std::map<std::string, std::string> out;
  auto lines = read_lines(p);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto tab = lines[i].find('\t');
    ACCPP_REQUIRE(tab != std::string::npos, ErrorCode::parse, p.string() + ": expected two tab-separated columns");
    out[lines[i].substr(0, tab)] = lines[i].substr(tab + 1);
  }
  return out;
}

void cmd_represent(const Common& c, const std::vector<std::string>& inputs, const std::string& gran,
                   const std::string& groups_file, const std::vector<std::string>& argv) {
  auto l = load_graphs(inputs);
  const auto g = granularity_from_string(gran);
  std::vector<ComponentVector> vecs;
  for (const auto& gr : l.graphs) vecs.push_back(component_vector(gr, g));
  const Matrix D = jaccard_matrix(vecs, c.jobs);
  const auto assign = read_two_column(groups_file);
  std::map<std::string, std::vector<int>> groups;
  for (std::size_t i = 0; i < l.ids.size(); ++i) {
    auto it = assign.find(l.ids[i]);
    ACCPP_REQUIRE(it != assign.end(), ErrorCode::config, "graph " + l.ids[i] + " has no group in " + groups_file);
    groups[it->second].push_back(static_cast<int>(i));
  }
  std::string reps = "group\tsize\tmedoid\n";
  std::map<std::string, std::vector<int>> multi;
  for (const auto& [name, members] : groups) {
    reps += name + "\t" + std::to_string(members.size()) + "\t" + l.ids[static_cast<std::size_t>(medoid(members, D))] + "\n";
    if (members.size() >= 2) multi[name] = members;
  }
  RunDir run(c, "represent", argv);
  run.write("representatives.tsv", reps);
  if (!multi.empty() && l.ids.size() >= 2) {
    std::ostringstream os;
    os << "group\tsize\tmean_within\tnormalized\n";
    for (const auto& w : normalized_within_distance(multi, D))
      os << w.group << '\t' << w.size << '\t' << w.mean_within << '\t' << w.normalized << '\n';
    run.write("within.tsv", os.str());
  }
  run.finish({{"groups", groups.size()}, {"singletons", groups.size() - multi.size()}});
  std::cout << groups.size() << " representatives\n";
}

void cmd_compare(const Common& c, const std::string& a, const std::string& b, const std::vector<std::string>& argv) {
  const auto sim = signal_similarity(load_graph(a), load_graph(b));
  RunDir run(c, "compare-signals", argv);
  run.write("sim_dst.tsv", similarity_tsv(sim.dst));
  run.write("sim_src.tsv", similarity_tsv(sim.src));
  run.finish({{"dst_rows", sim.dst.rows.size()}, {"dst_cols", sim.dst.cols.size()},
              {"src_rows", sim.src.rows.size()}, {"src_cols", sim.src.cols.size()}});
  std::cout << "dst " << sim.dst.rows.size() << "x" << sim.dst.cols.size() << ", src " << sim.src.rows.size() << "x"
            << sim.src.cols.size() << "\n";
}

json pair_json(const std::string& id, const PairResult& r, const std::string& origin) {
  json j = {{"signal", id}, {"layer", r.pair.layer}, {"head", r.pair.head}, {"origin", origin},
            {"sv", r.pair.sv}, {"degenerate", r.degenerate}};
  j["p"] = r.pair.p.size() ? vec_json(r.pair.p) : json();
  j["q"] = r.pair.q.size() ? vec_json(r.pair.q) : json();
  return j;
}

void cmd_pair(const Common& c, const std::string& bundle_dir, const std::string& graph_file, int layer, int head,
              const std::string& sv, const std::string& side, const std::vector<std::string>& argv) {
  const auto bundle = load_bundle(bundle_dir);
  std::vector<json> rows;
  if (!graph_file.empty()) {
    // one signal per edge: the edge's summed vectors on its side
    const auto g = load_graph(graph_file);
    ACCPP_REQUIRE(g.has_vectors(), ErrorCode::missing_vectors, "graph has no embedded signal vectors");
    std::map<std::pair<int, int>, UnifiedHead> heads;
    for (std::size_t i = 0; i < g.edges.size(); ++i) {
      const auto& e = g.edges[i];
      const auto key = std::make_pair(e.downstream.component.layer, e.downstream.component.head);
      if (!heads.count(key)) heads.emplace(key, build_unified_head(bundle, key.first, key.second));
      Vector v = Vector::Zero(bundle.arch.d_model);
      for (const auto& x : e.vectors) v += x;
      if (v.norm() == 0.0) continue;
      const auto& uh = heads.at(key);
      const auto r = e.side == Side::dst ? pair_from_destination(uh, v) : pair_from_source(uh, v);
      rows.push_back(pair_json("e" + std::to_string(i) + ":" + e.upstream.key() + ">" + e.downstream.key() + ":" +
                                   to_string(e.side),
                               r, to_string(e.side)));
    }
  } else {
    const auto uh = build_unified_head(bundle, layer, head);
    const auto ks = parse_int_list(sv);
    ACCPP_REQUIRE(!ks.empty(), ErrorCode::config, "give --graph or --sv");
    const bool dst = side_from_string(side) == Side::dst;
    Vector v = Vector::Zero(bundle.arch.d_model);
    for (int k : ks) {
      ACCPP_REQUIRE(k >= 0 && k < uh.svd.sigma.size(), ErrorCode::out_of_range, "sv index out of range");
      v += dst ? uh.svd.U.col(k) : uh.svd.V.col(k);
    }
    const auto r = dst ? pair_from_destination(uh, v) : pair_from_source(uh, v);
    rows.push_back(pair_json("attn." + std::to_string(layer) + "." + std::to_string(head) + "#" + sv, r, side));
  }
  RunDir run(c, "pair-signal", argv);
  run.write("pairs.jsonl", to_jsonl(rows));
  std::size_t degenerate = 0;
  for (const auto& r : rows) degenerate += r["degenerate"].get<bool>();
  run.finish({{"pairs", rows.size()}, {"degenerate", degenerate}});
  std::cout << rows.size() << " signal pairs (" << degenerate << " degenerate)\n";
}

void cmd_build_corpus(const Common& c, const std::string& bundle_dir, const std::string& corpus, const std::string& layers) {
  const auto bundle = load_bundle(bundle_dir);
  auto ls = parse_int_list(layers);
  if (ls.empty())
    for (int l = 0; l < bundle.arch.n_layers; ++l) ls.push_back(l);
  const auto store = build_corpus_cache(bundle, read_corpus_lines(corpus), ls);
  ACCPP_REQUIRE(store.size() > 0, ErrorCode::empty_input, "no document is 32 tokens long");
  save_corpus(store, c.out, c.force);
  std::cout << store.size() << " chunks cached for " << ls.size() << " layers\n";
}

json context_json(const ScoredContext& s) {
  return {{"chunk", s.chunk}, {"d", s.d}, {"s", s.s}, {"score", s.score}, {"text", s.text}};
}

std::vector<ScoredContext> contexts_from_json(const json& a) {
  std::vector<ScoredContext> out;
  for (const auto& x : a)
    out.push_back({x.at("chunk").get<int>(), x.at("d").get<int>(), x.at("s").get<int>(), x.at("score").get<double>(),
                   x.at("text").get<std::string>()});
  return out;
}

void cmd_retrieve(const Common& c, const std::string& bundle_dir, const std::string& corpus_dir,
                  const std::string& pairs_file, int top_k, int n_random, const std::vector<std::string>& argv) {
  ACCPP_REQUIRE(top_k >= 1 && n_random >= 0, ErrorCode::config, "--top-k must be positive");
  const auto bundle = load_bundle(bundle_dir);
  const auto store = load_corpus(corpus_dir, bundle.vocab);
  ACCPP_REQUIRE(store.d_model == bundle.arch.d_model, ErrorCode::shape_mismatch, "corpus width differs from the model");
  const auto pairs = read_jsonl(pairs_file);
  std::vector<json> rows(pairs.size());
  parallel_for(pairs.size(), c.jobs, [&](std::size_t i) {
    const auto& pj = pairs[i];
    if (pj.at("degenerate").get<bool>()) return;
    const auto uh = build_unified_head(bundle, pj.at("layer").get<int>(), pj.at("head").get<int>());
    const Vector p = json_vec(pj.at("p")), q = json_vec(pj.at("q"));
    const auto top = score_contexts(store, uh, p, q, static_cast<std::size_t>(top_k));
    const auto rnd = sample_random_contexts(store, uh, p, q, top, static_cast<std::size_t>(n_random), c.seed + i);
    json t = json::array(), r = json::array();
    for (const auto& s : top) t.push_back(context_json(s));
    for (const auto& s : rnd) r.push_back(context_json(s));
    rows[i] = {{"signal", pj.at("signal")}, {"layer", pj.at("layer")}, {"head", pj.at("head")}, {"top", t}, {"random", r}};
  });
  std::vector<json> kept;
  for (auto& r : rows)
    if (!r.is_null()) kept.push_back(std::move(r));
  RunDir run(c, "retrieve", argv);
  run.write("contexts.jsonl", to_jsonl(kept));
  run.finish({{"signals", kept.size()}, {"skipped_degenerate", pairs.size() - kept.size()}});
  std::cout << "retrieved contexts for " << kept.size() << " signals\n";
}

void cmd_interpret(const Common& c, const std::string& contexts_file, const EndpointOpts& eo,
                   const std::vector<std::string>& argv) {
  const auto rows = read_jsonl(contexts_file);
  auto ep = make_endpoint(eo, c.seed);
  std::vector<json> out(rows.size());
  parallel_for(rows.size(), c.jobs, [&](std::size_t i) {
    auto rec = request_interpretation(ep.client(), contexts_from_json(rows[i].at("top")), ep.call,
                                      rows[i].at("signal").get<std::string>());
    auto j = interpretation_to_json(rec);
    j["layer"] = rows[i].at("layer");
    j["head"] = rows[i].at("head");
    out[i] = j;
  });
  std::size_t none = 0;
  for (const auto& j : out) none += j["none_found"].get<bool>();
  RunDir run(c, "interpret", argv);
  run.write("interpretations.jsonl", to_jsonl(out));
  run.finish({{"signals", out.size()}, {"none_found", none}});
  std::cout << out.size() << " interpretations (" << none << " with none found)\n";
}

void cmd_score(const Common& c, const std::string& contexts_file, const std::string& interp_file, const EndpointOpts& eo,
               const std::vector<std::string>& argv) {
  std::map<std::string, json> ctx;
  for (auto& j : read_jsonl(contexts_file)) ctx[j.at("signal").get<std::string>()] = j;
  const auto interps = read_jsonl(interp_file);
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < interps.size(); ++i)
    if (!interps[i].at("none_found").get<bool>()) todo.push_back(i);
  auto ep = make_endpoint(eo, c.seed);
  std::vector<FuzzResult> results(interps.size());
  parallel_for(todo.size(), c.jobs, [&](std::size_t t) {
    const std::size_t i = todo[t];
    const auto sig = interps[i].at("signal").get<std::string>();
    auto it = ctx.find(sig);
    ACCPP_REQUIRE(it != ctx.end(), ErrorCode::config, "no contexts for signal " + sig);
    results[i] = fuzz_score(ep.client(), interps[i].at("text").get<std::string>(),
                            contexts_from_json(it->second.at("top")), contexts_from_json(it->second.at("random")),
                            c.seed + i, ep.call, sig);
  });
  // signals without an interpretation stay in the table with p = 1, so the
  // interpretable fraction keeps them in its denominator
  std::vector<json> fz;
  std::vector<FuzzResult> scored;
  std::ostringstream os;
  os.precision(17);
  os << "signal\tlayer\thead\tnone_found\taccuracy\tprecision\trecall\tfisher_p\n";
  auto num = [&os](double x) {
    if (std::isnan(x)) os << "nan";
    else os << x;
  };
  for (std::size_t i = 0; i < interps.size(); ++i) {
    const bool none = interps[i].at("none_found").get<bool>();
    os << interps[i].at("signal").get<std::string>() << '\t' << interps[i].at("layer").get<int>() << '\t'
       << interps[i].at("head").get<int>() << '\t' << (none ? 1 : 0) << '\t';
    if (none) {
      os << "nan\tnan\tnan\t1\n";
      continue;
    }
    const auto& r = results[i];
    fz.push_back(fuzz_to_json(r));
    scored.push_back(r);
    num(r.accuracy);
    os << '\t';
    num(r.precision);
    os << '\t';
    num(r.recall);
    os << '\t' << r.fisher_p << '\n';
  }
  RunDir run(c, "score", argv);
  run.write("fuzz.jsonl", to_jsonl(fz));
  run.write("verdicts.tsv", verdicts_tsv(scored));
  run.write("scores.tsv", os.str());
  run.finish({{"signals", interps.size()}, {"scored", scored.size()}, {"none_found", interps.size() - scored.size()}});
  std::cout << "scored " << scored.size() << " of " << interps.size() << " signals\n";
}

void cmd_fdr(const Common& c, const std::string& scores_file, double q, const std::string& group_by,
             const std::vector<std::string>& argv) {
  const auto lines = read_lines(scores_file);
  ACCPP_REQUIRE(!lines.empty(), ErrorCode::empty_input, "empty scores table");
  std::vector<std::string> header;
  for (std::stringstream ss(lines[0]); ss.good();) {
    std::string h;
    std::getline(ss, h, '\t');
    header.push_back(h);
  }
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    ACCPP_REQUIRE(it != header.end(), ErrorCode::parse, scores_file + " has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto pc = col(header.size() == 1 ? header[0] : "fisher_p");
  const std::size_t gc = group_by == "none" ? 0 : col(group_by);
  std::vector<std::vector<std::string>> cells;
  std::vector<double> p;
  std::vector<std::string> groups;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::vector<std::string> row;
    for (std::stringstream ss(lines[i]); ss.good();) {
      std::string x;
      std::getline(ss, x, '\t');
      row.push_back(x);
    }
    ACCPP_REQUIRE(row.size() == header.size(), ErrorCode::parse, scores_file + ": ragged row " + std::to_string(i));
    try {
      p.push_back(std::stod(row[pc]));
    } catch (const std::exception&) {
      throw Error(ErrorCode::parse, "bad p-value '" + row[pc] + "'");
    }
    groups.push_back(group_by == "none" ? "all" : row[gc]);
    cells.push_back(row);
  }
  const auto r = bh_fdr(p, q, groups);
  std::string out = lines[0] + "\treject\n";
  for (std::size_t i = 0; i < cells.size(); ++i) out += lines[i + 1] + "\t" + (r.reject[i] ? "1" : "0") + "\n";
  json summary = {{"q", q}, {"group_by", group_by}, {"fraction", r.fraction}, {"groups", json::object()}};
  for (const auto& [g, s] : r.groups)
    summary["groups"][g] = {{"total", s.total}, {"rejected", s.rejected}, {"fraction", s.fraction}};
  RunDir run(c, "fdr", argv);
  run.write("fdr.tsv", out);
  run.write("summary.json", summary.dump(2) + "\n");
  run.finish(summary);
  std::cout << "interpretable fraction " << r.fraction << " at q=" << q << "\n";
}

void cmd_export(const Common& c, const std::string& graph_file, const std::string& format, const std::string& notes_file,
                const std::vector<std::string>& argv) {
  const auto g = load_graph(graph_file);
  EdgeNotes notes;
  if (!notes_file.empty())
    for (const auto& [k, v] : read_two_column(notes_file)) {
      try {
        notes[std::stoul(k)] = v;
      } catch (const std::exception&) {
        throw Error(ErrorCode::parse, "bad edge index '" + k + "' in notes");
      }
    }
  const auto stem = fs::path(graph_file).stem().string();
  RunDir run(c, "export", argv);
  if (format == "dot") run.write(stem + ".dot", graph_to_dot(g, notes));
  else if (format == "html") run.write(stem + ".html", graph_to_html(g, notes));
  else if (format == "json") run.write(stem + ".json", graph_to_string(g));
  else if (format == "stats") {
    const auto s = graph_stats(g);
    run.write(stem + ".stats.json", json{{"nodes", s.nodes}, {"edges", s.edges}, {"head_nodes", s.head_nodes},
                                         {"mean_sv_per_edge", s.mean_sv_per_edge}, {"rank1_fraction", s.rank1_fraction}}
                                        .dump(2) + "\n");
  } else {
    throw Error(ErrorCode::config, "unknown format '" + format + "' (dot, html, json, stats)");
  }
  run.finish();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"accpp: trace attention-mediated circuits and interpret their signals"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file with option defaults");
  Common common;
  auto add_common = [&common](CLI::App* s, bool needs_out = true) {
    s->add_option("--seed", common.seed, "random seed")->capture_default_str();
    s->add_option("--jobs", common.jobs, "worker threads")->capture_default_str()->check(CLI::Range(1, 1024));
    if (needs_out) s->add_option("--out", common.out, "output directory")->required();
    s->add_flag("--force", common.force, "overwrite an existing output directory");
  };

  SynthOpts so;
  auto* synth = app.add_subcommand("synth-model", "write a seeded Gaussian toy bundle");
  add_common(synth);
  synth->add_option("--layers", so.layers)->capture_default_str();
  synth->add_option("--heads", so.heads)->capture_default_str();
  synth->add_option("--d-model", so.d_model)->capture_default_str();
  synth->add_option("--n-ctx", so.n_ctx)->capture_default_str();
  synth->add_option("--variant", so.variant)->check(CLI::IsMember({"plain", "bias", "rope", "rope_bias"}))->capture_default_str();
  synth->add_option("--norm", so.norm)->check(CLI::IsMember({"none", "frozen_ln"}))->capture_default_str();
  synth->add_option("--model-id", so.model_id)->capture_default_str();
  synth->add_option("--init-std", so.init_std)->capture_default_str();
  synth->add_option("--embed-std", so.embed_std)->capture_default_str();
  synth->add_option("--qk-gain", so.qk_gain)->capture_default_str();
  synth->add_flag("--sharp", so.sharp, "weight scales that give peaked attention");

  std::string bundle;
  auto* validate = app.add_subcommand("validate", "load a bundle and print conditioning diagnostics");
  validate->add_option("--bundle", bundle)->required();

  TraceOpts to;
  auto* tr = app.add_subcommand("trace", "trace circuits for one prompt or a prompt file");
  add_common(tr);
  tr->add_option("--bundle", to.bundle)->required();
  tr->add_option("--prompt", to.prompt);
  tr->add_option("--prompts", to.prompts, "one prompt per line, or gen-ioi JSONL");
  tr->add_option("--target", to.target, "target token (default: JSONL answer or the model's prediction)");
  tr->add_option("--contrast", to.contrast, "contrast token for the seed logit difference");
  tr->add_option("--tau-scale", to.tau_scale)->capture_default_str();
  tr->add_option("--rho", to.rho)->capture_default_str();
  tr->add_option("--ig-steps", to.ig_steps)->capture_default_str();
  tr->add_option("--formats", to.formats, "comma list of json, dot, html")->capture_default_str();
  tr->add_flag("--no-vectors", to.no_vectors, "omit signal vectors from graph files");
  tr->add_flag("--verify", to.verify, "replay every edge and fail on unsound graphs");

  std::string prompts_file;
  auto* cal = app.add_subcommand("calibrate-tau", "ECDF of (d+1) A_ds over a prompt set");
  add_common(cal);
  cal->add_option("--bundle", bundle)->required();
  cal->add_option("--prompts", prompts_file)->required();

  std::string names, places, objects;
  int n_per_cell = 1;
  auto* ioi = app.add_subcommand("gen-ioi", "generate IOI prompts from the fifteen templates");
  add_common(ioi);
  ioi->add_option("--n", n_per_cell, "prompts per (template, order) cell")->capture_default_str();
  ioi->add_option("--names", names, "file with one name per line");
  ioi->add_option("--places", places);
  ioi->add_option("--objects", objects);

  std::vector<std::string> graphs;
  std::string granularity = "edge";
  int k = 0;
  double height = -1.0;
  auto* cl = app.add_subcommand("cluster", "Jaccard distances and average-linkage clustering of graphs");
  add_common(cl);
  cl->add_option("--graphs", graphs, "graph files or directories")->required();
  cl->add_option("--granularity", granularity)->check(CLI::IsMember({"node", "edge", "edge_sv"}))->capture_default_str();
  cl->add_option("--k", k, "cut into k clusters");
  cl->add_option("--height", height, "cut at this merge height");

  std::string groups_file;
  auto* rep = app.add_subcommand("represent", "medoid and normalized within-distance per group");
  add_common(rep);
  rep->add_option("--graphs", graphs)->required();
  rep->add_option("--granularity", granularity)->check(CLI::IsMember({"node", "edge", "edge_sv"}))->capture_default_str();
  rep->add_option("--groups", groups_file, "TSV id<TAB>group, e.g. cluster assignments.tsv")->required();

  std::string ga, gb;
  auto* cmp = app.add_subcommand("compare-signals", "cosine similarity of signal summaries across two graphs");
  add_common(cmp);
  cmp->add_option("--a", ga)->required();
  cmp->add_option("--b", gb)->required();

  std::string graph_file, sv, side = "dst";
  int layer = 0, head = 0;
  auto* pr = app.add_subcommand("pair-signal", "optimal partner direction for signals");
  add_common(pr);
  pr->add_option("--bundle", bundle)->required();
  pr->add_option("--graph", graph_file, "pair every edge's signal in a traced graph");
  pr->add_option("--layer", layer);
  pr->add_option("--head", head);
  pr->add_option("--sv", sv, "comma list of channel indices");
  pr->add_option("--side", side)->check(CLI::IsMember({"dst", "src"}))->capture_default_str();

  std::string corpus, layers_list;
  auto* bc = app.add_subcommand("build-corpus", "cache 32-token chunk residuals");
  add_common(bc);
  bc->add_option("--bundle", bundle)->required();
  bc->add_option("--corpus", corpus, "text file, one document per line")->required();
  bc->add_option("--layers", layers_list, "comma list (default: all)");

  std::string corpus_dir, pairs_file;
  int top_k = 40, n_random = kFuzzPerSide;
  auto* rt = app.add_subcommand("retrieve", "top contexts and random controls per signal pair");
  add_common(rt);
  rt->add_option("--bundle", bundle)->required();
  rt->add_option("--corpus-dir", corpus_dir)->required();
  rt->add_option("--pairs", pairs_file)->required();
  rt->add_option("--top-k", top_k)->capture_default_str();
  rt->add_option("--random", n_random)->capture_default_str();

  std::string contexts_file, interp_file;
  EndpointOpts interp_ep, judge_ep;
  auto* in = app.add_subcommand("interpret", "ask the interpreter endpoint for one description per signal");
  add_common(in);
  in->add_option("--contexts", contexts_file)->required();
  add_endpoint_opts(in, interp_ep, "interpreter");

  auto* sc = app.add_subcommand("score", "fuzzing score of interpretations with a judge endpoint");
  add_common(sc);
  sc->add_option("--contexts", contexts_file)->required();
  sc->add_option("--interpretations", interp_file)->required();
  add_endpoint_opts(sc, judge_ep, "judge");

  std::string scores_file, group_by = "layer";
  double q = 0.05;
  auto* fd = app.add_subcommand("fdr", "Benjamini-Hochberg flags and interpretable fraction");
  add_common(fd);
  fd->add_option("--scores", scores_file, "TSV with a fisher_p column (or a single p column)")->required();
  fd->add_option("--q", q)->capture_default_str();
  fd->add_option("--group-by", group_by, "column to group by, or none")->capture_default_str();

  std::string format = "dot", notes_file;
  auto* ex = app.add_subcommand("export", "render a graph file");
  add_common(ex);
  ex->add_option("--graph", graph_file)->required();
  ex->add_option("--format", format, "dot, html, json or stats")->capture_default_str();
  ex->add_option("--notes", notes_file, "TSV edge-index<TAB>note shown on edges");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "accpp: usage: " << e.what() << "\n";
    return 2;
  }

  const std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (*synth) cmd_synth(common, so, args);
    else if (*validate) cmd_validate(bundle);
    else if (*tr) cmd_trace(common, to, args);
    else if (*cal) cmd_calibrate(common, bundle, prompts_file, args);
    else if (*ioi) cmd_gen_ioi(common, names, places, objects, n_per_cell, args);
    else if (*cl) cmd_cluster(common, graphs, granularity, k, height, args);
    else if (*rep) cmd_represent(common, graphs, granularity, groups_file, args);
    else if (*cmp) cmd_compare(common, ga, gb, args);
    else if (*pr) cmd_pair(common, bundle, graph_file, layer, head, sv, side, args);
    else if (*bc) cmd_build_corpus(common, bundle, corpus, layers_list);
    else if (*rt) cmd_retrieve(common, bundle, corpus_dir, pairs_file, top_k, n_random, args);
    else if (*in) cmd_interpret(common, contexts_file, interp_ep, args);
    else if (*sc) cmd_score(common, contexts_file, interp_file, judge_ep, args);
    else if (*fd) cmd_fdr(common, scores_file, q, group_by, args);
    else if (*ex) cmd_export(common, graph_file, format, notes_file, args);
  } catch (const Error& e) {
    std::cerr << "accpp: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "accpp: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
