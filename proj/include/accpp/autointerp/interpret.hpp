#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "accpp/autointerp/client.hpp"
#include "accpp/autointerp/prompts.hpp"
#include "accpp/autointerp/retrieval.hpp"
#include "accpp/autointerp/stats.hpp"
#include "accpp/core/error.hpp"

namespace accpp {

inline constexpr const char* kNoInterpretation = "no valid interpretation found";
inline constexpr const char* kInterpretationTag = "[interpretation]:";

struct EndpointCall {
  std::string model = "interpreter";
  double temperature = 0.0;
  RetryPolicy retry;
};

struct InterpretationRecord {
  std::string signal;  // caller's reference for the signal pair
  std::string text;
  bool none_found = false;
  std::string model;
  std::string raw;
};

namespace detail {

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string numbered_examples(const std::vector<std::string>& texts) {
  std::ostringstream os;
  for (std::size_t i = 0; i < texts.size(); ++i) os << (i + 1) << ". " << texts[i] << "\n";
  return os.str();
}

}  // namespace detail

/// Reads the final nonempty line's "[interpretation]:" tag. Throws parse when
/// the tag is missing.
inline InterpretationRecord parse_interpretation(const std::string& raw) {
  std::istringstream is(raw);
  std::string line, last;
  while (std::getline(is, line))
    if (!detail::trim(line).empty()) last = detail::trim(line);
  InterpretationRecord r;
  r.raw = raw;
  if (last.rfind(kInterpretationTag, 0) != 0) {
    ACCPP_REQUIRE(detail::lower(raw).find(kNoInterpretation) != std::string::npos, ErrorCode::parse,
                  "response has no final '[interpretation]:' line");
    r.none_found = true;
    return r;
  }
  r.text = detail::trim(last.substr(std::string(kInterpretationTag).size()));
  // tolerate quoting or a trailing period around the refusal phrase
  if (detail::lower(r.text).find(kNoInterpretation) != std::string::npos) {
    r.none_found = true;
    r.text.clear();
  }
  ACCPP_REQUIRE(r.none_found || !r.text.empty(), ErrorCode::parse, "empty interpretation");
  return r;
}

inline ChatRequest interpretation_request(const std::vector<ScoredContext>& contexts, const EndpointCall& call) {
  std::vector<std::string> texts;
  for (const auto& c : contexts) texts.push_back(c.text);
  return {call.model,
          {{"system", std::string(kInterpretationSystemPrompt)},
           {"user", "Text examples:\n" + detail::numbered_examples(texts)}},
          call.temperature};
}

/// Asks the interpreter for one description of the top contexts.
inline InterpretationRecord request_interpretation(ChatClient& client, const std::vector<ScoredContext>& contexts,
                                                   const EndpointCall& call = {}, const std::string& signal = {}) {
  ACCPP_REQUIRE(!contexts.empty(), ErrorCode::empty_input, "no contexts to interpret");
  const auto req = interpretation_request(contexts, call);
  auto rec = with_retries(call.retry, [&] { return parse_interpretation(client.complete(req)); });
  rec.signal = signal;
  rec.model = call.model;
  return rec;
}

// ---------------------------------------------------------------- fuzzing

inline constexpr int kFuzzPerSide = 20;
inline constexpr int kFuzzBatch = 10;

struct FuzzVerdict {
  ScoredContext context;
  bool is_top = false;
  int judge = 0;  // 1 = accepted
  int batch = 0, position = 0;  // position is 1-based within the batch
};

struct FuzzResult {
  std::string signal;
  std::vector<FuzzVerdict> verdicts;
  long long tp = 0, fn = 0, fp = 0, tn = 0;
  double accuracy = 0.0, precision = 0.0, recall = 0.0;  // precision is NaN when nothing was accepted
  double fisher_p = 1.0;
};

/// Parses the judge's {k: 0/1} map; keys must be exactly 1..n.
inline std::vector<int> parse_verdicts(const std::string& raw, int n = kFuzzBatch) {
  const auto close = raw.rfind('}');
  const auto open = close == std::string::npos ? std::string::npos : raw.rfind('{', close);
  ACCPP_REQUIRE(open != std::string::npos, ErrorCode::parse, "judge response has no {...} verdict map");
  const std::string body = raw.substr(open + 1, close - open - 1);
  static const std::regex entry(R"(["']?(\d+)["']?\s*:\s*["']?([01])["']?)");
  std::vector<int> out(static_cast<std::size_t>(n), -1);
  int seen = 0;
  for (std::sregex_iterator it(body.begin(), body.end(), entry), end; it != end; ++it) {
    const int k = std::stoi((*it)[1].str());
    ACCPP_REQUIRE(k >= 1 && k <= n, ErrorCode::parse, "verdict key " + std::to_string(k) + " outside 1.." + std::to_string(n));
    ACCPP_REQUIRE(out[static_cast<std::size_t>(k - 1)] < 0, ErrorCode::parse, "duplicate verdict key " + std::to_string(k));
    out[static_cast<std::size_t>(k - 1)] = (*it)[2].str() == "1" ? 1 : 0;
    ++seen;
  }
  ACCPP_REQUIRE(seen == n, ErrorCode::parse,
                "verdict map has " + std::to_string(seen) + " entries, expected " + std::to_string(n));
  return out;
}

inline void fill_metrics(FuzzResult& r) {
  r.tp = r.fn = r.fp = r.tn = 0;
  for (const auto& v : r.verdicts) {
    if (v.is_top) (v.judge ? r.tp : r.fn)++;
    else (v.judge ? r.fp : r.tn)++;
  }
  const double n = static_cast<double>(r.verdicts.size());
  r.accuracy = n > 0 ? static_cast<double>(r.tp + r.tn) / n : 0.0;
  r.precision = r.tp + r.fp > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp)
                                : std::numeric_limits<double>::quiet_NaN();
  r.recall = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
  r.fisher_p = fisher_one_sided(r.tp, r.fn, r.fp, r.tn);
}

inline ChatRequest judge_request(const std::string& interpretation, const std::vector<std::string>& texts,
                                 const EndpointCall& call) {
  return {call.model,
          {{"system", std::string(kFuzzingScoringPrompt)},
           {"user", "Feature interpretation: " + interpretation + "\nText examples:\n" + detail::numbered_examples(texts)}},
          call.temperature};
}

/// Four batches of ten, each five top and five random, in seeded order. Any
/// batch that still fails after retries fails the whole signal.
inline FuzzResult fuzz_score(ChatClient& judge, const std::string& interpretation, const std::vector<ScoredContext>& top,
                             const std::vector<ScoredContext>& random, std::uint64_t seed, const EndpointCall& call = {},
                             const std::string& signal = {}) {
  ACCPP_REQUIRE(top.size() >= kFuzzPerSide && random.size() >= kFuzzPerSide, ErrorCode::empty_input,
                "fuzzing needs 20 top and 20 random contexts");
  ACCPP_REQUIRE(!interpretation.empty(), ErrorCode::empty_input, "no interpretation to score");
  std::mt19937_64 rng(seed);
  std::vector<int> ti(kFuzzPerSide), ri(kFuzzPerSide);
  std::iota(ti.begin(), ti.end(), 0);  // best 20 of the top list
  std::iota(ri.begin(), ri.end(), 0);
  std::shuffle(ti.begin(), ti.end(), rng);
  std::shuffle(ri.begin(), ri.end(), rng);
  FuzzResult res;
  res.signal = signal;
  constexpr int half = kFuzzBatch / 2;
  for (int b = 0; b < kFuzzPerSide / half; ++b) {
    std::vector<FuzzVerdict> batch;
    for (int i = 0; i < half; ++i) {
      batch.push_back({top[static_cast<std::size_t>(ti[static_cast<std::size_t>(b * half + i)])], true, 0, b, 0});
      batch.push_back({random[static_cast<std::size_t>(ri[static_cast<std::size_t>(b * half + i)])], false, 0, b, 0});
    }
    std::shuffle(batch.begin(), batch.end(), rng);
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      batch[i].position = static_cast<int>(i) + 1;
      texts.push_back(batch[i].context.text);
    }
    const auto req = judge_request(interpretation, texts, call);
    const auto labels = with_retries(call.retry, [&] { return parse_verdicts(judge.complete(req)); });
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i].judge = labels[i];
    res.verdicts.insert(res.verdicts.end(), batch.begin(), batch.end());
  }
  fill_metrics(res);
  return res;
}

// ---------------------------------------------------------------- records

inline nlohmann::json interpretation_to_json(const InterpretationRecord& r) {
  return {{"signal", r.signal}, {"text", r.text}, {"none_found", r.none_found}, {"model", r.model}, {"raw", r.raw}};
}

inline InterpretationRecord interpretation_from_json(const nlohmann::json& j) {
  try {
    return {j.at("signal").get<std::string>(), j.at("text").get<std::string>(), j.at("none_found").get<bool>(),
            j.value("model", std::string()), j.value("raw", std::string())};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, "interpretation record: " + std::string(e.what()));
  }
}

inline nlohmann::json fuzz_to_json(const FuzzResult& r) {
  nlohmann::json v = nlohmann::json::array();
  for (const auto& x : r.verdicts)
    v.push_back({{"chunk", x.context.chunk},
                 {"d", x.context.d},
                 {"s", x.context.s},
                 {"score", x.context.score},
                 {"truth", x.is_top ? "top" : "random"},
                 {"judge", x.judge},
                 {"batch", x.batch},
                 {"position", x.position}});
  nlohmann::json j = {{"signal", r.signal}, {"tp", r.tp},           {"fn", r.fn},
                      {"fp", r.fp},         {"tn", r.tn},           {"accuracy", r.accuracy},
                      {"recall", r.recall}, {"fisher_p", r.fisher_p}, {"verdicts", v}};
  j["precision"] = std::isnan(r.precision) ? nlohmann::json() : nlohmann::json(r.precision);
  return j;
}

inline FuzzResult fuzz_from_json(const nlohmann::json& j) {
  FuzzResult r;
  try {
    r.signal = j.at("signal").get<std::string>();
    for (const auto& x : j.at("verdicts")) {
      FuzzVerdict v;
      v.context.chunk = x.at("chunk").get<int>();
      v.context.d = x.at("d").get<int>();
      v.context.s = x.at("s").get<int>();
      v.context.score = x.at("score").get<double>();
      v.is_top = x.at("truth").get<std::string>() == "top";
      v.judge = x.at("judge").get<int>();
      v.batch = x.at("batch").get<int>();
      v.position = x.at("position").get<int>();
      r.verdicts.push_back(v);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, "fuzz record: " + std::string(e.what()));
  }
  fill_metrics(r);
  return r;
}

inline std::string verdicts_tsv(const std::vector<FuzzResult>& results) {
  std::ostringstream os;
  os << "signal\tbatch\tposition\tchunk\td\ts\tscore\ttruth\tjudge\n";
  for (const auto& r : results)
    for (const auto& v : r.verdicts)
      os << r.signal << '\t' << v.batch << '\t' << v.position << '\t' << v.context.chunk << '\t' << v.context.d << '\t'
         << v.context.s << '\t' << v.context.score << '\t' << (v.is_top ? "top" : "random") << '\t' << v.judge << '\n';
  return os.str();
}

}  // namespace accpp
