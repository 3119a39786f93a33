#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "accpp/core/error.hpp"
#include "accpp/core/sha256.hpp"
#include "accpp/model/bundle.hpp"
#include "accpp/model/tokenizer.hpp"
#include "accpp/model/transformer.hpp"

namespace accpp {

// the binary files are written straight from memory
static_assert(std::endian::native == std::endian::little);

inline constexpr int kChunkLen = 32;
inline constexpr int kCorpusSchemaVersion = 1;

struct CorpusChunk {
  int id = 0;
  int doc = 0;     // source document index
  int offset = 0;  // first token within the document
  std::vector<int> token_ids;
  std::vector<std::string> tokens;
};

/// Fixed 32-token chunks with the attention input of selected layers, kept as
/// float32 like the bundle tensors. Each chunk runs through the model on its own.
struct CorpusStore {
  std::string model_id;
  int d_model = 0;
  int vocab_size = 0;
  std::vector<CorpusChunk> chunks;
  std::map<int, std::vector<float>> layers;  // layer -> n_chunks * 32 * D

  bool has_layer(int l) const { return layers.count(l) > 0; }
  std::size_t size() const { return chunks.size(); }

  Vector residual(int layer, int chunk, int pos) const {
    auto it = layers.find(layer);
    ACCPP_REQUIRE(it != layers.end(), ErrorCode::missing_layer,
                  "corpus store has no residuals for layer " + std::to_string(layer));
    ACCPP_REQUIRE(chunk >= 0 && chunk < static_cast<int>(chunks.size()) && pos >= 0 && pos < kChunkLen,
                  ErrorCode::out_of_range, "chunk position out of range");
    const float* p = it->second.data() + (static_cast<std::size_t>(chunk) * kChunkLen + pos) * d_model;
    Vector v(d_model);
    for (int i = 0; i < d_model; ++i) v(i) = p[i];
    return v;
  }

  Matrix chunk_residuals(int layer, int chunk) const {
    Matrix X(kChunkLen, d_model);
    for (int t = 0; t < kChunkLen; ++t) X.row(t) = residual(layer, chunk, t).transpose();
    return X;
  }
};

/// One document per nonempty line.
inline std::vector<std::string> read_corpus_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  ACCPP_REQUIRE(in, ErrorCode::io, "cannot open corpus " + p.string());
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) docs.push_back(line);
  return docs;
}

inline CorpusStore build_corpus_cache(const ModelBundle& bundle, const std::vector<std::string>& docs,
                                      const std::vector<int>& layer_set) {
  ACCPP_REQUIRE(!docs.empty(), ErrorCode::empty_input, "corpus is empty");
  ACCPP_REQUIRE(!layer_set.empty(), ErrorCode::config, "no layers selected for the corpus cache");
  ACCPP_REQUIRE(bundle.arch.n_ctx >= kChunkLen, ErrorCode::config, "model context shorter than a chunk");
  const std::set<int> layers(layer_set.begin(), layer_set.end());
  for (int l : layers)
    ACCPP_REQUIRE(l >= 0 && l < bundle.arch.n_layers, ErrorCode::out_of_range, "layer " + std::to_string(l) + " out of range");
  Tokenizer tok(bundle.vocab);
  CorpusStore store;
  store.model_id = bundle.arch.model_id;
  store.d_model = bundle.arch.d_model;
  store.vocab_size = bundle.arch.vocab_size;
  for (int l : layers) store.layers[l] = {};
  for (std::size_t di = 0; di < docs.size(); ++di) {
    const auto ids = tok.encode(docs[di]);
    for (std::size_t off = 0; off + kChunkLen <= ids.size(); off += kChunkLen) {
      CorpusChunk c;
      c.id = static_cast<int>(store.chunks.size());
      c.doc = static_cast<int>(di);
      c.offset = static_cast<int>(off);
      c.token_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(off),
                         ids.begin() + static_cast<std::ptrdiff_t>(off + kChunkLen));
      for (int id : c.token_ids) c.tokens.push_back(bundle.vocab[static_cast<std::size_t>(id)]);
      const auto cache = forward(bundle, c.token_ids);
      for (int l : layers) {
        auto& buf = store.layers[l];
        const auto& X = cache.attn_input[static_cast<std::size_t>(l)];
        for (int t = 0; t < kChunkLen; ++t)
          for (int i = 0; i < store.d_model; ++i) buf.push_back(static_cast<float>(X(t, i)));
      }
      store.chunks.push_back(std::move(c));
    }
  }
  return store;
}

namespace detail {

inline std::vector<unsigned char> as_bytes(const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  return {b, b + n};
}

}  // namespace detail

/// manifest.json + tokens.bin (int32) + layer_<l>.bin (float32), little-endian.
inline void save_corpus(const CorpusStore& s, const std::filesystem::path& dir, bool force = false) {
  namespace fs = std::filesystem;
  if (fs::exists(dir)) {
    ACCPP_REQUIRE(force || fs::is_empty(dir), ErrorCode::overwrite_refused,
                  dir.string() + " is not empty (use force to overwrite)");
  } else {
    fs::create_directories(dir);
  }
  std::vector<std::int32_t> toks;
  nlohmann::json chunks = nlohmann::json::array();
  for (const auto& c : s.chunks) {
    toks.insert(toks.end(), c.token_ids.begin(), c.token_ids.end());
    chunks.push_back({{"id", c.id}, {"doc", c.doc}, {"offset", c.offset}});
  }
  const auto tok_bytes = detail::as_bytes(toks.data(), toks.size() * sizeof(std::int32_t));
  detail::write_file(dir / "tokens.bin", tok_bytes);
  nlohmann::json layer_files = nlohmann::json::object();
  for (const auto& [l, buf] : s.layers) {
    const std::string name = "layer_" + std::to_string(l) + ".bin";
    const auto bytes = detail::as_bytes(buf.data(), buf.size() * sizeof(float));
    detail::write_file(dir / name, bytes);
    layer_files[std::to_string(l)] = {{"file", name}, {"sha256", sha256_hex(bytes)}};
  }
  nlohmann::json m = {{"schema_version", kCorpusSchemaVersion},
                      {"format", "accpp-corpus"},
                      {"model_id", s.model_id},
                      {"d_model", s.d_model},
                      {"vocab_size", s.vocab_size},
                      {"chunk_len", kChunkLen},
                      {"n_chunks", s.chunks.size()},
                      {"tokens", {{"file", "tokens.bin"}, {"dtype", "int32"}, {"sha256", sha256_hex(tok_bytes)}}},
                      {"layers", layer_files},
                      {"chunks", chunks}};
  detail::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

/// Token strings are filled from `vocab` when given.
inline CorpusStore load_corpus(const std::filesystem::path& dir, const std::vector<std::string>& vocab = {}) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, "corpus manifest: " + std::string(e.what()));
  }
  ACCPP_REQUIRE(m.value("schema_version", -1) == kCorpusSchemaVersion, ErrorCode::schema_version,
                "unsupported corpus schema_version");
  ACCPP_REQUIRE(m.value("chunk_len", 0) == kChunkLen, ErrorCode::validation, "corpus chunk length must be 32");
  CorpusStore s;
  try {
    s.model_id = m.at("model_id").get<std::string>();
    s.d_model = m.at("d_model").get<int>();
    s.vocab_size = m.at("vocab_size").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, "corpus manifest: " + std::string(e.what()));
  }
  ACCPP_REQUIRE(vocab.empty() || static_cast<int>(vocab.size()) == s.vocab_size, ErrorCode::shape_mismatch,
                "corpus vocabulary size differs from the model's");
  const auto n = m.at("n_chunks").get<std::size_t>();
  const auto tok_bytes = detail::read_file(dir / m.at("tokens").at("file").get<std::string>());
  ACCPP_REQUIRE(sha256_hex(tok_bytes) == m.at("tokens").at("sha256").get<std::string>(), ErrorCode::checksum,
                "tokens.bin checksum mismatch");
  ACCPP_REQUIRE(tok_bytes.size() == n * kChunkLen * sizeof(std::int32_t), ErrorCode::shape_mismatch,
                "tokens.bin has the wrong size");
  const auto& chunk_meta = m.at("chunks");
  ACCPP_REQUIRE(chunk_meta.size() == n, ErrorCode::shape_mismatch, "chunk table length differs from n_chunks");
  for (std::size_t i = 0; i < n; ++i) {
    CorpusChunk c;
    c.id = chunk_meta[i].at("id").get<int>();
    c.doc = chunk_meta[i].at("doc").get<int>();
    c.offset = chunk_meta[i].at("offset").get<int>();
    c.token_ids.resize(kChunkLen);
    std::memcpy(c.token_ids.data(), tok_bytes.data() + i * kChunkLen * sizeof(std::int32_t),
                kChunkLen * sizeof(std::int32_t));
    for (int id : c.token_ids) {
      ACCPP_REQUIRE(id >= 0 && id < s.vocab_size, ErrorCode::out_of_range, "token id out of vocabulary");
      if (!vocab.empty()) c.tokens.push_back(vocab[static_cast<std::size_t>(id)]);
    }
    s.chunks.push_back(std::move(c));
  }
  for (const auto& [key, e] : m.at("layers").items()) {
    const auto bytes = detail::read_file(dir / e.at("file").get<std::string>());
    ACCPP_REQUIRE(sha256_hex(bytes) == e.at("sha256").get<std::string>(), ErrorCode::checksum,
                  "layer " + key + " checksum mismatch");
    ACCPP_REQUIRE(bytes.size() == n * kChunkLen * static_cast<std::size_t>(s.d_model) * sizeof(float),
                  ErrorCode::shape_mismatch, "layer " + key + " file has the wrong size");
    std::vector<float> buf(bytes.size() / sizeof(float));
    std::memcpy(buf.data(), bytes.data(), bytes.size());
    s.layers[std::stoi(key)] = std::move(buf);
  }
  return s;
}

}  // namespace accpp
