#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/core/sha256.hpp"

namespace accpp {

static_assert(std::endian::native == std::endian::little,
              "bundle I/O assumes a little-endian host");

inline constexpr int kBundleSchemaVersion = 1;
// Heads at or above this condition number are unsupported for the unified form.
inline constexpr double kUnsupportedCondition = 1e6;

enum class AttnVariant { plain, bias, rope, rope_bias };
enum class NormMode { none, frozen_ln };
enum class RopeStyle { half, interleaved };

NLOHMANN_JSON_SERIALIZE_ENUM(AttnVariant, {{AttnVariant::plain, "plain"},
                                           {AttnVariant::bias, "bias"},
                                           {AttnVariant::rope, "rope"},
                                           {AttnVariant::rope_bias, "rope_bias"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NormMode, {{NormMode::none, "none"}, {NormMode::frozen_ln, "frozen_ln"}})
NLOHMANN_JSON_SERIALIZE_ENUM(RopeStyle, {{RopeStyle::half, "half"}, {RopeStyle::interleaved, "interleaved"}})

inline bool has_bias(AttnVariant v) { return v == AttnVariant::bias || v == AttnVariant::rope_bias; }
inline bool has_rope(AttnVariant v) { return v == AttnVariant::rope || v == AttnVariant::rope_bias; }

struct Architecture {
  std::string model_id = "toy";
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int n_ctx = 0;
  AttnVariant variant = AttnVariant::plain;
  NormMode norm_mode = NormMode::none;
  double rope_base = 10000.0;
  int rope_dim = 0;  // rotated dimensions per head; 0 means d_head
  RopeStyle rope_style = RopeStyle::half;
  bool has_pos_embed = true;
  bool has_attn_out_bias = false;
  double ln_eps = 1e-5;

  int rotary_dims() const { return rope_dim > 0 ? rope_dim : d_head; }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline void to_json(nlohmann::json& j, const Architecture& a) {
  j = {{"model_id", a.model_id},     {"n_layers", a.n_layers},   {"n_heads", a.n_heads},
       {"d_model", a.d_model},       {"d_head", a.d_head},       {"d_mlp", a.d_mlp},
       {"vocab_size", a.vocab_size}, {"n_ctx", a.n_ctx},         {"attn_variant", a.variant},
       {"norm_mode", a.norm_mode},   {"rope_base", a.rope_base}, {"rope_dim", a.rope_dim},
       {"rope_style", a.rope_style}, {"has_pos_embed", a.has_pos_embed},
       {"has_attn_out_bias", a.has_attn_out_bias}, {"ln_eps", a.ln_eps}};
}

inline void from_json(const nlohmann::json& j, Architecture& a) {
  j.at("model_id").get_to(a.model_id);
  j.at("n_layers").get_to(a.n_layers);
  j.at("n_heads").get_to(a.n_heads);
  j.at("d_model").get_to(a.d_model);
  j.at("d_head").get_to(a.d_head);
  j.at("d_mlp").get_to(a.d_mlp);
  j.at("vocab_size").get_to(a.vocab_size);
  j.at("n_ctx").get_to(a.n_ctx);
  j.at("attn_variant").get_to(a.variant);
  j.at("norm_mode").get_to(a.norm_mode);
  j.at("rope_base").get_to(a.rope_base);
  j.at("rope_dim").get_to(a.rope_dim);
  j.at("rope_style").get_to(a.rope_style);
  j.at("has_pos_embed").get_to(a.has_pos_embed);
  j.at("has_attn_out_bias").get_to(a.has_attn_out_bias);
  j.at("ln_eps").get_to(a.ln_eps);
}

/// Exact equality that tolerates differing shapes.
template <typename A, typename B>
bool same(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}

struct HeadWeights {
  Matrix W_Q;  // D x R
  Matrix W_K;  // D x R
  Matrix W_V;  // D x R
  Matrix W_O;  // R x D
  Vector b_Q;  // R, bias variants only
  Vector b_K;  // R, bias variants only

  friend bool operator==(const HeadWeights& a, const HeadWeights& b) {
    return same(a.W_Q, b.W_Q) && same(a.W_K, b.W_K) && same(a.W_V, b.W_V) && same(a.W_O, b.W_O) &&
           same(a.b_Q, b.b_Q) && same(a.b_K, b.b_K);
  }
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Vector b_O;    // D, when has_attn_out_bias
  Matrix W_in;   // D x F
  Vector b_in;   // F
  Matrix W_out;  // F x D
  Vector b_out;  // D
  Vector ln1_g, ln1_b, ln2_g, ln2_b;  // D, frozen_ln only

  friend bool operator==(const LayerWeights& a, const LayerWeights& b) {
    return a.heads == b.heads && same(a.b_O, b.b_O) && same(a.W_in, b.W_in) && same(a.b_in, b.b_in) &&
           same(a.W_out, b.W_out) && same(a.b_out, b.b_out) && same(a.ln1_g, b.ln1_g) &&
           same(a.ln1_b, b.ln1_b) && same(a.ln2_g, b.ln2_g) && same(a.ln2_b, b.ln2_b);
  }
};

struct HeadDiagnostics {
  int layer = 0;
  int head = 0;
  double cond_W_Q = 0.0;
  double cond_W_K_T = 0.0;
  bool unsupported = false;
};

struct BundleDiagnostics {
  std::vector<HeadDiagnostics> heads;
  bool all_clear() const {
    for (const auto& h : heads)
      if (h.unsupported) return false;
    return true;
  }
  const HeadDiagnostics& at(int layer, int head, int n_heads) const {
    return heads.at(static_cast<std::size_t>(layer * n_heads + head));
  }
};

/// Weights and architecture of a decoder-only transformer. All weights are
/// stored in row-vector orientation: y = x^T W.
struct ModelBundle {
  Architecture arch;
  std::vector<std::string> vocab;
  Matrix embed;      // V x D
  Matrix pos_embed;  // n_ctx x D, when has_pos_embed
  std::vector<LayerWeights> layers;
  Vector lnf_g, lnf_b;  // D, frozen_ln only
  Matrix unembed;       // D x V
  BundleDiagnostics diagnostics;

  const HeadWeights& head(int layer, int h) const {
    ACCPP_REQUIRE(layer >= 0 && layer < arch.n_layers && h >= 0 && h < arch.n_heads,
                  ErrorCode::out_of_range, "head index out of range");
    return layers[static_cast<std::size_t>(layer)].heads[static_cast<std::size_t>(h)];
  }

  /// Equality over architecture, vocabulary and tensors (diagnostics ignored).
  friend bool operator==(const ModelBundle& a, const ModelBundle& b) {
    return a.arch == b.arch && a.vocab == b.vocab && same(a.embed, b.embed) && same(a.pos_embed, b.pos_embed) &&
           a.layers == b.layers && same(a.lnf_g, b.lnf_g) && same(a.lnf_b, b.lnf_b) &&
           same(a.unembed, b.unembed);
  }
};

namespace detail {

struct TensorRef {
  std::string name;
  std::vector<std::int64_t> shape;
  double* data;
};

// Canonical tensor list for an architecture. With `resize` the bundle's
// storage is allocated to match; otherwise mismatched shapes are an error.
inline std::vector<TensorRef> tensor_layout(ModelBundle& b, bool resize) {
  const auto& a = b.arch;
  const int D = a.d_model, R = a.d_head, F = a.d_mlp, V = a.vocab_size;
  std::vector<TensorRef> out;
  auto mat = [&out, resize](const std::string& name, Matrix& m, int r, int c) {
    if (m.rows() != r || m.cols() != c) {
      ACCPP_REQUIRE(resize, ErrorCode::shape_mismatch,
                    name + ": shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                        " does not match architecture " + std::to_string(r) + "x" + std::to_string(c));
      m.resize(r, c);
    }
    out.push_back({name, {r, c}, m.data()});
  };
  auto vec = [&out, resize](const std::string& name, Vector& v, int n) {
    if (v.size() != n) {
      ACCPP_REQUIRE(resize, ErrorCode::shape_mismatch, name + ": length does not match architecture");
      v.resize(n);
    }
    out.push_back({name, {n}, v.data()});
  };
  auto count = [resize](auto& container, int n, const char* what) {
    if (static_cast<int>(container.size()) != n) {
      ACCPP_REQUIRE(resize, ErrorCode::shape_mismatch, std::string(what) + " count does not match architecture");
      container.resize(static_cast<std::size_t>(n));
    }
  };

  mat("embed", b.embed, V, D);
  if (a.has_pos_embed) mat("pos_embed", b.pos_embed, a.n_ctx, D);
  count(b.layers, a.n_layers, "layer");
  for (int l = 0; l < a.n_layers; ++l) {
    auto& L = b.layers[static_cast<std::size_t>(l)];
    const std::string p = "blocks." + std::to_string(l) + ".";
    count(L.heads, a.n_heads, "head");
    for (int h = 0; h < a.n_heads; ++h) {
      auto& H = L.heads[static_cast<std::size_t>(h)];
      const std::string hp = p + "attn." + std::to_string(h) + ".";
      mat(hp + "W_Q", H.W_Q, D, R);
      mat(hp + "W_K", H.W_K, D, R);
      mat(hp + "W_V", H.W_V, D, R);
      mat(hp + "W_O", H.W_O, R, D);
      if (has_bias(a.variant)) {
        vec(hp + "b_Q", H.b_Q, R);
        vec(hp + "b_K", H.b_K, R);
      }
    }
    if (a.has_attn_out_bias) vec(p + "attn.b_O", L.b_O, D);
    if (a.norm_mode == NormMode::frozen_ln) {
      vec(p + "ln1.g", L.ln1_g, D);
      vec(p + "ln1.b", L.ln1_b, D);
      vec(p + "ln2.g", L.ln2_g, D);
      vec(p + "ln2.b", L.ln2_b, D);
    }
    mat(p + "mlp.W_in", L.W_in, D, F);
    vec(p + "mlp.b_in", L.b_in, F);
    mat(p + "mlp.W_out", L.W_out, F, D);
    vec(p + "mlp.b_out", L.b_out, D);
  }
  if (a.norm_mode == NormMode::frozen_ln) {
    vec("ln_final.g", b.lnf_g, D);
    vec("ln_final.b", b.lnf_b, D);
  }
  mat("unembed", b.unembed, D, V);
  return out;
}

inline std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  ACCPP_REQUIRE(in.good(), ErrorCode::io, "cannot open " + p.string());
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p, std::span<const unsigned char> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  ACCPP_REQUIRE(out.good(), ErrorCode::io, "cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  ACCPP_REQUIRE(out.good(), ErrorCode::io, "short write to " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  write_file(p, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& p) {
  auto bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

inline void append_f32(std::vector<unsigned char>& blob, const double* data, std::int64_t n) {
  const auto start = blob.size();
  blob.resize(start + static_cast<std::size_t>(n) * sizeof(float));
  for (std::int64_t i = 0; i < n; ++i) {
    const float f = static_cast<float>(data[i]);
    std::memcpy(blob.data() + start + static_cast<std::size_t>(i) * sizeof(float), &f, sizeof f);
  }
}

inline void read_f32(const unsigned char* src, double* dst, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    float f;
    std::memcpy(&f, src + static_cast<std::size_t>(i) * sizeof(float), sizeof f);
    dst[i] = static_cast<double>(f);
  }
}

}  // namespace detail

/// Per-head conditioning report. Heads whose W_Q or W_K^T has condition
/// number >= 1e6 are flagged as unsupported for the unified bilinear form.
inline BundleDiagnostics validate_bundle(const ModelBundle& b) {
  BundleDiagnostics diag;
  for (int l = 0; l < b.arch.n_layers; ++l) {
    for (int h = 0; h < b.arch.n_heads; ++h) {
      const auto& H = b.head(l, h);
      HeadDiagnostics d{l, h, condition_number(H.W_Q), condition_number(H.W_K.transpose()), false};
      d.unsupported = !(d.cond_W_Q < kUnsupportedCondition) || !(d.cond_W_K_T < kUnsupportedCondition);
      diag.heads.push_back(d);
    }
  }
  return diag;
}

inline void check_architecture(const Architecture& a) {
  ACCPP_REQUIRE(a.n_layers >= 1 && a.n_heads >= 1 && a.d_model >= 1 && a.vocab_size >= 1 && a.n_ctx >= 1,
                ErrorCode::validation, "architecture dimensions must be positive");
  ACCPP_REQUIRE(a.d_model == a.n_heads * a.d_head, ErrorCode::shape_mismatch, "d_model must equal n_heads * d_head");
  ACCPP_REQUIRE(a.d_mlp >= 1, ErrorCode::validation, "d_mlp must be positive");
  if (has_rope(a.variant)) {
    const int rd = a.rotary_dims();
    ACCPP_REQUIRE(rd % 2 == 0 && rd <= a.d_head, ErrorCode::validation, "rope_dim must be even and <= d_head");
    ACCPP_REQUIRE(a.rope_base > 0.0, ErrorCode::validation, "rope_base must be positive");
  }
}

/// Writes manifest.json + tensors.bin. Refuses a nonempty target unless forced.
inline void save_bundle(const ModelBundle& bundle, const std::filesystem::path& dir, bool force = false) {
  namespace fs = std::filesystem;
  check_architecture(bundle.arch);
  if (fs::exists(dir)) {
    ACCPP_REQUIRE(fs::is_directory(dir), ErrorCode::io, dir.string() + " is not a directory");
    ACCPP_REQUIRE(force || fs::is_empty(dir), ErrorCode::overwrite_refused,
                  dir.string() + " is not empty (use force to overwrite)");
  } else {
    fs::create_directories(dir);
  }

  // Read-only use: without resize the layout never writes through the bundle.
  auto tensors = detail::tensor_layout(const_cast<ModelBundle&>(bundle), false);

  std::vector<unsigned char> blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : tensors) {
    const auto n = detail::element_count(t.shape);
    for (std::int64_t i = 0; i < n; ++i)
      ACCPP_REQUIRE(std::isfinite(t.data[i]), ErrorCode::non_finite, "tensor " + t.name + " has non-finite values");
    const auto offset = blob.size();
    detail::append_f32(blob, t.data, n);
    entries.push_back({{"name", t.name},
                       {"dtype", "float32"},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"nbytes", blob.size() - offset}});
  }

  nlohmann::json manifest = {{"schema_version", kBundleSchemaVersion},
                             {"format", "accpp-bundle"},
                             {"orientation", "row-vector (y = x^T W), row-major, little-endian float32"},
                             {"architecture", bundle.arch},
                             {"vocab", bundle.vocab},
                             {"tensors_file", "tensors.bin"},
                             {"tensors_sha256", sha256_hex(blob)},
                             {"tensors", entries}};
  detail::write_file(dir / "tensors.bin", blob);
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Reads and validates a bundle directory, attaching conditioning diagnostics.
inline ModelBundle load_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto manifest_path = dir / "manifest.json";
  ACCPP_REQUIRE(fs::exists(manifest_path), ErrorCode::io, "missing " + manifest_path.string());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, "manifest.json: " + std::string(e.what()));
  }
  ACCPP_REQUIRE(manifest.value("schema_version", -1) == kBundleSchemaVersion, ErrorCode::schema_version,
                "unsupported schema_version " + manifest.value("schema_version", nlohmann::json()).dump());

  ModelBundle b;
  try {
    b.arch = manifest.at("architecture").get<Architecture>();
    b.vocab = manifest.at("vocab").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, "manifest.json: " + std::string(e.what()));
  }
  check_architecture(b.arch);
  ACCPP_REQUIRE(static_cast<int>(b.vocab.size()) == b.arch.vocab_size, ErrorCode::shape_mismatch,
                "vocab list length differs from vocab_size");

  const auto blob_path = dir / manifest.value("tensors_file", std::string("tensors.bin"));
  ACCPP_REQUIRE(fs::exists(blob_path), ErrorCode::missing_tensor, "missing tensor file " + blob_path.string());
  const auto blob = detail::read_file(blob_path);
  ACCPP_REQUIRE(sha256_hex(blob) == manifest.value("tensors_sha256", std::string()), ErrorCode::checksum,
                "tensors.bin checksum mismatch");

  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : manifest.at("tensors")) entries[e.at("name").get<std::string>()] = e;

  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (auto& t : detail::tensor_layout(b, true)) {
    auto it = entries.find(t.name);
    ACCPP_REQUIRE(it != entries.end(), ErrorCode::missing_tensor, "missing tensor " + t.name);
    const auto& e = it->second;
    ACCPP_REQUIRE(e.value("dtype", std::string()) == "float32", ErrorCode::validation,
                  t.name + ": only float32 tensors are supported");
    const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    ACCPP_REQUIRE(shape == t.shape, ErrorCode::shape_mismatch,
                  t.name + ": shape " + nlohmann::json(shape).dump() + " does not match expected " +
                      nlohmann::json(t.shape).dump());
    const auto offset = e.at("offset").get<std::size_t>();
    const auto nbytes = static_cast<std::size_t>(detail::element_count(shape)) * sizeof(float);
    ACCPP_REQUIRE(e.value("nbytes", nbytes) == nbytes && offset + nbytes <= blob.size(), ErrorCode::shape_mismatch,
                  t.name + ": byte range outside tensors.bin");
    spans.emplace_back(offset, offset + nbytes);
    detail::read_f32(blob.data() + offset, t.data, detail::element_count(shape));
    for (std::int64_t i = 0; i < detail::element_count(shape); ++i)
      ACCPP_REQUIRE(std::isfinite(t.data[i]), ErrorCode::non_finite, t.name + " has non-finite values");
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    ACCPP_REQUIRE(spans[i].first >= spans[i - 1].second, ErrorCode::validation, "tensor byte ranges overlap");

  b.diagnostics = validate_bundle(b);
  return b;
}

}  // namespace accpp
