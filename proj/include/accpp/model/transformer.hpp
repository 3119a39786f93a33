#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "accpp/core/error.hpp"
#include "accpp/core/linalg.hpp"
#include "accpp/model/bundle.hpp"
#include "accpp/model/component.hpp"
#include "accpp/model/toy_vocab.hpp"

namespace accpp {

/// R x R rotation such that (q^T R) is q rotated for position `pos`.
/// Dimensions beyond the rotary width pass through unchanged.
inline Matrix rope_rotation(const Architecture& a, double pos) {
  const int R = a.d_head;
  const int rd = a.rotary_dims();
  Matrix rot = Matrix::Identity(R, R);
  for (int i = 0; i < rd / 2; ++i) {
    const double theta = std::pow(a.rope_base, -2.0 * i / rd);
    const double c = std::cos(pos * theta), s = std::sin(pos * theta);
    const int i1 = a.rope_style == RopeStyle::half ? i : 2 * i;
    const int i2 = a.rope_style == RopeStyle::half ? i + rd / 2 : 2 * i + 1;
    // out[i1] = q[i1] c - q[i2] s ; out[i2] = q[i2] c + q[i1] s
    rot(i1, i1) = c;
    rot(i2, i1) = -s;
    rot(i1, i2) = s;
    rot(i2, i2) = c;
  }
  return rot;
}

/// Replaces one attention row of one head during a forward pass.
struct AttentionOverride {
  int layer = 0;
  int head = 0;
  int row = 0;
  Vector weights;  // length >= row + 1; entries past `row` ignored
};

/// Everything recorded by one forward pass. Immutable once returned.
///
/// `outputs[i]` is the N x D write of `components[i]`; the residual entering
/// layer l is the sum of every component whose stage precedes that layer.
/// Score and weight matrices are N x N with the masked upper triangle zero.
struct ActivationCache {
  std::vector<int> token_ids;
  std::vector<std::string> tokens;
  int n_layers = 0;
  int n_heads = 0;

  std::vector<ComponentId> components;
  std::vector<Matrix> outputs;

  std::vector<Matrix> resid;       // n_layers + 1 entries; last is the final residual
  std::vector<Matrix> attn_input;  // n_layers entries; LN1(x) or x
  std::vector<Vector> ln1_mean, ln1_rstd;
  Vector lnf_mean, lnf_rstd;

  std::vector<std::vector<Matrix>> scores;   // [layer][head], raw A' (unscaled)
  std::vector<std::vector<Matrix>> weights;  // [layer][head], A
  Matrix logits;                             // N x V

  int n_tokens() const { return static_cast<int>(token_ids.size()); }

  /// Number of leading entries of `components` that are upstream of `layer`
  /// (layer == n_layers means the final residual).
  std::size_t upstream_count(int layer) const {
    const int stage = 4 * layer + 1;
    std::size_t n = 0;
    while (n < components.size() && components[n].stage() < stage) ++n;
    return n;
  }

  const Matrix& output_of(const ComponentId& c) const {
    for (std::size_t i = 0; i < components.size(); ++i)
      if (components[i] == c) return outputs[i];
    throw Error(ErrorCode::out_of_range, "component " + c.label() + " not in cache");
  }
};

namespace detail {

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline Matrix layer_norm(const Matrix& x, const Vector& g, const Vector& b, double eps, Vector& mean,
                         Vector& rstd) {
  const auto N = x.rows();
  const auto D = x.cols();
  mean.resize(N);
  rstd.resize(N);
  Matrix out(N, D);
  for (Eigen::Index j = 0; j < N; ++j) {
    const double mu = x.row(j).mean();
    const double var = (x.row(j).array() - mu).square().mean();
    mean(j) = mu;
    rstd(j) = 1.0 / std::sqrt(var + eps);
    out.row(j) = ((x.row(j).array() - mu) * rstd(j) * g.transpose().array() + b.transpose().array()).matrix();
  }
  return out;
}

}  // namespace detail

/// Deterministic forward pass over one prompt.
inline ActivationCache forward(const ModelBundle& bundle, const std::vector<int>& token_ids,
                               const AttentionOverride* override_row = nullptr) {
  const auto& a = bundle.arch;
  const int N = static_cast<int>(token_ids.size());
  const int D = a.d_model;
  const int R = a.d_head;
  ACCPP_REQUIRE(N >= 1, ErrorCode::empty_input, "forward: empty prompt");
  ACCPP_REQUIRE(N <= a.n_ctx, ErrorCode::out_of_range, "forward: prompt longer than n_ctx");
  for (int t : token_ids)
    ACCPP_REQUIRE(t >= 0 && t < a.vocab_size, ErrorCode::out_of_range,
                  "forward: token id " + std::to_string(t) + " out of vocabulary");
  const bool frozen = a.norm_mode == NormMode::frozen_ln;
  const double inv_sqrt_r = 1.0 / std::sqrt(static_cast<double>(R));

  ActivationCache cache;
  cache.token_ids = token_ids;
  for (int t : token_ids)
    cache.tokens.push_back(static_cast<std::size_t>(t) < bundle.vocab.size() ? bundle.vocab[static_cast<std::size_t>(t)]
                                                                             : std::string());
  cache.n_layers = a.n_layers;
  cache.n_heads = a.n_heads;

  Matrix emb(N, D);
  for (int j = 0; j < N; ++j) emb.row(j) = bundle.embed.row(token_ids[static_cast<std::size_t>(j)]);
  cache.components.push_back(ComponentId::embed());
  cache.outputs.push_back(emb);
  Matrix x = emb;
  if (a.has_pos_embed) {
    Matrix pos = bundle.pos_embed.topRows(N);
    cache.components.push_back(ComponentId::pos_embed());
    cache.outputs.push_back(pos);
    x += pos;
  }

  std::vector<Matrix> rotations;
  if (has_rope(a.variant))
    for (int j = 0; j < N; ++j) rotations.push_back(rope_rotation(a, j));

  cache.scores.resize(static_cast<std::size_t>(a.n_layers));
  cache.weights.resize(static_cast<std::size_t>(a.n_layers));
  for (int l = 0; l < a.n_layers; ++l) {
    const auto& layer = bundle.layers[static_cast<std::size_t>(l)];
    cache.resid.push_back(x);
    Vector mean, rstd;
    Matrix h = frozen ? detail::layer_norm(x, layer.ln1_g, layer.ln1_b, a.ln_eps, mean, rstd) : x;
    cache.ln1_mean.push_back(mean);
    cache.ln1_rstd.push_back(rstd);
    cache.attn_input.push_back(h);

    Matrix attn_total = Matrix::Zero(N, D);
    for (int hd = 0; hd < a.n_heads; ++hd) {
      const auto& W = layer.heads[static_cast<std::size_t>(hd)];
      Matrix q = h * W.W_Q;
      Matrix k = h * W.W_K;
      if (has_bias(a.variant)) {
        q.rowwise() += W.b_Q.transpose();
        k.rowwise() += W.b_K.transpose();
      }
      if (has_rope(a.variant)) {
        for (int j = 0; j < N; ++j) {
          q.row(j) = q.row(j) * rotations[static_cast<std::size_t>(j)];
          k.row(j) = k.row(j) * rotations[static_cast<std::size_t>(j)];
        }
      }
      const Matrix v = h * W.W_V;
      Matrix scores = Matrix::Zero(N, N);
      Matrix weights = Matrix::Zero(N, N);
      for (int d = 0; d < N; ++d) {
        Vector row(d + 1);
        for (int s = 0; s <= d; ++s) row(s) = q.row(d).dot(k.row(s));
        scores.row(d).head(d + 1) = row.transpose();
        Vector w = softmax(row * inv_sqrt_r);
        if (override_row && override_row->layer == l && override_row->head == hd && override_row->row == d)
          w = override_row->weights.head(d + 1);
        weights.row(d).head(d + 1) = w.transpose();
      }
      Matrix o = (weights * v) * W.W_O;
      attn_total += o;
      cache.scores[static_cast<std::size_t>(l)].push_back(std::move(scores));
      cache.weights[static_cast<std::size_t>(l)].push_back(std::move(weights));
      cache.components.push_back(ComponentId::attn_head(l, hd));
      cache.outputs.push_back(std::move(o));
    }
    x += attn_total;
    if (a.has_attn_out_bias) {
      Matrix bo = layer.b_O.transpose().replicate(N, 1);
      x += bo;
      cache.components.push_back(ComponentId::attn_bias(l));
      cache.outputs.push_back(std::move(bo));
    }

    Vector mean2, rstd2;
    Matrix h2 = frozen ? detail::layer_norm(x, layer.ln2_g, layer.ln2_b, a.ln_eps, mean2, rstd2) : x;
    Matrix pre = h2 * layer.W_in;
    pre.rowwise() += layer.b_in.transpose();
    pre = pre.unaryExpr([](double z) { return detail::gelu(z); });
    Matrix m = pre * layer.W_out;
    m.rowwise() += layer.b_out.transpose();
    x += m;
    cache.components.push_back(ComponentId::mlp(l));
    cache.outputs.push_back(std::move(m));
  }
  cache.resid.push_back(x);
  Matrix hf = frozen ? detail::layer_norm(x, bundle.lnf_g, bundle.lnf_b, a.ln_eps, cache.lnf_mean, cache.lnf_rstd) : x;
  cache.logits = hf * bundle.unembed;
  return cache;
}

/// Upstream decomposition of one layer's attention input. With frozen LN
/// each component is mapped through the per-token centring and scale
/// recorded in the forward pass and the LN bias appears as its own term, so
/// the terms sum exactly to the input the heads saw.
struct InputDecomposition {
  std::vector<ComponentId> components;
  std::vector<Matrix> outputs;  // each N x D
};

namespace detail {

inline Matrix freeze_ln(const Matrix& o, const Vector& rstd, const Vector& g) {
  Matrix out(o.rows(), o.cols());
  for (Eigen::Index j = 0; j < o.rows(); ++j)
    out.row(j) = ((o.row(j).array() - o.row(j).mean()) * rstd(j) * g.transpose().array()).matrix();
  return out;
}

}  // namespace detail

inline InputDecomposition attention_input_decomposition(const ModelBundle& bundle, const ActivationCache& cache,
                                                        int layer) {
  ACCPP_REQUIRE(layer >= 0 && layer < bundle.arch.n_layers, ErrorCode::out_of_range, "layer out of range");
  const std::size_t n = cache.upstream_count(layer);
  InputDecomposition out;
  const bool frozen = bundle.arch.norm_mode == NormMode::frozen_ln;
  const auto& lw = bundle.layers[static_cast<std::size_t>(layer)];
  for (std::size_t i = 0; i < n; ++i) {
    out.components.push_back(cache.components[i]);
    out.outputs.push_back(frozen ? detail::freeze_ln(cache.outputs[i], cache.ln1_rstd[static_cast<std::size_t>(layer)], lw.ln1_g)
                                 : cache.outputs[i]);
  }
  if (frozen) {
    out.components.push_back(ComponentId::ln_bias(layer));
    out.outputs.push_back(lw.ln1_b.transpose().replicate(cache.n_tokens(), 1));
  }
  return out;
}

/// Same decomposition for the final residual as read by the unembedding.
inline InputDecomposition final_decomposition(const ModelBundle& bundle, const ActivationCache& cache) {
  InputDecomposition out;
  const bool frozen = bundle.arch.norm_mode == NormMode::frozen_ln;
  for (std::size_t i = 0; i < cache.components.size(); ++i) {
    out.components.push_back(cache.components[i]);
    out.outputs.push_back(frozen ? detail::freeze_ln(cache.outputs[i], cache.lnf_rstd, bundle.lnf_g)
                                 : cache.outputs[i]);
  }
  if (frozen) {
    out.components.push_back(ComponentId::ln_bias(bundle.arch.n_layers));
    out.outputs.push_back(bundle.lnf_b.transpose().replicate(cache.n_tokens(), 1));
  }
  return out;
}

struct PerturbationMetrics {
  double cosine = 0.0;
  double norm_ratio = 0.0;
};

inline PerturbationMetrics perturbation_metrics(const Vector& before, const Vector& after) {
  ACCPP_REQUIRE(before.size() == after.size(), ErrorCode::validation, "perturbation_metrics: size mismatch");
  const double nb = before.norm(), na = after.norm();
  ACCPP_REQUIRE(nb > 0.0 && na > 0.0, ErrorCode::undefined_metric, "perturbation_metrics: zero vector");
  return {std::clamp(before.dot(after) / (nb * na), -1.0, 1.0), na / nb};
}

struct SynthConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 8;
  AttnVariant variant = AttnVariant::plain;
  NormMode norm_mode = NormMode::none;
  std::uint64_t seed = 0;
  int n_ctx = 64;
  int d_mlp = 0;               // 0 means 4 * d_model
  double init_std = 0.02;      // weights and biases
  double embed_std = -1.0;     // < 0 means init_std
  double qk_gain = 1.0;        // multiplier on W_Q and W_K
  double rope_base = 10000.0;
  bool attn_out_bias = false;
  std::optional<bool> pos_embed;  // default: only for non-rope variants
  std::vector<std::string> vocab;  // empty means default_toy_vocab()
  std::string model_id = "toy";
};

// Heads are redrawn until both W_Q and W_K^T are below this condition number.
inline constexpr double kSynthMaxCondition = 1e4;

/// Seeded Gaussian toy model. Values are rounded to float32 so that a
/// save/load round trip is bit-exact.
inline ModelBundle synth_toy_model(const SynthConfig& cfg) {
  ACCPP_REQUIRE(cfg.n_heads >= 1 && cfg.d_model >= 1, ErrorCode::config, "synth: dimensions must be positive");
  ACCPP_REQUIRE(cfg.d_model % cfg.n_heads == 0, ErrorCode::config, "synth: d_model must be divisible by n_heads");

  ModelBundle b;
  auto& a = b.arch;
  a.model_id = cfg.model_id;
  a.n_layers = cfg.n_layers;
  a.n_heads = cfg.n_heads;
  a.d_model = cfg.d_model;
  a.d_head = cfg.d_model / cfg.n_heads;
  a.d_mlp = cfg.d_mlp > 0 ? cfg.d_mlp : 4 * cfg.d_model;
  b.vocab = cfg.vocab.empty() ? default_toy_vocab() : cfg.vocab;
  a.vocab_size = static_cast<int>(b.vocab.size());
  a.n_ctx = cfg.n_ctx;
  a.variant = cfg.variant;
  a.norm_mode = cfg.norm_mode;
  a.rope_base = cfg.rope_base;
  a.has_pos_embed = cfg.pos_embed.value_or(!has_rope(cfg.variant));
  a.has_attn_out_bias = cfg.attn_out_bias;
  check_architecture(a);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](auto& m, double std) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<double>(static_cast<float>(std * normal(rng)));
  };
  const double wstd = cfg.init_std;
  const double estd = cfg.embed_std < 0 ? cfg.init_std : cfg.embed_std;

  auto tensors = detail::tensor_layout(b, true);  // allocates every tensor
  (void)tensors;
  draw(b.embed, estd);
  if (a.has_pos_embed) draw(b.pos_embed, estd);
  for (auto& layer : b.layers) {
    for (auto& h : layer.heads) {
      do {
        draw(h.W_Q, wstd * cfg.qk_gain);
        draw(h.W_K, wstd * cfg.qk_gain);
      } while (!(condition_number(h.W_Q) < kSynthMaxCondition) ||
               !(condition_number(h.W_K.transpose()) < kSynthMaxCondition));
      draw(h.W_V, wstd);
      draw(h.W_O, wstd);
      if (has_bias(a.variant)) {
        draw(h.b_Q, wstd * cfg.qk_gain);
        draw(h.b_K, wstd * cfg.qk_gain);
      }
    }
    if (a.has_attn_out_bias) draw(layer.b_O, wstd);
    if (a.norm_mode == NormMode::frozen_ln) {
      for (Vector* g : {&layer.ln1_g, &layer.ln2_g}) {
        draw(*g, wstd);
        *g = (g->array() + 1.0).unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
      }
      draw(layer.ln1_b, wstd);
      draw(layer.ln2_b, wstd);
    }
    draw(layer.W_in, wstd);
    draw(layer.b_in, wstd);
    draw(layer.W_out, wstd);
    draw(layer.b_out, wstd);
  }
  if (a.norm_mode == NormMode::frozen_ln) {
    draw(b.lnf_g, wstd);
    b.lnf_g = (b.lnf_g.array() + 1.0).unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
    draw(b.lnf_b, wstd);
  }
  draw(b.unembed, wstd);
  b.diagnostics = validate_bundle(b);
  return b;
}

}  // namespace accpp
