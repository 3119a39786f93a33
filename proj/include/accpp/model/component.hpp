#pragma once

#include <compare>
#include <cstdio>
#include <string>
#include <tuple>

#include "accpp/core/error.hpp"

namespace accpp {

/// Writers into the residual stream, plus the pseudo-components that make the
/// attention-input decomposition exact (frozen LN bias, folded QK bias).
enum class ComponentKind : int {
  embed = 0,
  pos_embed = 1,
  ln_bias = 2,    // additive bias of a frozen pre-attention (or final) LayerNorm
  qk_bias = 3,    // c_d / c_s offset of the analysed head
  attn_head = 4,
  attn_bias = 5,  // per-layer attention output bias
  mlp = 6,
};

struct ComponentId {
  ComponentKind kind = ComponentKind::embed;
  int layer = -1;  // -1 for embeddings; n_layers for the final LN
  int head = -1;

  static ComponentId embed() { return {ComponentKind::embed, -1, -1}; }
  static ComponentId pos_embed() { return {ComponentKind::pos_embed, -1, -1}; }
  static ComponentId ln_bias(int layer) { return {ComponentKind::ln_bias, layer, -1}; }
  static ComponentId qk_bias(int layer, int head) { return {ComponentKind::qk_bias, layer, head}; }
  static ComponentId attn_head(int layer, int head) { return {ComponentKind::attn_head, layer, head}; }
  static ComponentId attn_bias(int layer) { return {ComponentKind::attn_bias, layer, -1}; }
  static ComponentId mlp(int layer) { return {ComponentKind::mlp, layer, -1}; }

  /// Position in the layer order. Stage of an upstream writer is always
  /// strictly below the stage of any head that reads it.
  int stage() const {
    switch (kind) {
      case ComponentKind::embed:
      case ComponentKind::pos_embed: return 0;
      case ComponentKind::ln_bias:
      case ComponentKind::qk_bias: return 4 * layer + 1;
      case ComponentKind::attn_head:
      case ComponentKind::attn_bias: return 4 * layer + 2;
      case ComponentKind::mlp: return 4 * layer + 3;
    }
    return 0;
  }

  bool is_head() const { return kind == ComponentKind::attn_head; }
  bool is_mlp() const { return kind == ComponentKind::mlp; }

  auto key() const { return std::make_tuple(stage(), static_cast<int>(kind), head, layer); }
  friend bool operator==(const ComponentId& a, const ComponentId& b) {
    return a.kind == b.kind && a.layer == b.layer && a.head == b.head;
  }
  friend auto operator<=>(const ComponentId& a, const ComponentId& b) { return a.key() <=> b.key(); }

  std::string label() const {
    switch (kind) {
      case ComponentKind::embed: return "embed";
      case ComponentKind::pos_embed: return "pos_embed";
      case ComponentKind::ln_bias: return "ln_bias." + std::to_string(layer);
      case ComponentKind::qk_bias:
        return "qk_bias." + std::to_string(layer) + "." + std::to_string(head);
      case ComponentKind::attn_head:
        return "attn." + std::to_string(layer) + "." + std::to_string(head);
      case ComponentKind::attn_bias: return "attn_bias." + std::to_string(layer);
      case ComponentKind::mlp: return "mlp." + std::to_string(layer);
    }
    return "?";
  }

  static ComponentId parse(const std::string& s) {
    int a = -1, b = -1;
    char tail = 0;
    if (s == "embed") return embed();
    if (s == "pos_embed") return pos_embed();
    if (std::sscanf(s.c_str(), "attn.%d.%d%c", &a, &b, &tail) == 2) return attn_head(a, b);
    if (std::sscanf(s.c_str(), "qk_bias.%d.%d%c", &a, &b, &tail) == 2) return qk_bias(a, b);
    if (std::sscanf(s.c_str(), "attn_bias.%d%c", &a, &tail) == 1) return attn_bias(a);
    if (std::sscanf(s.c_str(), "ln_bias.%d%c", &a, &tail) == 1) return ln_bias(a);
    if (std::sscanf(s.c_str(), "mlp.%d%c", &a, &tail) == 1) return mlp(a);
    throw Error(ErrorCode::parse, "unknown component label '" + s + "'");
  }
};

}  // namespace accpp
