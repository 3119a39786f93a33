#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace accpp {

enum class ErrorCode {
  validation,
  degenerate_rank,
  undefined_condition,
  empty_input,
  shape_mismatch,
  missing_tensor,
  non_finite,
  schema_version,
  checksum,
  io,
  overwrite_refused,
  out_of_range,
  unsupported_head,
  not_rope,
  causal_mask,
  config,
  no_seed,
  granularity_mismatch,
  non_symmetric,
  degenerate_group,
  missing_vectors,
  missing_layer,
  parse,
  transport,
  undefined_metric,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::validation: return "validation";
    case ErrorCode::degenerate_rank: return "degenerate-rank";
    case ErrorCode::undefined_condition: return "undefined-condition";
    case ErrorCode::empty_input: return "empty-input";
    case ErrorCode::shape_mismatch: return "shape-mismatch";
    case ErrorCode::missing_tensor: return "missing-tensor";
    case ErrorCode::non_finite: return "non-finite";
    case ErrorCode::schema_version: return "schema-version";
    case ErrorCode::checksum: return "checksum";
    case ErrorCode::io: return "io";
    case ErrorCode::overwrite_refused: return "overwrite-refused";
    case ErrorCode::out_of_range: return "out-of-range";
    case ErrorCode::unsupported_head: return "unsupported-head";
    case ErrorCode::not_rope: return "not-rope";
    case ErrorCode::causal_mask: return "causal-mask";
    case ErrorCode::config: return "config";
    case ErrorCode::no_seed: return "no-seed";
    case ErrorCode::granularity_mismatch: return "granularity-mismatch";
    case ErrorCode::non_symmetric: return "non-symmetric";
    case ErrorCode::degenerate_group: return "degenerate-group";
    case ErrorCode::missing_vectors: return "missing-vectors";
    case ErrorCode::missing_layer: return "missing-layer";
    case ErrorCode::parse: return "parse";
    case ErrorCode::transport: return "transport";
    case ErrorCode::undefined_metric: return "undefined-metric";
  }
  return "unknown";
}

/// Every failure raised by the library carries a code so callers (and the
/// CLI's exit status) can tell failure classes apart without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define ACCPP_REQUIRE(cond, code, msg)            \
  do {                                            \
    if (!(cond)) throw ::accpp::Error((code), (msg)); \
  } while (false)

}  // namespace accpp
