#pragma once

#include <stdexcept>
#include <string>

namespace optin {

// Machine-readable error category. The CLI prints this as the "code" field of
// its error JSON, so the names are part of the external interface.
enum class ErrorCode {
  shape_mismatch,
  invalid_parameter,
  index_out_of_range,
  token_overflow,
  mask_mismatch,
  cache_mismatch,
  infeasible_budget,
  instance_too_large,
  wrong_architecture,
  bad_magic,
  version_mismatch,
  malformed_header,
  payload_out_of_bounds,
  tensor_overlap,
  misaligned_tensor,
  non_finite,
  missing_tensor,
  io_failure,
  bad_config,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::invalid_parameter: return "invalid_parameter";
    case ErrorCode::index_out_of_range: return "index_out_of_range";
    case ErrorCode::token_overflow: return "token_overflow";
    case ErrorCode::mask_mismatch: return "mask_mismatch";
    case ErrorCode::cache_mismatch: return "cache_mismatch";
    case ErrorCode::infeasible_budget: return "infeasible_budget";
    case ErrorCode::instance_too_large: return "instance_too_large";
    case ErrorCode::wrong_architecture: return "wrong_architecture";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::malformed_header: return "malformed_header";
    case ErrorCode::payload_out_of_bounds: return "payload_out_of_bounds";
    case ErrorCode::tensor_overlap: return "tensor_overlap";
    case ErrorCode::misaligned_tensor: return "misaligned_tensor";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::missing_tensor: return "missing_tensor";
    case ErrorCode::io_failure: return "io_failure";
    case ErrorCode::bad_config: return "bad_config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace optin
