#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace icpw {

/// Stable machine-readable error categories. The string form returned by
/// `to_string` is part of the CLI contract and must not change.
enum class ErrorCode {
  schema,
  parse,
  empty_data,
  range,
  invalid_argument,
  estimability,
  degeneracy,
  domain,
  size_limit,
  no_information,
  separation,
  singular,
  numerical,
  bootstrap_unreliable,
  io,
  internal,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::schema: return "schema_error";
    case ErrorCode::parse: return "parse_error";
    case ErrorCode::empty_data: return "empty_data";
    case ErrorCode::range: return "range_error";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::estimability: return "estimability_error";
    case ErrorCode::degeneracy: return "degeneracy_error";
    case ErrorCode::domain: return "domain_error";
    case ErrorCode::size_limit: return "size_error";
    case ErrorCode::no_information: return "no_information";
    case ErrorCode::separation: return "separation_error";
    case ErrorCode::singular: return "singularity_error";
    case ErrorCode::numerical: return "numerical_error";
    case ErrorCode::bootstrap_unreliable: return "bootstrap_unreliable";
    case ErrorCode::io: return "io_error";
    case ErrorCode::internal: return "internal_error";
  }
  return "internal_error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace icpw
