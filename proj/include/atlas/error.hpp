#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace atlas {

enum class Errc {
  io,
  bad_magic,
  unknown_version,
  unknown_dtype,
  truncated,
  shape_mismatch,
  extent_overflow,
  invalid_manifest,
  missing_file,
  example_count_mismatch,
  label_mismatch,
  labels_required,
  predictions_required,
  invalid_argument,
  dimension_mismatch,
  out_of_range,
  negative_activation,
  numerical,
  empty_input,
  missing_model,
  config,
};

/// Short stable identifier used in CLI diagnostics ("bad-magic", "truncated", ...).
std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace atlas
