#include "atlas/error.hpp"

namespace atlas {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::io: return "io";
    case Errc::bad_magic: return "bad-magic";
    case Errc::unknown_version: return "unknown-version";
    case Errc::unknown_dtype: return "unknown-dtype";
    case Errc::truncated: return "truncated";
    case Errc::shape_mismatch: return "shape-mismatch";
    case Errc::extent_overflow: return "extent-overflow";
    case Errc::invalid_manifest: return "invalid-manifest";
    case Errc::missing_file: return "missing-file";
    case Errc::example_count_mismatch: return "example-count-mismatch";
    case Errc::label_mismatch: return "label-mismatch";
    case Errc::labels_required: return "labels-required";
    case Errc::predictions_required: return "predictions-required";
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::out_of_range: return "out-of-range";
    case Errc::negative_activation: return "negative-activation";
    case Errc::numerical: return "numerical";
    case Errc::empty_input: return "empty-input";
    case Errc::missing_model: return "missing-model";
    case Errc::config: return "config";
  }
  return "unknown";
}

}  // namespace atlas
