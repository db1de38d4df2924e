#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "atlas/recfield.hpp"

namespace atlas {

// ---------------------------------------------------------------------------
// Blob container
//
//   "ACTD" | version u32 | dtype u32 | rank u32 | extents u64[rank] | payload
//
// All integers and scalars little-endian, payload row-major. Activation dumps
// use f32 and i64 only; f64 is reserved for trained model parameters.
// ---------------------------------------------------------------------------

enum class DType : std::uint32_t { f32 = 0, i64 = 1, f64 = 2 };

inline constexpr std::uint32_t kBlobVersion = 1;

std::size_t scalar_size(DType dtype);

class TensorBlob {
 public:
  TensorBlob() = default;
  TensorBlob(std::vector<std::uint64_t> dims, std::vector<float> data);
  TensorBlob(std::vector<std::uint64_t> dims, std::vector<std::int64_t> data);
  TensorBlob(std::vector<std::uint64_t> dims, std::vector<double> data);

  DType dtype() const { return static_cast<DType>(data_.index()); }
  const std::vector<std::uint64_t>& dims() const { return dims_; }
  std::size_t size() const;

  std::span<const float> f32() const;
  std::span<const std::int64_t> i64() const;
  std::span<const double> f64() const;

  friend bool operator==(const TensorBlob&, const TensorBlob&) = default;

 private:
  std::vector<std::uint64_t> dims_;
  std::variant<std::vector<float>, std::vector<std::int64_t>, std::vector<double>> data_;
};

/// Serializes `blob`; returns the number of bytes written.
std::uint64_t write_blob(const TensorBlob& blob, std::ostream& sink);
TensorBlob read_blob(std::istream& source);

/// Reads only the header (dtype + dims) and leaves the stream at the payload.
struct BlobHeader {
  DType dtype;
  std::vector<std::uint64_t> dims;
};
BlobHeader read_blob_header(std::istream& source);

void save_blob(const std::filesystem::path& path, const TensorBlob& blob);
/// Whole-file read; trailing bytes after the payload are a shape mismatch.
TensorBlob load_blob(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Activation store
// ---------------------------------------------------------------------------

enum class LayerKind { conv, global };

struct LayerInfo {
  std::string id;
  LayerKind kind = LayerKind::global;
  std::vector<std::uint64_t> shape;  // (H, W, D) for conv, (D) for global

  std::size_t dim() const { return static_cast<std::size_t>(shape.back()); }
  GridExtent grid() const;
  std::size_t positions() const { return grid().size(); }
};

struct GeometryPair {
  std::string upper;
  std::string lower;
  std::vector<StageSpec> stages;
};

struct Manifest {
  std::uint32_t version = 1;
  std::uint64_t example_count = 0;
  std::uint64_t num_classes = 0;
  std::vector<LayerInfo> layers;
  bool has_labels = false;
  bool has_predictions = false;
  std::vector<GeometryPair> geometry;

  const LayerInfo& layer(const std::string& id) const;
  const GeometryPair* pair(const std::string& upper, const std::string& lower) const;

  std::string to_text() const;
  static Manifest from_text(const std::string& text);
};

/// Row-major set of activation columns (one D-vector per row).
struct ColumnView {
  std::span<const float> data;
  std::size_t dim = 0;

  std::size_t rows() const { return dim == 0 ? 0 : data.size() / dim; }
  std::span<const float> row(std::size_t i) const { return data.subspan(i * dim, dim); }
};

/// Loaded tensor of one layer: example n owns positions() consecutive columns.
class LayerData {
 public:
  LayerData(LayerInfo info, std::shared_ptr<const TensorBlob> blob);

  const LayerInfo& info() const { return info_; }
  std::size_t examples() const { return examples_; }
  std::size_t positions() const { return info_.positions(); }
  std::size_t dim() const { return info_.dim(); }

  ColumnView all() const { return {values_, dim()}; }
  ColumnView example(std::size_t n) const;
  ColumnView examples(std::size_t first, std::size_t count) const;

 private:
  LayerInfo info_;
  std::shared_ptr<const TensorBlob> blob_;
  std::span<const float> values_;
  std::size_t examples_ = 0;
};

/// On-disk container of per-layer activations, labels and predictions.
///
/// Layout: `manifest.atlas`, `layers/<id>.actd`, `labels.actd`,
/// `predictions.actd`. Opening validates every blob header against the
/// manifest; payloads are read on first access and then shared.
class ActivationStore {
 public:
  static ActivationStore open(const std::filesystem::path& root);

  const std::filesystem::path& root() const;
  const Manifest& manifest() const;
  std::size_t example_count() const { return static_cast<std::size_t>(manifest().example_count); }

  LayerData layer(const std::string& id) const;
  std::span<const std::int64_t> labels() const;
  std::span<const std::int64_t> predictions() const;
  bool has_labels() const { return manifest().has_labels; }
  bool has_predictions() const { return manifest().has_predictions; }

 private:
  struct State;
  explicit ActivationStore(std::shared_ptr<State> state);
  std::shared_ptr<State> state_;
};

/// Writes a complete store. Fails if `root` already holds a manifest.
struct StoreContents {
  Manifest manifest;
  std::map<std::string, TensorBlob> layers;
  std::optional<TensorBlob> labels;
  std::optional<TensorBlob> predictions;
};
void write_store(const std::filesystem::path& root, const StoreContents& contents);

/// Resolves a dataset root to a store: `root` itself when it has a manifest,
/// otherwise `root/<split>`.
std::filesystem::path resolve_split(const std::filesystem::path& root, const std::string& split);

}  // namespace atlas
