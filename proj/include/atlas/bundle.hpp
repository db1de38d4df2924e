#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "atlas/tensor_store.hpp"
#include "json.hpp"

namespace atlas {

/// Directory of trained parameters and derived tables.
///
/// `bundle.atlas` holds provenance and one metadata record per model
/// (`gmm_<layer>`, `hmm`, `cooc_<upper>__<lower>`, `assign_<layer>`, ...);
/// array fields live in `blobs/<record>.<field>.actd`.
class ModelBundle {
 public:
  static ModelBundle open(const std::filesystem::path& dir);
  static ModelBundle open_or_create(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }

  bool has(const std::string& record) const;
  const nlohmann::json& record(const std::string& name) const;
  std::vector<std::string> records() const;
  void put_record(const std::string& name, nlohmann::json meta);

  void put_blob(const std::string& record, const std::string& field, const TensorBlob& blob) const;
  TensorBlob blob(const std::string& record, const std::string& field) const;

  nlohmann::json& provenance() { return doc_["provenance"]; }
  const nlohmann::json& provenance() const { return doc_.at("provenance"); }

  /// Rewrites bundle.atlas; blobs are written eagerly by put_blob.
  void save() const;

 private:
  explicit ModelBundle(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::filesystem::path dir_;
  nlohmann::json doc_;
};

}  // namespace atlas
