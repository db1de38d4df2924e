#include "atlas/bundle.hpp"

#include <fstream>

#include "atlas/error.hpp"

namespace atlas {
namespace fs = std::filesystem;
using nlohmann::json;

ModelBundle ModelBundle::open(const fs::path& dir) {
  ModelBundle b(dir);
  std::ifstream in(dir / "bundle.atlas");
  if (!in) fail(Errc::missing_model, "no model bundle at " + dir.string());
  try {
    b.doc_ = json::parse(in);
  } catch (const json::exception& e) {
    fail(Errc::invalid_manifest, std::string("bundle.atlas: ") + e.what());
  }
  if (b.doc_.value("version", 0) != 1) fail(Errc::unknown_version, "unknown bundle version");
  return b;
}

ModelBundle ModelBundle::open_or_create(const fs::path& dir) {
  if (fs::exists(dir / "bundle.atlas")) return open(dir);
  fs::create_directories(dir);
  ModelBundle b(dir);
  b.doc_ = json{{"version", 1}, {"provenance", json::object()}, {"records", json::object()}};
  b.save();
  return b;
}

bool ModelBundle::has(const std::string& record) const { return doc_.at("records").contains(record); }

const json& ModelBundle::record(const std::string& name) const {
  if (!has(name)) fail(Errc::missing_model, "bundle has no record '" + name + "'");
  return doc_.at("records").at(name);
}

std::vector<std::string> ModelBundle::records() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : doc_.at("records").items()) names.push_back(name);
  return names;
}

void ModelBundle::put_record(const std::string& name, json meta) { doc_["records"][name] = std::move(meta); }

void ModelBundle::put_blob(const std::string& record, const std::string& field, const TensorBlob& blob) const {
  save_blob(dir_ / "blobs" / (record + "." + field + ".actd"), blob);
}

TensorBlob ModelBundle::blob(const std::string& record, const std::string& field) const {
  const fs::path path = dir_ / "blobs" / (record + "." + field + ".actd");
  if (!fs::exists(path)) fail(Errc::missing_model, "bundle record '" + record + "' lacks field '" + field + "'");
  return load_blob(path);
}

void ModelBundle::save() const {
  const fs::path tmp = dir_ / "bundle.atlas.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << doc_.dump(2) << "\n";
    if (!out) fail(Errc::io, "cannot write " + tmp.string());
  }
  fs::rename(tmp, dir_ / "bundle.atlas");
}

}  // namespace atlas
