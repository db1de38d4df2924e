#include "atlas/tensor_store.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>

#include "atlas/error.hpp"
#include "json.hpp"

namespace atlas {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 4> kMagic{'A', 'C', 'T', 'D'};

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xffu);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
bool get_le(std::istream& in, U& value) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) return false;
  value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return true;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
void put_payload(std::ostream& out, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    for (T v : values) put_le(out, std::bit_cast<Bits<T>>(v));
  }
}

template <typename T>
bool get_payload(std::istream& in, std::vector<T>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    const auto bytes = static_cast<std::streamsize>(values.size() * sizeof(T));
    in.read(reinterpret_cast<char*>(values.data()), bytes);
    return in.gcount() == bytes;
  } else {
    for (T& v : values) {
      Bits<T> raw{};
      if (!get_le(in, raw)) return false;
      v = std::bit_cast<T>(raw);
    }
    return true;
  }
}

std::uint64_t checked_product(const std::vector<std::uint64_t>& dims, std::size_t scalar) {
  std::uint64_t n = scalar;
  for (std::uint64_t d : dims) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) fail(Errc::extent_overflow, "extent overflow");
    n *= d;
  }
  return n;
}

void validate_dims(const std::vector<std::uint64_t>& dims, std::size_t length) {
  if (dims.empty()) fail(Errc::shape_mismatch, "blob needs at least one extent");
  for (std::uint64_t d : dims) {
    if (d < 1) fail(Errc::shape_mismatch, "blob extents must be >= 1");
  }
  if (checked_product(dims, 1) != length) fail(Errc::shape_mismatch, "dims/payload mismatch");
}

std::string shape_text(const std::vector<std::uint64_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s + "]";
}

}  // namespace

std::size_t scalar_size(DType dtype) {
  switch (dtype) {
    case DType::f32: return 4;
    case DType::i64: return 8;
    case DType::f64: return 8;
  }
  fail(Errc::unknown_dtype, "unknown dtype");
}

TensorBlob::TensorBlob(std::vector<std::uint64_t> dims, std::vector<float> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  validate_dims(dims_, size());
}
TensorBlob::TensorBlob(std::vector<std::uint64_t> dims, std::vector<std::int64_t> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  validate_dims(dims_, size());
}
TensorBlob::TensorBlob(std::vector<std::uint64_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  validate_dims(dims_, size());
}

std::size_t TensorBlob::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

std::span<const float> TensorBlob::f32() const {
  if (const auto* v = std::get_if<std::vector<float>>(&data_)) return *v;
  fail(Errc::shape_mismatch, "blob is not f32");
}
std::span<const std::int64_t> TensorBlob::i64() const {
  if (const auto* v = std::get_if<std::vector<std::int64_t>>(&data_)) return *v;
  fail(Errc::shape_mismatch, "blob is not i64");
}
std::span<const double> TensorBlob::f64() const {
  if (const auto* v = std::get_if<std::vector<double>>(&data_)) return *v;
  fail(Errc::shape_mismatch, "blob is not f64");
}

std::uint64_t write_blob(const TensorBlob& blob, std::ostream& sink) {
  sink.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(sink, kBlobVersion);
  put_le<std::uint32_t>(sink, static_cast<std::uint32_t>(blob.dtype()));
  put_le<std::uint32_t>(sink, static_cast<std::uint32_t>(blob.dims().size()));
  for (std::uint64_t d : blob.dims()) put_le<std::uint64_t>(sink, d);
  switch (blob.dtype()) {
    case DType::f32: put_payload(sink, blob.f32()); break;
    case DType::i64: put_payload(sink, blob.i64()); break;
    case DType::f64: put_payload(sink, blob.f64()); break;
  }
  if (!sink) fail(Errc::io, "write failed");
  return 16 + 8 * blob.dims().size() + blob.size() * scalar_size(blob.dtype());
}

BlobHeader read_blob_header(std::istream& source) {
  std::array<char, 4> magic{};
  source.read(magic.data(), magic.size());
  if (source.gcount() != 4) fail(Errc::truncated, "truncated");
  if (magic != kMagic) fail(Errc::bad_magic, "bad magic");
  std::uint32_t version = 0, dtype = 0, rank = 0;
  if (!get_le(source, version)) fail(Errc::truncated, "truncated");
  if (version != kBlobVersion) fail(Errc::unknown_version, "unknown version " + std::to_string(version));
  if (!get_le(source, dtype) || !get_le(source, rank)) fail(Errc::truncated, "truncated");
  if (dtype > static_cast<std::uint32_t>(DType::f64)) fail(Errc::unknown_dtype, "unknown dtype " + std::to_string(dtype));
  BlobHeader header{static_cast<DType>(dtype), {}};
  if (rank == 0) fail(Errc::shape_mismatch, "blob needs at least one extent");
  header.dims.resize(rank);
  for (auto& d : header.dims) {
    if (!get_le(source, d)) fail(Errc::truncated, "truncated");
    if (d == 0) fail(Errc::shape_mismatch, "blob extents must be >= 1");
  }
  checked_product(header.dims, scalar_size(header.dtype));
  return header;
}

TensorBlob read_blob(std::istream& source) {
  BlobHeader header = read_blob_header(source);
  const auto count = static_cast<std::size_t>(checked_product(header.dims, 1));
  auto read_as = [&]<typename T>(std::vector<T> values) {
    if (!get_payload(source, values)) fail(Errc::truncated, "truncated");
    return TensorBlob(std::move(header.dims), std::move(values));
  };
  switch (header.dtype) {
    case DType::f32: return read_as(std::vector<float>(count));
    case DType::i64: return read_as(std::vector<std::int64_t>(count));
    case DType::f64: return read_as(std::vector<double>(count));
  }
  fail(Errc::unknown_dtype, "unknown dtype");
}

void save_blob(const fs::path& path, const TensorBlob& blob) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot write " + path.string());
  write_blob(blob, out);
}

TensorBlob load_blob(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::missing_file, "missing file " + path.string());
  TensorBlob blob = read_blob(in);
  if (in.peek() != std::ifstream::traits_type::eof()) {
    fail(Errc::shape_mismatch, "dims/payload mismatch: trailing bytes in " + path.string());
  }
  return blob;
}

// ---------------------------------------------------------------------------

GridExtent LayerInfo::grid() const {
  if (kind == LayerKind::conv) return {static_cast<int>(shape[0]), static_cast<int>(shape[1])};
  return {1, 1};
}

const LayerInfo& Manifest::layer(const std::string& id) const {
  for (const auto& l : layers) {
    if (l.id == id) return l;
  }
  fail(Errc::invalid_argument, "unknown layer '" + id + "'");
}

const GeometryPair* Manifest::pair(const std::string& upper, const std::string& lower) const {
  for (const auto& g : geometry) {
    if (g.upper == upper && g.lower == lower) return &g;
  }
  return nullptr;
}

namespace {

json stage_to_json(const StageSpec& s) {
  if (s.global) return json{{"global", true}};
  return json{{"kernel", {s.kh, s.kw}}, {"stride", {s.sh, s.sw}}, {"padding", {s.ph, s.pw}}};
}

StageSpec stage_from_json(const json& j) {
  StageSpec s;
  if (j.value("global", false)) {
    s.global = true;
    return s;
  }
  auto pair_of = [&](const char* key, int fallback, int& a, int& b) {
    if (!j.contains(key)) {
      a = b = fallback;
    } else if (j[key].is_number_integer()) {
      a = b = j[key].get<int>();
    } else {
      a = j[key].at(0).get<int>();
      b = j[key].at(1).get<int>();
    }
  };
  if (!j.contains("kernel")) fail(Errc::invalid_manifest, "stage without kernel");
  pair_of("kernel", 1, s.kh, s.kw);
  pair_of("stride", 1, s.sh, s.sw);
  pair_of("padding", 0, s.ph, s.pw);
  return s;
}

}  // namespace

std::string Manifest::to_text() const {
  json layers_json = json::array();
  for (const auto& l : layers) {
    layers_json.push_back({{"id", l.id}, {"kind", l.kind == LayerKind::conv ? "conv" : "global"}, {"shape", l.shape}});
  }
  json doc{{"version", version},
           {"example_count", example_count},
           {"num_classes", num_classes},
           {"layers", layers_json},
           {"has_labels", has_labels},
           {"has_predictions", has_predictions}};
  if (!geometry.empty()) {
    json pairs = json::array();
    for (const auto& g : geometry) {
      json stages = json::array();
      for (const auto& s : g.stages) stages.push_back(stage_to_json(s));
      pairs.push_back({{"upper", g.upper}, {"lower", g.lower}, {"stages", stages}});
    }
    doc["geometry"] = {{"pairs", pairs}};
  }
  return doc.dump(2) + "\n";
}

Manifest Manifest::from_text(const std::string& text) {
  Manifest m;
  try {
    const json doc = json::parse(text);
    m.version = doc.at("version").get<std::uint32_t>();
    if (m.version != 1) fail(Errc::unknown_version, "unknown manifest version " + std::to_string(m.version));
    m.example_count = doc.at("example_count").get<std::uint64_t>();
    m.num_classes = doc.value("num_classes", std::uint64_t{0});
    m.has_labels = doc.value("has_labels", false);
    m.has_predictions = doc.value("has_predictions", false);
    std::set<std::string> seen;
    for (const auto& lj : doc.at("layers")) {
      LayerInfo l;
      l.id = lj.at("id").get<std::string>();
      const auto kind = lj.at("kind").get<std::string>();
      if (kind == "conv") {
        l.kind = LayerKind::conv;
      } else if (kind == "global") {
        l.kind = LayerKind::global;
      } else {
        fail(Errc::invalid_manifest, "layer '" + l.id + "' has unknown kind '" + kind + "'");
      }
      l.shape = lj.at("shape").get<std::vector<std::uint64_t>>();
      const std::size_t rank = l.kind == LayerKind::conv ? 3 : 1;
      if (l.shape.size() != rank) fail(Errc::invalid_manifest, "layer '" + l.id + "' has shape of wrong rank");
      for (auto e : l.shape) {
        if (e < 1) fail(Errc::invalid_manifest, "layer '" + l.id + "' has a zero extent");
      }
      if (!seen.insert(l.id).second) fail(Errc::invalid_manifest, "duplicate layer '" + l.id + "'");
      m.layers.push_back(std::move(l));
    }
    if (doc.contains("geometry")) {
      for (const auto& gj : doc["geometry"].at("pairs")) {
        GeometryPair g;
        g.upper = gj.at("upper").get<std::string>();
        g.lower = gj.at("lower").get<std::string>();
        if (!seen.contains(g.upper) || !seen.contains(g.lower)) {
          fail(Errc::invalid_manifest, "geometry pair references an unknown layer");
        }
        for (const auto& sj : gj.at("stages")) g.stages.push_back(stage_from_json(sj));
        m.geometry.push_back(std::move(g));
      }
    }
  } catch (const json::exception& e) {
    fail(Errc::invalid_manifest, std::string("manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------

LayerData::LayerData(LayerInfo info, std::shared_ptr<const TensorBlob> blob)
    : info_(std::move(info)), blob_(std::move(blob)) {
  values_ = blob_->f32();
  examples_ = static_cast<std::size_t>(blob_->dims().front());
}

ColumnView LayerData::example(std::size_t n) const { return examples(n, 1); }

ColumnView LayerData::examples(std::size_t first, std::size_t count) const {
  if (first + count > examples_) fail(Errc::out_of_range, "example index out of range");
  const std::size_t stride = positions() * dim();
  return {values_.subspan(first * stride, count * stride), dim()};
}

struct ActivationStore::State {
  fs::path root;
  Manifest manifest;
  std::optional<TensorBlob> labels;
  std::optional<TensorBlob> predictions;
  mutable std::mutex mutex;
  mutable std::map<std::string, std::shared_ptr<const TensorBlob>> cache;
};

ActivationStore::ActivationStore(std::shared_ptr<State> state) : state_(std::move(state)) {}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::missing_file, "missing file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Header check plus file-size check without touching the payload.
void check_blob_file(const fs::path& path, DType dtype, const std::vector<std::uint64_t>& expected,
                     const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::missing_file, "missing " + what + " file " + path.string());
  const BlobHeader h = read_blob_header(in);
  if (h.dtype != dtype) fail(Errc::shape_mismatch, what + ": unexpected dtype");
  if (h.dims.front() != expected.front()) {
    fail(Errc::example_count_mismatch, "example-count mismatch: " + what + " has " + std::to_string(h.dims.front()) +
                                           " examples, manifest says " + std::to_string(expected.front()));
  }
  if (h.dims != expected) {
    fail(Errc::shape_mismatch, what + ": blob dims " + shape_text(h.dims) + " do not match manifest " + shape_text(expected));
  }
  const auto header_bytes = 16 + 8 * h.dims.size();
  const auto payload = checked_product(h.dims, scalar_size(h.dtype));
  const auto actual = fs::file_size(path);
  if (actual < header_bytes + payload) fail(Errc::truncated, "truncated");
  if (actual > header_bytes + payload) fail(Errc::shape_mismatch, what + ": dims/payload mismatch");
}

TensorBlob load_class_array(const fs::path& path, const Manifest& m, const std::string& what) {
  if (!fs::exists(path)) fail(Errc::missing_file, "missing " + what + " file " + path.string());
  TensorBlob blob = load_blob(path);
  if (blob.dtype() != DType::i64 || blob.dims().size() != 1) fail(Errc::label_mismatch, what + " must be a 1-D i64 blob");
  if (blob.dims().front() != m.example_count) {
    fail(Errc::label_mismatch, what + " length " + std::to_string(blob.dims().front()) + " != example_count " +
                                   std::to_string(m.example_count));
  }
  for (std::int64_t v : blob.i64()) {
    if (v < 0 || static_cast<std::uint64_t>(v) >= m.num_classes) {
      fail(Errc::label_mismatch, what + " value " + std::to_string(v) + " outside [0, num_classes)");
    }
  }
  return blob;
}

}  // namespace

ActivationStore ActivationStore::open(const fs::path& root) {
  auto state = std::make_shared<State>();
  state->root = root;
  state->manifest = Manifest::from_text(read_text(root / "manifest.atlas"));
  const Manifest& m = state->manifest;
  if (m.example_count < 1) fail(Errc::invalid_manifest, "example_count must be >= 1");
  for (const auto& layer : m.layers) {
    std::vector<std::uint64_t> expected{m.example_count};
    expected.insert(expected.end(), layer.shape.begin(), layer.shape.end());
    check_blob_file(root / "layers" / (layer.id + ".actd"), DType::f32, expected, "layer '" + layer.id + "'");
  }
  if (m.has_labels) state->labels = load_class_array(root / "labels.actd", m, "labels");
  if (m.has_predictions) state->predictions = load_class_array(root / "predictions.actd", m, "predictions");
  return ActivationStore(std::move(state));
}

const fs::path& ActivationStore::root() const { return state_->root; }
const Manifest& ActivationStore::manifest() const { return state_->manifest; }

LayerData ActivationStore::layer(const std::string& id) const {
  const LayerInfo& info = state_->manifest.layer(id);
  std::shared_ptr<const TensorBlob> blob;
  {
    std::lock_guard lock(state_->mutex);
    auto& slot = state_->cache[id];
    if (!slot) slot = std::make_shared<const TensorBlob>(load_blob(state_->root / "layers" / (id + ".actd")));
    blob = slot;
  }
  return LayerData(info, std::move(blob));
}

std::span<const std::int64_t> ActivationStore::labels() const {
  if (!state_->labels) fail(Errc::labels_required, "labels required");
  return state_->labels->i64();
}

std::span<const std::int64_t> ActivationStore::predictions() const {
  if (!state_->predictions) fail(Errc::predictions_required, "predictions required");
  return state_->predictions->i64();
}

void write_store(const fs::path& root, const StoreContents& contents) {
  if (fs::exists(root / "manifest.atlas")) fail(Errc::io, "store already exists at " + root.string());
  fs::create_directories(root / "layers");
  Manifest m = contents.manifest;
  m.has_labels = contents.labels.has_value();
  m.has_predictions = contents.predictions.has_value();
  for (const auto& layer : m.layers) {
    auto it = contents.layers.find(layer.id);
    if (it == contents.layers.end()) fail(Errc::missing_file, "no tensor for layer '" + layer.id + "'");
    save_blob(root / "layers" / (layer.id + ".actd"), it->second);
  }
  if (contents.labels) save_blob(root / "labels.actd", *contents.labels);
  if (contents.predictions) save_blob(root / "predictions.actd", *contents.predictions);
  std::ofstream out(root / "manifest.atlas", std::ios::binary | std::ios::trunc);
  out << m.to_text();
  if (!out) fail(Errc::io, "cannot write manifest");
}

fs::path resolve_split(const fs::path& root, const std::string& split) {
  if (fs::exists(root / "manifest.atlas")) return root;
  if (fs::exists(root / split / "manifest.atlas")) return root / split;
  fail(Errc::missing_file, "no store at " + root.string() + " (looked for manifest and '" + split + "' split)");
}

}  // namespace atlas
