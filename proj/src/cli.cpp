#include "atlas/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "atlas/bundle.hpp"
#include "atlas/cooccur.hpp"
#include "atlas/error.hpp"
#include "atlas/explain.hpp"
#include "atlas/gmm.hpp"
#include "atlas/miner.hpp"
#include "atlas/rect_hmm.hpp"
#include "atlas/synth.hpp"
#include "json.hpp"

namespace atlas::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kCommands = {"synth",  "fit-gmm", "fit-hmm",  "assign", "cooccur", "neighbors", "mine",
                                            "path",   "junction", "reps",    "simmat", "export-dot"};

struct Options {
  std::string store;
  std::string bundle;
  std::string split;
  std::string out;
  std::string layer;
  std::vector<std::string> layers;
  std::string upper, lower;
  std::vector<int> k;
  std::string loss = "generative";
  std::string em = "batch";
  int epochs = 10;
  int warm_epochs = 5;
  int restarts = 1;
  std::size_t minibatch = 64;
  double step_exponent = 0.7;
  double learning_rate = 0.1;
  bool fixed_output = false;
  bool interior_only = false;
  std::optional<int> class_id;
  std::optional<std::size_t> image;
  std::size_t neighbors = 0;
  int z = 3;
  std::size_t m = 6;
  std::size_t example = 0;
  int cluster = 0;
  std::string method = "l2";
  std::string graph;
  std::uint64_t seed = 0;

  // synth
  std::string family = "gmm";
  std::size_t examples = 1000;
  std::size_t val_examples = 500;
  int components = 3;
  int dim = 4;
  std::vector<int> layer_dims{3, 3};
  double separation = 4.0;
  double sigma = 1.0;
  double offset = 2.0;
  int classes = 4;
  int grid = 8;
  double confusion = 0.05;
};

class BundleLock {
 public:
  explicit BundleLock(const fs::path& dir) {
    fs::create_directories(dir);
    fd_ = ::open((dir / ".lock").c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(Errc::io, "cannot open lock file in " + dir.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fail(Errc::io, "bundle " + dir.string() + " is in use by another invocation");
    }
  }
  ~BundleLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  BundleLock(const BundleLock&) = delete;
  BundleLock& operator=(const BundleLock&) = delete;

 private:
  int fd_ = -1;
};

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(Errc::io, "cannot write " + path.string());
    f << text;
    if (!f) fail(Errc::io, "cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? sep : "") + items[i];
  return s;
}

void require(bool ok, const std::string& what) {
  if (!ok) fail(Errc::config, what);
}

ActivationStore open_split(const Options& o, const std::string& fallback) {
  require(!o.store.empty(), "--store is required");
  return ActivationStore::open(resolve_split(o.store, o.split.empty() ? fallback : o.split));
}

EmOptions em_options(const Options& o) {
  require(o.em == "batch" || o.em == "online", "--em must be batch or online");
  require(o.epochs >= 0, "--epochs must be >= 0");
  require(o.minibatch >= 1, "--minibatch must be >= 1");
  require(o.step_exponent > 0.5 && o.step_exponent <= 1.0, "--step-exponent must lie in (0.5, 1]");
  EmOptions em;
  em.epochs = o.epochs;
  em.minibatch = o.minibatch;
  em.mode = o.em == "online" ? EmMode::online : EmMode::batch;
  em.step_exponent = o.step_exponent;
  em.seed = o.seed;
  return em;
}

int cmd_synth(const Options& o, std::ostream& out) {
  require(!o.out.empty(), "--out is required");
  SynthSpec spec;
  spec.family = parse_family(o.family);
  spec.examples = o.examples;
  spec.val_examples = o.val_examples;
  spec.seed = o.seed;
  spec.separation = o.separation;
  spec.components = o.components;
  spec.dim = o.dim;
  if (!o.k.empty()) spec.layer_components = o.k;
  spec.layer_dims = o.layer_dims;
  spec.sigma = o.sigma;
  spec.offset = o.offset;
  spec.classes = o.classes;
  spec.grid = o.grid;
  spec.confusion = o.confusion;
  spec.validate();
  if (fs::exists(fs::path(o.out) / "train")) fail(Errc::io, o.out + " already holds a dataset");
  sample_store(spec, o.out);
  out << "synth: " << family_name(spec.family) << " train=" << spec.examples << " val=" << spec.val_examples << " -> "
      << o.out << "\n";
  return kExitOk;
}

int cmd_fit_gmm(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  require(!o.layer.empty(), "--layer is required");
  const ActivationStore store = open_split(o, "train");
  const LayerData layer = store.layer(o.layer);
  BundleLock lock(o.bundle);
  ModelBundle bundle = ModelBundle::open_or_create(o.bundle);

  if (o.fixed_output) {
    const LayerGmm gmm = fixed_output_gmm(o.layer, static_cast<int>(layer.dim()));
    save_gmm(bundle, gmm);
    bundle.save();
    out << "fit-gmm: " << o.layer << " fixed output dictionary K=" << gmm.components() << "\n";
    return kExitOk;
  }

  require(o.k.size() == 1 && o.k[0] >= 1, "--k must be a single value >= 1");
  require(o.loss == "generative" || o.loss == "discriminative", "--loss must be generative or discriminative");
  std::vector<std::size_t> scope;
  std::string scope_note;
  if (o.class_id) {
    const auto classes = neighbor_classes(store.labels(), store.predictions(), *o.class_id, o.neighbors);
    std::vector<int> list(classes.begin(), classes.end());
    scope = examples_of_classes(store.labels(), list);
    if (scope.empty()) fail(Errc::empty_input, "no training examples in the class-neighbor scope");
    for (int c : classes) scope_note += (scope_note.empty() ? "" : ",") + std::to_string(c);
  }

  require(o.restarts >= 1, "--restarts must be >= 1");
  if (o.loss == "generative") {
    const FitResult fit = fit_gmm(layer, o.k[0], em_options(o), o.restarts, o.layer, scope);
    const LayerGmm& gmm = fit.gmm;
    const EmReport& r = fit.report;
    save_gmm(bundle, gmm);
    bundle.save();
    out << "fit-gmm: " << o.layer << " K=" << gmm.components() << " " << o.em
        << " nll=" << fixed(r.nll.empty() ? r.initial_nll : r.nll.back());
  } else {
    require(store.has_labels(), "discriminative training needs labels");
    EmOptions warm = em_options(o);
    warm.epochs = o.warm_epochs;
    LayerGmm gmm = fit_gmm(layer, o.k[0], warm, o.restarts, o.layer, scope).gmm;
    HistClassifier clf =
        HistClassifier::random(static_cast<int>(store.manifest().num_classes), gmm.components(), o.seed, 0.01);
    DiscriminativeOptions d;
    d.epochs = o.epochs;
    d.minibatch = o.minibatch;
    d.learning_rate = o.learning_rate;
    d.seed = o.seed;
    const DiscriminativeReport r = discriminative_fit(gmm, clf, layer, store.labels(), d, scope);
    save_gmm(bundle, gmm, clf);
    bundle.save();
    out << "fit-gmm: " << o.layer << " K=" << gmm.components() << " discriminative loss="
        << fixed(r.loss.empty() ? 0.0 : r.loss.back())
        << " error=" << fixed(r.error.empty() ? 0.0 : r.error.back());
  }
  if (!scope_note.empty()) out << " scope=" << scope_note;
  out << "\n";
  return kExitOk;
}

std::vector<LayerData> hmm_layers(const ActivationStore& store, const std::vector<std::string>& ids) {
  std::vector<LayerData> layers;
  for (const auto& id : ids) {
    layers.push_back(store.layer(id));
    if (layers.back().positions() != 1) fail(Errc::invalid_argument, "layer '" + id + "' is not fully connected");
  }
  return layers;
}

int cmd_fit_hmm(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  require(o.layers.size() >= 1, "--layers is required");
  require(o.k.size() == o.layers.size(), "--k needs one value per layer");
  for (int k : o.k) require(k >= 1, "--k values must be >= 1");
  const ActivationStore store = open_split(o, "train");
  const auto layers = hmm_layers(store, o.layers);
  BundleLock lock(o.bundle);
  ModelBundle bundle = ModelBundle::open_or_create(o.bundle);
  RectHmm model = init_hmm(layers, o.k, o.seed);
  const HmmReport r = hmm_em_fit(model, layers, em_options(o));
  save_hmm(bundle, model);
  bundle.save();
  out << "fit-hmm: " << join(o.layers, ",") << " nll=" << fixed(r.nll.empty() ? r.initial_nll : r.nll.back());
  if (r.clamped > 0) out << " clamped=" << r.clamped;
  out << "\n";
  return kExitOk;
}

int cmd_assign(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  std::vector<std::string> ids = o.layers;
  if (!o.layer.empty()) ids.push_back(o.layer);
  require(!ids.empty(), "--layer or --layers is required");
  const ActivationStore store = open_split(o, "val");
  BundleLock lock(o.bundle);
  ModelBundle bundle = ModelBundle::open(o.bundle);

  std::optional<RectHmm> hmm;
  std::vector<std::vector<int>> paths;
  std::vector<std::string> summary;
  for (const auto& id : ids) {
    AssignmentGrid grid;
    if (bundle.has(gmm_record(id))) {
      grid = assign_layer(load_gmm(bundle, id), store.layer(id));
    } else if (bundle.has(kHmmRecord)) {
      if (!hmm) {
        hmm = load_hmm(bundle);
        paths = decode_all(*hmm, hmm_layers(store, hmm->layer_ids));
      }
      const auto it = std::find(hmm->layer_ids.begin(), hmm->layer_ids.end(), id);
      if (it == hmm->layer_ids.end()) fail(Errc::missing_model, "no model for layer '" + id + "'");
      const auto l = static_cast<std::size_t>(it - hmm->layer_ids.begin());
      grid = {id, {1, 1}, hmm->components(l), store.example_count(), paths[l]};
    } else {
      fail(Errc::missing_model, "no model for layer '" + id + "'");
    }
    save_assignments(bundle, grid);
    summary.push_back(id + "(" + std::to_string(grid.examples) + "x" + std::to_string(grid.grid.size()) + ")");
  }
  bundle.save();
  out << "assign: " << join(summary, " ") << "\n";
  return kExitOk;
}

int cmd_cooccur(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  std::vector<std::pair<std::string, std::string>> pairs;
  if (!o.upper.empty() || !o.lower.empty()) {
    require(!o.upper.empty() && !o.lower.empty(), "--upper and --lower go together");
    pairs.emplace_back(o.upper, o.lower);
  }
  for (std::size_t i = 0; i + 1 < o.layers.size(); ++i) pairs.emplace_back(o.layers[i + 1], o.layers[i]);
  require(!pairs.empty(), "--upper/--lower or --layers is required");
  const ActivationStore store = open_split(o, "val");
  BundleLock lock(o.bundle);
  ModelBundle bundle = ModelBundle::open(o.bundle);
  std::vector<std::string> summary;
  for (const auto& [upper, lower] : pairs) {
    const AssignmentGrid up = load_assignments(bundle, upper);
    const AssignmentGrid low = load_assignments(bundle, lower);
    const FieldMap fm = resolve_geometry(store.manifest(), upper, lower);
    const CoocModel model = count_cooccurrence(up, low, fm, {}, o.interior_only);
    save_cooc(bundle, model);
    summary.push_back(upper + "<-" + lower + " total=" + std::to_string(model.total()));
  }
  bundle.save();
  out << "cooccur: " << join(summary, ", ") << "\n";
  return kExitOk;
}

int cmd_neighbors(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  require(o.class_id.has_value(), "--class is required");
  const ActivationStore store = open_split(o, "val");
  const auto classes = neighbor_classes(store.labels(), store.predictions(), *o.class_id, o.neighbors);
  BundleLock lock(o.bundle);
  ModelBundle bundle = ModelBundle::open_or_create(o.bundle);
  bundle.put_record("neighbors_" + std::to_string(*o.class_id), {{"class", *o.class_id}, {"classes", classes}});
  bundle.save();
  std::vector<std::string> names;
  for (int c : classes) names.push_back(std::to_string(c));
  out << "neighbors: class " << *o.class_id << " -> " << join(names, ",") << "\n";
  return kExitOk;
}

int cmd_mine(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  require(o.layers.size() >= 2, "--layers needs at least two layers, lowest first");
  require(o.class_id.has_value() != o.image.has_value(), "exactly one of --class and --image is required");
  require(o.z >= 1, "--z must be >= 1");
  const ActivationStore store = open_split(o, "val");
  BundleLock lock(o.bundle);
  const ModelBundle bundle = ModelBundle::open(o.bundle);
  GraphScope scope;
  if (o.class_id) {
    scope = {GraphScope::Kind::class_scope, *o.class_id, 0};
  } else {
    scope = {GraphScope::Kind::image_scope, 0, *o.image};
  }
  const InferenceGraph g = build_graph(bundle, store, o.layers, scope, o.z);
  const fs::path base = fs::path(o.bundle) / ("graph_" + scope.tag());
  write_json(base.string() + ".json", graph_to_json(g));
  write_text(base.string() + ".dot", graph_to_dot(g));
  std::size_t drawn = 0;
  for (const auto& e : g.edges) drawn += e.drawn;
  out << "mine: " << scope.tag() << " images=" << g.omega_size << " nodes=" << g.nodes.size() << " edges=" << drawn
      << " -> " << base.string() << ".json\n";
  return kExitOk;
}

int cmd_path(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  const ActivationStore store = open_split(o, "val");
  BundleLock lock(o.bundle);
  const ModelBundle bundle = ModelBundle::open(o.bundle);
  const RectHmm model = load_hmm(bundle);
  const auto layers = hmm_layers(store, model.layer_ids);
  if (o.example >= store.example_count()) fail(Errc::out_of_range, "example index out of range");
  std::vector<std::vector<float>> buffer;
  Observation obs;
  gather(layers, o.example, buffer, obs);
  const LayerPath path = viterbi(model, obs);
  std::vector<std::string> steps;
  for (std::size_t l = 0; l < path.states.size(); ++l) {
    steps.push_back(model.layer_ids[l] + ":" + std::to_string(path.states[l]));
  }
  write_json(fs::path(o.bundle) / ("path_" + std::to_string(o.example) + ".json"),
             {{"example", o.example},
              {"layers", model.layer_ids},
              {"states", path.states},
              {"log_joint", path.log_joint},
              {"log_posterior", path.log_posterior}});
  out << "path: example " << o.example << " -> " << join(steps, " ") << " log_posterior=" << fixed(path.log_posterior)
      << "\n";
  return kExitOk;
}

int cmd_junction(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  require(!o.layer.empty(), "--layer is required");
  require(o.method == "l2" || o.method == "llr", "--method must be l2 or llr");
  const ActivationStore store = open_split(o, "val");
  BundleLock lock(o.bundle);
  const ModelBundle bundle = ModelBundle::open(o.bundle);
  const Junction j = junction(bundle, store, o.layer, o.cluster, o.m);
  json doc = junction_to_json(j);
  doc["method"] = o.method;
  const fs::path file = fs::path(o.bundle) / ("junction_" + o.layer + "_" + std::to_string(o.cluster) + ".json");
  write_json(file, doc);
  out << "junction: " << o.layer << ":" << o.cluster << " size=" << j.members.size()
      << " subclusters=" << j.subclusters.size();
  for (const auto& s : j.subclusters) out << " [" << j.next_layer << ":" << s.next << " p=" << fixed(s.transition, 3) << "]";
  if (o.method == "llr" && j.single_subcluster) out << " (single sub-cluster; l2 representatives only)";
  out << " -> " << file.string() << "\n";
  return kExitOk;
}

/// Words covering less than this share of an image are shown as receptive-field crops.
constexpr double kCropThreshold = 0.05;

int cmd_reps(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  require(!o.layer.empty(), "--layer is required");
  const ActivationStore store = open_split(o, "val");
  BundleLock lock(o.bundle);
  const ModelBundle bundle = ModelBundle::open(o.bundle);
  const LayerGmm gmm = load_gmm(bundle, o.layer);
  const LayerData layer = store.layer(o.layer);
  const auto occ = top_m_examples(gmm, layer, o.cluster, o.m);
  const GridExtent grid = layer.info().grid();
  std::vector<std::pair<std::string, FieldMap>> fields;
  for (const auto& pair : store.manifest().geometry) {
    if (pair.upper == o.layer) fields.emplace_back(pair.lower, resolve_geometry(store.manifest(), pair.upper, pair.lower));
  }
  json items = json::array();
  for (const auto& e : occ) {
    const auto words = assign(gmm, layer.example(e.example));
    const auto count = std::count(words.begin(), words.end(), o.cluster);
    const double fraction = static_cast<double>(count) / static_cast<double>(words.size());
    const Position p{static_cast<int>(e.position) / grid.w, static_cast<int>(e.position) % grid.w};
    // Receptive-field rectangle in each lower layer, clipped to its grid.
    json rects = json::array();
    for (const auto& [lower, fm] : fields) {
      const int y0 = std::max(0, p.y * fm.scale_y + fm.origin_y), x0 = std::max(0, p.x * fm.scale_x + fm.origin_x);
      const int y1 = std::min(fm.lower.h, p.y * fm.scale_y + fm.origin_y + fm.extent_y);
      const int x1 = std::min(fm.lower.w, p.x * fm.scale_x + fm.origin_x + fm.extent_x);
      rects.push_back({{"layer", lower}, {"y", y0}, {"x", x0}, {"h", y1 - y0}, {"w", x1 - x0}});
    }
    items.push_back({{"example", e.example},
                     {"position", {p.y, p.x}},
                     {"responsibility", e.responsibility},
                     {"log_density", e.log_density},
                     {"word_fraction", fraction},
                     {"crop", fraction < kCropThreshold},
                     {"receptive_field", rects}});
  }
  const fs::path file = fs::path(o.bundle) / ("reps_" + o.layer + "_" + std::to_string(o.cluster) + ".json");
  write_json(file, {{"layer", o.layer}, {"cluster", o.cluster}, {"representatives", items}});
  out << "reps: " << o.layer << ":" << o.cluster << " count=" << occ.size() << " -> " << file.string() << "\n";
  return kExitOk;
}

int cmd_simmat(const Options& o, std::ostream& out) {
  require(!o.bundle.empty(), "--bundle is required");
  require(!o.layer.empty(), "--layer is required");
  const ActivationStore store = open_split(o, "val");
  BundleLock lock(o.bundle);
  ModelBundle bundle = ModelBundle::open(o.bundle);
  RowMatrix means;
  if (bundle.has(gmm_record(o.layer))) {
    means = load_gmm(bundle, o.layer).mu;
  } else {
    const RectHmm model = load_hmm(bundle);
    const auto it = std::find(model.layer_ids.begin(), model.layer_ids.end(), o.layer);
    if (it == model.layer_ids.end()) fail(Errc::missing_model, "no model for layer '" + o.layer + "'");
    means = model.mu[static_cast<std::size_t>(it - model.layer_ids.begin())];
  }
  const AssignmentGrid grid = load_assignments(bundle, o.layer);
  if (grid.examples != store.example_count()) {
    fail(Errc::example_count_mismatch, "assignments were computed on a different split");
  }
  const SimilarityReport r = similarity_report(o.layer, means, grid, store.labels());
  const std::string record = "simmat_" + o.layer;
  bundle.put_blob(record, "distances", matrix_blob(r.distances));
  json meta = similarity_to_json(r);
  meta.erase("distances");
  bundle.put_record(record, meta);
  bundle.save();
  write_json(fs::path(o.bundle) / (record + ".json"), similarity_to_json(r));
  out << "simmat: " << o.layer << " K=" << r.distances.rows() << " dominant=" << fixed(100.0 * r.average_dominant, 2)
      << "%\n";
  return kExitOk;
}

int cmd_export_dot(const Options& o, std::ostream& out) {
  require(!o.graph.empty(), "--graph is required");
  std::ifstream f(o.graph);
  if (!f) fail(Errc::missing_file, "cannot open " + o.graph);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& ex) {
    fail(Errc::invalid_manifest, o.graph + ": " + ex.what());
  }
  const InferenceGraph g = graph_from_json(doc);
  fs::path target = o.out.empty() ? fs::path(o.graph).replace_extension(".dot") : fs::path(o.out);
  write_text(target, graph_to_dot(g));
  out << "export-dot: " << g.nodes.size() << " nodes -> " << target.string() << "\n";
  return kExitOk;
}

std::vector<std::string> config_args(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Errc::config, "cannot open config " + path);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& ex) {
    fail(Errc::config, path + ": " + ex.what());
  }
  if (!doc.is_object()) fail(Errc::config, path + ": expected an object");
  std::vector<std::string> args;
  for (const auto& [key, value] : doc.items()) {
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_array()) {
      for (const auto& v : value) text += (text.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
    } else if (value.is_number() || value.is_boolean()) {
      text = value.dump();
    } else {
      fail(Errc::config, path + ": unsupported value for '" + key + "'");
    }
    args.push_back("--" + key + "=" + text);
  }
  return args;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty() || (args[0] != "--help" && args[0] != "-h" &&
                       std::find(kCommands.begin(), kCommands.end(), args[0]) == kCommands.end())) {
    err << "error: unknown-subcommand: " << (args.empty() ? std::string("(none)") : args[0]) << "\n";
    return kExitUnknownCommand;
  }

  Options o;
  CLI::App app{"Activation atlas: visual-word dictionaries and inference graphs", "atlas"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::string config;
  std::map<std::string, std::function<int(const Options&, std::ostream&)>> handlers;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", config, "JSON document with flag values");
    c->add_option("--seed", o.seed, "Seed for every random draw");
  };
  auto store_opts = [&](CLI::App* c) {
    c->add_option("--store", o.store, "Dataset root or store directory");
    c->add_option("--split", o.split, "Split subdirectory of the dataset root");
    c->add_option("--bundle", o.bundle, "Model bundle directory");
  };
  auto em_opts = [&](CLI::App* c) {
    c->add_option("--em", o.em, "batch | online");
    c->add_option("--epochs", o.epochs, "Training epochs");
    c->add_option("--minibatch", o.minibatch, "Examples per minibatch");
    c->add_option("--step-exponent", o.step_exponent, "Online EM step exponent");
  };
  auto add = [&](const std::string& name, const std::string& help, auto handler) {
    CLI::App* c = app.add_subcommand(name, help);
    common(c);
    handlers[name] = handler;
    return c;
  };

  {
    auto* c = add("synth", "Sample a synthetic dataset with ground truth", cmd_synth);
    c->add_option("--family", o.family, "gmm | rect-hmm | planted-cooc");
    c->add_option("--out", o.out, "Output dataset root");
    c->add_option("--examples", o.examples, "Training examples");
    c->add_option("--val-examples", o.val_examples, "Validation examples");
    c->add_option("--components", o.components, "gmm: mixture components");
    c->add_option("--dim", o.dim, "gmm: dimension");
    c->add_option("--k", o.k, "rect-hmm: components per layer")->delimiter(',');
    c->add_option("--layer-dims", o.layer_dims, "rect-hmm: units per layer")->delimiter(',');
    c->add_option("--separation", o.separation, "Separation scale");
    c->add_option("--sigma", o.sigma, "Noise scale");
    c->add_option("--offset", o.offset, "rect-hmm: mean offset in units of sigma");
    c->add_option("--classes", o.classes, "planted-cooc: classes");
    c->add_option("--grid", o.grid, "planted-cooc: lower grid size");
    c->add_option("--confusion", o.confusion, "planted-cooc: misprediction rate");
  }
  {
    auto* c = add("fit-gmm", "Fit a layer dictionary", cmd_fit_gmm);
    store_opts(c);
    em_opts(c);
    c->add_option("--layer", o.layer, "Layer id");
    c->add_option("--k", o.k, "Dictionary size");
    c->add_option("--loss", o.loss, "generative | discriminative");
    c->add_option("--warm-epochs", o.warm_epochs, "EM epochs before discriminative training");
    c->add_option("--restarts", o.restarts, "EM runs from different seeds; the best likelihood is kept");
    c->add_option("--lr", o.learning_rate, "Discriminative learning rate");
    c->add_flag("--fixed-output", o.fixed_output, "Use the fixed one-hot output dictionary");
    c->add_option("--class", o.class_id, "Restrict training to the class-neighbor scope of this class");
    c->add_option("--neighbors", o.neighbors, "Neighbor classes in the scope");
  }
  {
    auto* c = add("fit-hmm", "Fit the rectified-Gaussian layer HMM", cmd_fit_hmm);
    store_opts(c);
    em_opts(c);
    c->add_option("--layers", o.layers, "Layer ids, input side first")->delimiter(',');
    c->add_option("--k", o.k, "Components per layer")->delimiter(',');
  }
  {
    auto* c = add("assign", "Compute hard word assignments", cmd_assign);
    store_opts(c);
    c->add_option("--layer", o.layer, "Layer id");
    c->add_option("--layers", o.layers, "Layer ids")->delimiter(',');
  }
  {
    auto* c = add("cooccur", "Count word co-occurrences between layers", cmd_cooccur);
    store_opts(c);
    c->add_option("--upper", o.upper, "Upper layer id");
    c->add_option("--lower", o.lower, "Lower layer id");
    c->add_option("--layers", o.layers, "Consecutive layer ids, lowest first")->delimiter(',');
    c->add_flag("--interior-only", o.interior_only, "Skip upper positions with clipped windows");
  }
  {
    auto* c = add("neighbors", "List the class-neighbor scope of a class", cmd_neighbors);
    store_opts(c);
    c->add_option("--class", o.class_id, "Class index");
    c->add_option("--max", o.neighbors, "Neighbor classes to keep");
  }
  {
    auto* c = add("mine", "Build an inference graph", cmd_mine);
    store_opts(c);
    c->add_option("--layers", o.layers, "Layer ids, lowest first, output last")->delimiter(',');
    c->add_option("--class", o.class_id, "Explain a predicted class");
    c->add_option("--image", o.image, "Explain one image");
    c->add_option("--z", o.z, "Words per layer");
  }
  {
    auto* c = add("path", "Viterbi path of one example", cmd_path);
    store_opts(c);
    c->add_option("--example", o.example, "Example index")->required();
  }
  {
    auto* c = add("junction", "Decision junction of an HMM cluster", cmd_junction);
    store_opts(c);
    c->add_option("--layer", o.layer, "Layer id");
    c->add_option("--cluster", o.cluster, "Cluster index");
    c->add_option("--m", o.m, "Representatives per sub-cluster");
    c->add_option("--method", o.method, "l2 | llr");
  }
  {
    auto* c = add("reps", "Top representatives of a word", cmd_reps);
    store_opts(c);
    c->add_option("--layer", o.layer, "Layer id");
    c->add_option("--cluster", o.cluster, "Word index");
    c->add_option("--m", o.m, "Representatives");
  }
  {
    auto* c = add("simmat", "Cluster similarity matrix and dominant classes", cmd_simmat);
    store_opts(c);
    c->add_option("--layer", o.layer, "Layer id");
  }
  {
    auto* c = add("export-dot", "Render a graph document as DOT", cmd_export_dot);
    c->add_option("--graph", o.graph, "Graph JSON file");
    c->add_option("--out", o.out, "Output file");
  }

  try {
    std::vector<std::string> argv_text{"atlas", args[0]};
    for (std::size_t i = 1; i < args.size(); ++i) {
      if ((args[i] == "--config") && i + 1 < args.size()) {
        for (auto& a : config_args(args[i + 1])) argv_text.push_back(std::move(a));
      } else if (args[i].rfind("--config=", 0) == 0) {
        for (auto& a : config_args(args[i].substr(9))) argv_text.push_back(std::move(a));
      }
    }
    for (std::size_t i = 1; i < args.size(); ++i) argv_text.push_back(args[i]);
    std::vector<const char*> argv;
    for (const auto& a : argv_text) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: config: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const Error& ex) {
    err << "error: " << errc_name(ex.code()) << ": " << ex.what() << "\n";
    return kExitConfig;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    return handlers.at(name)(o, out);
  } catch (const Error& ex) {
    err << "error: " << errc_name(ex.code()) << ": " << ex.what() << "\n";
    return ex.code() == Errc::config ? kExitConfig : kExitRuntime;
  } catch (const std::exception& ex) {
    err << "error: io: " << ex.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace atlas::cli
