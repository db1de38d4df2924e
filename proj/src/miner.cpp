#include "atlas/miner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "atlas/bundle.hpp"
#include "atlas/error.hpp"

namespace atlas {
using nlohmann::json;

FieldMap resolve_geometry(const Manifest& manifest, const std::string& upper, const std::string& lower) {
  const LayerInfo& up = manifest.layer(upper);
  const LayerInfo& low = manifest.layer(lower);
  FieldMap fm;
  if (const GeometryPair* pair = manifest.pair(upper, lower)) {
    fm = compose(pair->stages, low.grid());
  } else if (up.kind == LayerKind::global) {
    const StageSpec pool{.global = true};
    fm = compose(std::span(&pool, 1), low.grid());
  } else {
    fail(Errc::missing_model, "no geometry declared for layer pair " + upper + " <- " + lower);
  }
  if (fm.upper != up.grid()) {
    fail(Errc::shape_mismatch, "stage chain " + lower + " -> " + upper + " yields a " + std::to_string(fm.upper.h) +
                                   "x" + std::to_string(fm.upper.w) + " grid, layer is " +
                                   std::to_string(up.grid().h) + "x" + std::to_string(up.grid().w));
  }
  return fm;
}

namespace {

void check_pair(const AssignmentGrid& upper, const AssignmentGrid& lower, const FieldMap& fm,
                std::span<const std::size_t> omega) {
  if (upper.grid != fm.upper || lower.grid != fm.lower) fail(Errc::shape_mismatch, "assignment grids do not match geometry");
  if (omega.empty()) fail(Errc::empty_input, "empty image set");
  for (std::size_t n : omega) {
    if (n >= upper.examples || n >= lower.examples) fail(Errc::out_of_range, "image index out of range");
  }
}

}  // namespace

WordOccurrenceCounts word_counts(const AssignmentGrid& upper, const AssignmentGrid& lower, const FieldMap& fm,
                                 std::span<const std::size_t> omega) {
  check_pair(upper, lower, fm, omega);
  WordOccurrenceCounts wc;
  wc.q = CountMatrix::Zero(lower.components, upper.components);
  wc.upper_occurrences.assign(static_cast<std::size_t>(upper.components), 0);
  for (std::size_t n : omega) {
    for (int py = 0; py < fm.upper.h; ++py) {
      for (int px = 0; px < fm.upper.w; ++px) {
        const int s = upper.at(n, {py, px});
        ++wc.upper_occurrences[static_cast<std::size_t>(s)];
        for (int qy : fm.rows[static_cast<std::size_t>(py)]) {
          for (int qx : fm.cols[static_cast<std::size_t>(px)]) ++wc.q(lower.at(n, {qy, qx}), s);
        }
      }
    }
  }
  return wc;
}

double log_ratio(const CoocModel& cooc, int s, int t) {
  if (s < 0 || s >= cooc.log_transition.rows() || t < 0 || t >= cooc.log_transition.cols()) {
    fail(Errc::out_of_range, "word index out of range");
  }
  return cooc.log_transition(s, t) - cooc.log_prior_lower[t];
}

double score(const WordOccurrenceCounts& counts, const CoocModel& cooc, std::span<const int> upper_words, int t) {
  if (t < 0 || t >= counts.q.rows()) fail(Errc::out_of_range, "lower word index out of range");
  double total = 0.0;
  for (int s : upper_words) {
    if (s < 0 || s >= counts.q.cols()) fail(Errc::out_of_range, "upper word index out of range");
    const auto q = counts.q(t, s);
    if (q != 0) total += static_cast<double>(q) * log_ratio(cooc, s, t);
  }
  return total;
}

std::vector<int> top_words(const WordOccurrenceCounts& counts, const CoocModel& cooc, std::span<const int> upper_words,
                           int z) {
  std::vector<std::pair<double, int>> ranked;
  for (int t = 0; t < static_cast<int>(counts.q.rows()); ++t) {
    if (cooc.dead_lower[static_cast<std::size_t>(t)]) continue;
    ranked.emplace_back(score(counts, cooc, upper_words, t), t);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<int> chosen;
  for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < z; ++i) chosen.push_back(ranked[i].second);
  return chosen;
}

EdgeHeatmap edge_heatmap(const AssignmentGrid& upper, const AssignmentGrid& lower, const FieldMap& fm,
                         std::span<const std::size_t> omega, int s, int t) {
  check_pair(upper, lower, fm, omega);
  if (s < 0 || s >= upper.components || t < 0 || t >= lower.components) fail(Errc::out_of_range, "word index out of range");
  EdgeHeatmap h;
  h.extent_y = fm.extent_y;
  h.extent_x = fm.extent_x;
  h.values = RowMatrix::Zero(fm.extent_y, fm.extent_x);
  h.support.setZero(fm.extent_y, fm.extent_x);
  for (std::size_t n : omega) {
    for (int py = 0; py < fm.upper.h; ++py) {
      for (int px = 0; px < fm.upper.w; ++px) {
        if (upper.at(n, {py, px}) != s) continue;
        for (const WindowCell& cell : window(fm, {py, px}).cells) {
          ++h.support(cell.oy, cell.ox);
          if (lower.at(n, cell.q) == t) h.values(cell.oy, cell.ox) += 1.0;
        }
      }
    }
  }
  h.absent = h.support.sum() == 0;
  for (Eigen::Index i = 0; i < h.values.size(); ++i) {
    if (h.support.data()[i] > 0) h.values.data()[i] /= static_cast<double>(h.support.data()[i]);
  }
  return h;
}

WordLocations image_word_locations(const AssignmentGrid& grid, std::size_t image, int k) {
  if (image >= grid.examples) fail(Errc::out_of_range, "image index out of range");
  WordLocations loc;
  for (int y = 0; y < grid.grid.h; ++y) {
    for (int x = 0; x < grid.grid.w; ++x) {
      if (grid.at(image, {y, x}) == k) loc.positions.push_back({y, x});
    }
  }
  loc.fraction = static_cast<double>(loc.positions.size()) / static_cast<double>(grid.grid.size());
  return loc;
}

std::string GraphScope::tag() const {
  return kind == Kind::class_scope ? "class" + std::to_string(class_id) : "image" + std::to_string(image);
}

InferenceGraph build_graph(const MiningInput& input, std::span<const std::size_t> omega, int top_word, int z,
                           const GraphScope& scope) {
  const std::size_t L = input.layers.size();
  if (L < 2) fail(Errc::invalid_argument, "need at least two modeled layers");
  if (input.maps.size() != L - 1 || input.cooc.size() != L - 1) fail(Errc::missing_model, "missing layer-pair model");
  if (z < 1) fail(Errc::invalid_argument, "Z must be >= 1");
  if (omega.empty()) fail(Errc::empty_input, "empty image set");

  InferenceGraph g;
  g.scope = scope;
  g.z = z;
  g.omega_size = omega.size();
  for (const auto* layer : input.layers) g.layers.push_back(layer->layer_id);

  auto occurrence_stats = [&](std::size_t level, int word, GraphNode& node) {
    const AssignmentGrid& grid = *input.layers[level];
    std::int64_t count = 0;
    for (std::size_t n : omega) {
      for (int w : grid.example(n)) count += (w == word);
    }
    node.occurrences = count;
    node.fraction = static_cast<double>(count) / static_cast<double>(omega.size() * grid.grid.size());
    if (scope.kind == GraphScope::Kind::image_scope) node.locations = image_word_locations(grid, omega[0], word).positions;
    node.log_prior = level > 0 ? input.cooc[level - 1]->log_prior_upper[word] : input.cooc[0]->log_prior_lower[word];
  };

  GraphNode top;
  top.layer = g.layers.back();
  top.level = static_cast<int>(L - 1);
  top.cluster = top_word;
  occurrence_stats(L - 1, top_word, top);
  g.nodes.push_back(top);

  std::vector<int> selected{top_word};
  std::vector<std::size_t> selected_nodes{0};
  for (std::size_t level = L - 1; level-- > 0;) {
    const AssignmentGrid& upper = *input.layers[level + 1];
    const AssignmentGrid& lower = *input.layers[level];
    const FieldMap& fm = input.maps[level];
    const CoocModel& cooc = *input.cooc[level];
    if (cooc.counts.rows() != upper.components || cooc.counts.cols() != lower.components) {
      fail(Errc::shape_mismatch, "co-occurrence model does not match the layer dictionaries");
    }
    const WordOccurrenceCounts counts = word_counts(upper, lower, fm, omega);
    const std::vector<int> chosen = top_words(counts, cooc, selected, z);

    std::vector<std::size_t> chosen_nodes;
    for (int t : chosen) {
      GraphNode node;
      node.layer = lower.layer_id;
      node.level = static_cast<int>(level);
      node.cluster = t;
      node.score = score(counts, cooc, selected, t);
      occurrence_stats(level, t, node);
      chosen_nodes.push_back(g.nodes.size());
      g.nodes.push_back(std::move(node));
    }
    for (std::size_t i = 0; i < selected.size(); ++i) {
      for (std::size_t j = 0; j < chosen.size(); ++j) {
        GraphEdge e;
        e.upper_node = selected_nodes[i];
        e.lower_node = chosen_nodes[j];
        e.frequency = counts.q(chosen[j], selected[i]);
        e.log_ratio = log_ratio(cooc, selected[i], chosen[j]);
        e.score = static_cast<double>(e.frequency) * e.log_ratio;
        e.drawn = e.log_ratio > 0.0;
        e.significant = e.log_ratio > 1.0;
        e.heatmap = edge_heatmap(upper, lower, fm, omega, selected[i], chosen[j]);
        g.edges.push_back(std::move(e));
      }
    }
    selected = chosen;
    selected_nodes = chosen_nodes;
    if (selected.empty()) break;
  }
  return g;
}

InferenceGraph build_graph(const ModelBundle& bundle, const ActivationStore& store,
                           const std::vector<std::string>& layers, const GraphScope& scope, int z) {
  if (layers.size() < 2) fail(Errc::invalid_argument, "need at least two modeled layers");
  std::vector<AssignmentGrid> grids;
  std::vector<CoocModel> coocs;
  MiningInput input;
  for (const auto& id : layers) grids.push_back(load_assignments(bundle, id));
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    coocs.push_back(load_cooc(bundle, layers[i + 1], layers[i]));
    input.maps.push_back(resolve_geometry(store.manifest(), layers[i + 1], layers[i]));
  }
  for (const auto& grid : grids) {
    if (grid.examples != store.example_count()) {
      fail(Errc::example_count_mismatch, "assignments of '" + grid.layer_id + "' were computed on a different store");
    }
    input.layers.push_back(&grid);
  }
  for (const auto& c : coocs) input.cooc.push_back(&c);

  const AssignmentGrid& output = grids.back();
  auto predicted = [&](std::size_t n) {
    return store.has_predictions() ? static_cast<int>(store.predictions()[n]) : output.example(n)[0];
  };

  std::vector<std::size_t> omega;
  int top = 0;
  if (scope.kind == GraphScope::Kind::class_scope) {
    if (scope.class_id < 0 || scope.class_id >= output.components) fail(Errc::out_of_range, "class index out of range");
    for (std::size_t n = 0; n < output.examples; ++n) {
      if (predicted(n) == scope.class_id) omega.push_back(n);
    }
    if (omega.empty()) fail(Errc::empty_input, "no images predicted as class " + std::to_string(scope.class_id));
    top = scope.class_id;
  } else {
    if (scope.image >= output.examples) fail(Errc::out_of_range, "image index out of range");
    omega.push_back(scope.image);
    top = predicted(scope.image);
  }
  return build_graph(input, omega, top, z, scope);
}

// ---------------------------------------------------------------------------

namespace {

json matrix_json(const RowMatrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

json graph_to_json(const InferenceGraph& graph) {
  json scope{{"kind", graph.scope.kind == GraphScope::Kind::class_scope ? "class" : "image"}};
  if (graph.scope.kind == GraphScope::Kind::class_scope) {
    scope["class"] = graph.scope.class_id;
  } else {
    scope["image"] = graph.scope.image;
  }
  json nodes = json::array();
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const auto& n = graph.nodes[i];
    json node{{"id", i},           {"layer", n.layer},          {"level", n.level},
              {"cluster", n.cluster}, {"score", n.score},         {"log_prior", n.log_prior},
              {"occurrences", n.occurrences}, {"fraction", n.fraction}};
    if (graph.scope.kind == GraphScope::Kind::image_scope) {
      json locs = json::array();
      for (const auto& p : n.locations) locs.push_back({p.y, p.x});
      node["locations"] = locs;
    }
    nodes.push_back(std::move(node));
  }
  json edges = json::array();
  for (const auto& e : graph.edges) {
    edges.push_back({{"upper", e.upper_node},
                     {"lower", e.lower_node},
                     {"frequency", e.frequency},
                     {"log_ratio", e.log_ratio},
                     {"score", e.score},
                     {"drawn", e.drawn},
                     {"significant", e.significant},
                     {"heatmap",
                      {{"extent", {e.heatmap.extent_y, e.heatmap.extent_x}},
                       {"absent", e.heatmap.absent},
                       {"values", matrix_json(e.heatmap.values)}}}});
  }
  return json{{"scope", scope},   {"z", graph.z},         {"omega_size", graph.omega_size},
              {"layers", graph.layers}, {"nodes", nodes}, {"edges", edges}};
}

InferenceGraph graph_from_json(const json& doc) {
  InferenceGraph g;
  try {
    const auto& scope = doc.at("scope");
    if (scope.at("kind") == "class") {
      g.scope = {GraphScope::Kind::class_scope, scope.at("class").get<int>(), 0};
    } else {
      g.scope = {GraphScope::Kind::image_scope, 0, scope.at("image").get<std::size_t>()};
    }
    g.z = doc.at("z").get<int>();
    g.omega_size = doc.at("omega_size").get<std::size_t>();
    g.layers = doc.at("layers").get<std::vector<std::string>>();
    for (const auto& n : doc.at("nodes")) {
      GraphNode node;
      node.layer = n.at("layer").get<std::string>();
      node.level = n.at("level").get<int>();
      node.cluster = n.at("cluster").get<int>();
      node.score = n.at("score").get<double>();
      node.log_prior = n.at("log_prior").get<double>();
      node.occurrences = n.at("occurrences").get<std::int64_t>();
      node.fraction = n.at("fraction").get<double>();
      if (n.contains("locations")) {
        for (const auto& p : n["locations"]) node.locations.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
      }
      g.nodes.push_back(std::move(node));
    }
    for (const auto& e : doc.at("edges")) {
      GraphEdge edge;
      edge.upper_node = e.at("upper").get<std::size_t>();
      edge.lower_node = e.at("lower").get<std::size_t>();
      edge.frequency = e.at("frequency").get<std::int64_t>();
      edge.log_ratio = e.at("log_ratio").get<double>();
      edge.score = e.at("score").get<double>();
      edge.drawn = e.at("drawn").get<bool>();
      edge.significant = e.at("significant").get<bool>();
      const auto& h = e.at("heatmap");
      edge.heatmap.extent_y = h.at("extent").at(0).get<int>();
      edge.heatmap.extent_x = h.at("extent").at(1).get<int>();
      edge.heatmap.absent = h.at("absent").get<bool>();
      edge.heatmap.values = RowMatrix::Zero(edge.heatmap.extent_y, edge.heatmap.extent_x);
      const auto& vals = h.at("values");
      for (int r = 0; r < edge.heatmap.extent_y; ++r) {
        for (int c = 0; c < edge.heatmap.extent_x; ++c) edge.heatmap.values(r, c) = vals.at(r).at(c).get<double>();
      }
      g.edges.push_back(std::move(edge));
    }
  } catch (const json::exception& ex) {
    fail(Errc::invalid_manifest, std::string("graph document: ") + ex.what());
  }
  return g;
}

std::string graph_to_dot(const InferenceGraph& graph) {
  std::ostringstream out;
  out << "digraph \"graph_" << graph.scope.tag() << "\" {\n  rankdir=BT;\n  node [shape=box];\n";
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const auto& n = graph.nodes[i];
    out << "  n" << i << " [label=\"" << n.layer << ":" << n.cluster << "\"];\n";
  }
  char label[96];
  for (const auto& e : graph.edges) {
    if (!e.drawn) continue;
    std::snprintf(label, sizeof label, "%lld | %.2f", static_cast<long long>(e.frequency), e.log_ratio);
    out << "  n" << e.lower_node << " -> n" << e.upper_node << " [label=\"" << label << "\", color="
        << (e.significant ? "green" : "black") << "];\n";
  }
  out << "}\n";
  return out.str();
}

}  // namespace atlas
