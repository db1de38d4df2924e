#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atlas/cooccur.hpp"
#include "atlas/recfield.hpp"
#include "atlas/tensor_store.hpp"
#include "json.hpp"

namespace atlas {

class ModelBundle;

/// Receptive field between two modeled layers: the manifest's declared stage
/// chain, or global pooling when the upper layer is global and none is
/// declared.
FieldMap resolve_geometry(const Manifest& manifest, const std::string& upper, const std::string& lower);

/// Q_{t,s}(Omega): occurrences of lower word t inside the windows of upper
/// word s, summed over the images in Omega.
struct WordOccurrenceCounts {
  CountMatrix q;                            // K_lower x K_upper
  std::vector<std::int64_t> upper_occurrences;  // (n, p) with h_p = s, per s
};

WordOccurrenceCounts word_counts(const AssignmentGrid& upper, const AssignmentGrid& lower, const FieldMap& fm,
                                 std::span<const std::size_t> omega);

/// log P(h^lower = t | h^upper = s) - log P(h^lower = t) from smoothed estimates.
double log_ratio(const CoocModel& cooc, int s, int t);

/// S(Omega, S, t) = sum_{s in S} Q_{t,s} * log_ratio(s, t).
double score(const WordOccurrenceCounts& counts, const CoocModel& cooc, std::span<const int> upper_words, int t);

/// Z highest-scoring lower words (ties by index), skipping words without support.
std::vector<int> top_words(const WordOccurrenceCounts& counts, const CoocModel& cooc, std::span<const int> upper_words,
                           int z);

/// Frequency of lower word t at each receptive-field cell around occurrences of s.
struct EdgeHeatmap {
  int extent_y = 0, extent_x = 0;
  RowMatrix values;                          // in [0, 1]
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> support;  // denominators
  bool absent = false;                       // s never occurs in Omega
};

EdgeHeatmap edge_heatmap(const AssignmentGrid& upper, const AssignmentGrid& lower, const FieldMap& fm,
                         std::span<const std::size_t> omega, int s, int t);

struct WordLocations {
  std::vector<Position> positions;
  double fraction = 0.0;
};

WordLocations image_word_locations(const AssignmentGrid& grid, std::size_t image, int k);

// ---------------------------------------------------------------------------

struct GraphScope {
  enum class Kind { class_scope, image_scope };
  Kind kind = Kind::class_scope;
  int class_id = 0;
  std::size_t image = 0;

  std::string tag() const;  // "class7" / "image12"
};

struct GraphNode {
  std::string layer;
  int level = 0;  // index into the modeled layer chain, 0 = lowest
  int cluster = 0;
  double score = 0.0;      // selection score against the chosen words above
  double log_prior = 0.0;  // constant A: log P(h = cluster)
  std::int64_t occurrences = 0;
  double fraction = 0.0;  // occurrences / positions in Omega
  std::vector<Position> locations;  // image scope only
};

struct GraphEdge {
  std::size_t upper_node = 0;
  std::size_t lower_node = 0;
  std::int64_t frequency = 0;
  double log_ratio = 0.0;
  double score = 0.0;  // frequency * log_ratio
  bool drawn = false;        // log_ratio > 0
  bool significant = false;  // log_ratio > 1
  EdgeHeatmap heatmap;
};

struct InferenceGraph {
  GraphScope scope;
  int z = 0;
  std::size_t omega_size = 0;
  std::vector<std::string> layers;  // lowest first
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
};

/// Modeled layer chain, lowest first; the last layer is the output layer.
/// maps[i] and cooc[i] relate layers[i + 1] (upper) to layers[i] (lower).
struct MiningInput {
  std::vector<const AssignmentGrid*> layers;
  std::vector<FieldMap> maps;
  std::vector<const CoocModel*> cooc;
};

/// Greedy backward node selection from `top_word` in the output layer.
InferenceGraph build_graph(const MiningInput& input, std::span<const std::size_t> omega, int top_word, int z,
                           const GraphScope& scope);

/// Loads assignments, geometry, and co-occurrence models for `layers` and mines
/// the graph. Class scope: Omega = images predicted as the class. Image scope:
/// Omega = {image}, explained from its predicted class.
InferenceGraph build_graph(const ModelBundle& bundle, const ActivationStore& store,
                           const std::vector<std::string>& layers, const GraphScope& scope, int z);

nlohmann::json graph_to_json(const InferenceGraph& graph);
InferenceGraph graph_from_json(const nlohmann::json& doc);
std::string graph_to_dot(const InferenceGraph& graph);

}  // namespace atlas
