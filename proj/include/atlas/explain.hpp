#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atlas/cooccur.hpp"
#include "atlas/gmm.hpp"
#include "atlas/rect_hmm.hpp"
#include "atlas/tensor_store.hpp"
#include "json.hpp"

namespace atlas {

class ModelBundle;

struct Projection {
  RowMatrix basis;   // D x 2, unit columns
  RowMatrix coords;  // rows x 2, centered on the eligible mean
  Eigen::Vector2d eigenvalues;
};

/// Multi-class Fisher LDA to two dimensions. Groups with fewer than two rows
/// are projected but left out of the scatter matrices.
Projection lda_project(const RowMatrix& x, std::span<const int> groups);

/// tr((B' (S_W + lambda I) B)^-1 B' S_B B) with the same regularization as lda_project.
double fisher_criterion(const RowMatrix& x, std::span<const int> groups, const RowMatrix& basis);

/// Rows closest to the row mean, nearest first (ties by row index).
std::vector<std::size_t> l2_representatives(const RowMatrix& members, std::size_t m);

/// min over z != j of log_emission(i, j) - log_emission(i, z), per row.
std::vector<double> llr_scores(const RowMatrix& log_emission, int j);

/// Rows with the largest llr_scores (ties by row index).
std::vector<std::size_t> llr_representatives(const RowMatrix& log_emission, int j, std::size_t m);

struct SubCluster {
  int next = 0;                       // cluster index at layer l+1
  std::vector<std::size_t> members;   // example ids
  double transition = 0.0;            // P(h^{l+1} = next | h^l = k), renormalized over observed sub-clusters
  std::vector<std::size_t> l2;        // example ids
  std::vector<std::size_t> llr;       // example ids; empty for a lone sub-cluster
  bool in_scatter = false;
};

struct Junction {
  std::string layer;
  std::string next_layer;
  std::size_t level = 0;
  int cluster = 0;
  std::vector<std::size_t> members;  // all examples of the cluster, ascending
  std::vector<SubCluster> subclusters;
  bool single_subcluster = false;
  bool projected = false;
  RowMatrix coords;  // members x 2 when projected
};

/// `paths[l][n]` are per-example MAP assignments (decode_all).
Junction junction(const RectHmm& model, const std::vector<LayerData>& layers,
                  const std::vector<std::vector<int>>& paths, std::size_t level, int cluster, std::size_t m);

Junction junction(const ModelBundle& bundle, const ActivationStore& store, const std::string& layer, int cluster,
                  std::size_t m);

nlohmann::json junction_to_json(const Junction& j);

struct SimilarityReport {
  std::string layer;
  RowMatrix distances;                // K x K
  std::vector<std::int64_t> sizes;    // occurrences per cluster
  std::vector<int> dominant;          // -1 for an empty cluster
  std::vector<double> dominant_fraction;
  std::vector<int> order;             // by (dominant class, cluster id); empty clusters last
  double average_dominant = 0.0;      // over non-empty clusters
};

SimilarityReport similarity_report(const std::string& layer, const RowMatrix& means, const AssignmentGrid& grid,
                                   std::span<const std::int64_t> labels);

nlohmann::json similarity_to_json(const SimilarityReport& report);

}  // namespace atlas
