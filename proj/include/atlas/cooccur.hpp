#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atlas/gmm.hpp"
#include "atlas/recfield.hpp"
#include "atlas/tensor_store.hpp"

namespace atlas {

class ModelBundle;

/// Hard word assignments h_p(I_n) of one layer over a set of examples.
struct AssignmentGrid {
  std::string layer_id;
  GridExtent grid;
  int components = 0;
  std::size_t examples = 0;
  std::vector<int> words;  // examples x grid.h x grid.w

  int at(std::size_t n, Position p) const {
    return words[(n * grid.size()) + static_cast<std::size_t>(p.y) * static_cast<std::size_t>(grid.w) +
                 static_cast<std::size_t>(p.x)];
  }
  std::span<const int> example(std::size_t n) const { return std::span(words).subspan(n * grid.size(), grid.size()); }
};

AssignmentGrid assign_layer(const LayerGmm& gmm, const LayerData& layer);

std::string assignment_record(const std::string& layer_id);
void save_assignments(ModelBundle& bundle, const AssignmentGrid& grid);
AssignmentGrid load_assignments(const ModelBundle& bundle, const std::string& layer_id);

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Co-occurrence counts N(k, k') between an upper and a lower layer plus the
/// smoothed first- and second-order estimates derived from them.
struct CoocModel {
  std::string upper;
  std::string lower;
  CountMatrix counts;  // K_upper x K_lower
  bool interior_only = false;

  double epsilon = 0.0;               // 1e-9 * total count
  Eigen::VectorXd log_prior_upper;    // log P(h^upper = k)
  Eigen::VectorXd log_prior_lower;    // log P(h^lower = k')
  RowMatrix log_transition;           // log P(h^lower = k' | h^upper = k)
  std::vector<bool> dead_upper;       // rows without support (uniform transition row)
  std::vector<bool> dead_lower;       // columns without support

  std::int64_t total() const { return counts.sum(); }
};

/// Counts (I_n, p, q) triples with q in the valid window of p over `images`
/// (all examples when empty). With `interior_only` upper positions with any
/// clipped offset are skipped.
CoocModel count_cooccurrence(const AssignmentGrid& upper, const AssignmentGrid& lower, const FieldMap& fm,
                             std::span<const std::size_t> images = {}, bool interior_only = false);

/// Recomputes the smoothed tables from `counts`. Throws empty_input when all
/// counts are zero.
void derive_estimates(CoocModel& model);

struct Priors {
  Eigen::VectorXd upper;  // row sums / total, smoothed
  Eigen::VectorXd lower;  // column sums / total, smoothed
};
Priors priors(const CoocModel& model);

/// Smoothed row-normalized counts.
RowMatrix transitions(const CoocModel& model);

/// Unsmoothed N(k, k') / sum_j N(k, j); zero rows stay zero.
RowMatrix raw_transitions(const CoocModel& model);

std::string cooc_record(const std::string& upper, const std::string& lower);
void save_cooc(ModelBundle& bundle, const CoocModel& model);
CoocModel load_cooc(const ModelBundle& bundle, const std::string& upper, const std::string& lower);

/// Class m followed by the classes the network predicted for images of class
/// m, by confusion count (descending, ties by class index), at most
/// `max_neighbors` of them.
std::vector<int> neighbor_classes(std::span<const std::int64_t> labels, std::span<const std::int64_t> predictions,
                                  int m, std::size_t max_neighbors);

/// Examples whose label lies in `classes`.
std::vector<std::size_t> examples_of_classes(std::span<const std::int64_t> labels, std::span<const int> classes);

}  // namespace atlas
