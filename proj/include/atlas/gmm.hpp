#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atlas/tensor_store.hpp"

namespace atlas {

class ModelBundle;

inline constexpr double kSigmaFloor = 1e-3;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Diagonal-covariance mixture over activation columns; one component per
/// visual word of the layer's dictionary.
struct LayerGmm {
  std::string layer_id;
  Eigen::VectorXd log_pi;  // K
  RowMatrix mu;            // K x D
  RowMatrix sigma;         // K x D, >= kSigmaFloor
  bool trainable = true;

  int components() const { return static_cast<int>(log_pi.size()); }
  int dim() const { return static_cast<int>(mu.cols()); }

  /// Throws numerical if weights do not sum to one, a sigma is under the
  /// floor, or a parameter is not finite.
  void validate() const;
};

/// Output-layer dictionary: component m sits on the one-hot vector e_m with
/// sigma 0.1 and uniform weights. Never trained.
LayerGmm fixed_output_gmm(std::string layer_id, int classes);

/// Index of the largest entry; ties resolve to the lowest index.
int argmax(std::span<const double> values);

/// Per-component log pi_k + log N(x | mu_k, sigma_k^2), written into `out` (size K).
void component_log_densities(const LayerGmm& gmm, std::span<const float> x, std::span<double> out);

/// Posterior P(h = k | x) per column (rows x K), via log-sum-exp.
RowMatrix responsibilities(const LayerGmm& gmm, const ColumnView& columns);

/// Hard assignment: argmax responsibility per column.
std::vector<int> assign(const LayerGmm& gmm, const ColumnView& columns);

/// Means on K distinct random columns, variance per dimension from up to
/// 1000 random columns (shared by every component), uniform weights.
LayerGmm init_gmm(const ColumnView& columns, int components, std::uint64_t seed, std::string layer_id = {});

// ---------------------------------------------------------------------------
// Generative training
// ---------------------------------------------------------------------------

enum class EmMode { batch, online };

struct EmOptions {
  int epochs = 10;
  std::size_t minibatch = 64;  // examples per online update
  EmMode mode = EmMode::batch;
  double step_exponent = 0.7;  // online step size gamma_t = t^-step_exponent
  std::uint64_t seed = 0;
};

struct EmReport {
  double initial_nll = 0.0;  // mean NLL per column before the first update
  std::vector<double> nll;   // mean NLL per column after each epoch
  std::size_t reseeded = 0;  // components re-seeded for lack of support
};

/// Fits `gmm` to the columns of `layer`, restricted to `examples` when given.
EmReport em_fit(LayerGmm& gmm, const LayerData& layer, const EmOptions& options,
                std::span<const std::size_t> examples = {});

/// init_gmm + em_fit repeated with seeds seed, seed+1, ...; keeps the run
/// with the lowest final mean NLL (earliest on ties).
struct FitResult {
  LayerGmm gmm;
  EmReport report;
  int restart = 0;
};
FitResult fit_gmm(const LayerData& layer, int components, const EmOptions& options, int restarts,
                  std::string layer_id, std::span<const std::size_t> examples = {});

/// Mean negative log-likelihood per column.
double mean_nll(const LayerGmm& gmm, const LayerData& layer, std::span<const std::size_t> examples = {});

// ---------------------------------------------------------------------------
// Discriminative training
// ---------------------------------------------------------------------------

/// Linear classifier over word histograms: logits = weight * hist + bias.
struct HistClassifier {
  RowMatrix weight;  // M x K
  Eigen::VectorXd bias;

  static HistClassifier zeros(int classes, int components);
  static HistClassifier random(int classes, int components, std::uint64_t seed, double scale = 1.0);
  int classes() const { return static_cast<int>(bias.size()); }
};

/// Word histogram of one example: responsibilities averaged over positions.
Eigen::VectorXd histogram(const LayerGmm& gmm, const ColumnView& example_columns);

/// Mean cross-entropy over a batch and its gradient with respect to the
/// mixture logits, means, log standard deviations, and classifier.
struct DiscriminativeGradient {
  double loss = 0.0;
  Eigen::VectorXd log_pi;
  RowMatrix mu;
  RowMatrix log_sigma;
  RowMatrix weight;
  Eigen::VectorXd bias;
};

DiscriminativeGradient discriminative_gradient(const LayerGmm& gmm, const HistClassifier& classifier,
                                               const LayerData& layer, std::span<const std::int64_t> labels,
                                               std::span<const std::size_t> batch);

struct DiscriminativeOptions {
  int epochs = 20;
  std::size_t minibatch = 32;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
};

struct DiscriminativeReport {
  std::vector<double> loss;   // mean cross-entropy after each epoch
  std::vector<double> error;  // training error rate after each epoch
};

DiscriminativeReport discriminative_fit(LayerGmm& gmm, HistClassifier& classifier, const LayerData& layer,
                                        std::span<const std::int64_t> labels, const DiscriminativeOptions& options,
                                        std::span<const std::size_t> examples = {});

double hist_classifier_loss(const LayerGmm& gmm, const HistClassifier& classifier, const LayerData& layer,
                            std::span<const std::int64_t> labels, std::span<const std::size_t> examples = {});

/// Fraction of examples whose argmax logit differs from the label.
double hist_classifier_error(const LayerGmm& gmm, const HistClassifier& classifier, const LayerData& layer,
                             std::span<const std::int64_t> labels, std::span<const std::size_t> examples = {});

// ---------------------------------------------------------------------------
// Representatives
// ---------------------------------------------------------------------------

struct Occurrence {
  std::size_t example = 0;
  std::size_t position = 0;
  double responsibility = 0.0;
  double log_density = 0.0;  // log pi_k + log N(x | k)
};

/// The m columns assigned to word k with the highest responsibility, sorted
/// descending. Saturated responsibilities are ordered by component density,
/// then by (example, position).
std::vector<Occurrence> top_m_examples(const LayerGmm& gmm, const LayerData& layer, int k, std::size_t m = 6);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

std::string gmm_record(const std::string& layer_id);
void save_gmm(ModelBundle& bundle, const LayerGmm& gmm, const std::optional<HistClassifier>& classifier = {});
LayerGmm load_gmm(const ModelBundle& bundle, const std::string& layer_id);
std::optional<HistClassifier> load_classifier(const ModelBundle& bundle, const std::string& layer_id);

/// Row-major conversions between Eigen and f64 blobs.
TensorBlob matrix_blob(const RowMatrix& m);
TensorBlob vector_blob(const Eigen::VectorXd& v);
RowMatrix blob_matrix(const TensorBlob& blob);
Eigen::VectorXd blob_vector(const TensorBlob& blob);

/// All examples [0, n) when `examples` is empty, else a copy of it.
std::vector<std::size_t> example_set(std::size_t n, std::span<const std::size_t> examples);

}  // namespace atlas
