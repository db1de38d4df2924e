#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atlas/gmm.hpp"
#include "atlas/tensor_store.hpp"

namespace atlas {

class ModelBundle;

/// Layer-chained HMM over post-ReLU activity of fully connected layers.
///
/// h^1 ~ initial, h^l | h^{l-1}=k' ~ transitions[l](., k'), and each unit is
/// x[d] = max(y[d], 0) with y[d] ~ N(mu[l](k, d), sigma[l](k, d)^2).
struct RectHmm {
  std::vector<std::string> layer_ids;
  Eigen::VectorXd initial;             // K^1
  std::vector<RowMatrix> transitions;  // [l] is K^l x K^{l-1}; [0] is empty
  std::vector<RowMatrix> mu;           // [l] is K^l x D^l
  std::vector<RowMatrix> sigma;

  std::size_t layers() const { return mu.size(); }
  int components(std::size_t l) const { return static_cast<int>(mu[l].rows()); }
  int dim(std::size_t l) const { return static_cast<int>(mu[l].cols()); }

  /// Checks shapes, column-stochastic transitions, and the sigma floor.
  void validate() const;
};

/// Activity of one example: one span per modeled layer.
using Observation = std::vector<std::span<const float>>;

/// log density of an observed post-ReLU value: log N(x | mu, sigma^2) for
/// x > 0, log Phi(-mu / sigma) for x = 0. Throws negative_activation for x < 0.
double rg_log_emission(double mu, double sigma, double x);

/// Sum of rg_log_emission over dimensions of component `k` of layer `l`.
double rg_log_emission(const RectHmm& model, std::size_t l, int k, std::span<const float> x);

struct Posteriors {
  std::vector<Eigen::VectorXd> gamma;  // [l](k) = P(h^l = k | X)
  std::vector<RowMatrix> xi;           // [l](k, k') = P(h^l = k, h^{l-1} = k' | X); [0] empty
  double log_likelihood = 0.0;
};

Posteriors forward_backward(const RectHmm& model, const Observation& x);

struct LayerPath {
  std::vector<int> states;
  double log_joint = 0.0;      // log P(H, X)
  double log_posterior = 0.0;  // log P(H | X)
};

/// Exact MAP path; ties resolve to the lowest index.
LayerPath viterbi(const RectHmm& model, const Observation& x);

// ---------------------------------------------------------------------------

/// Emissions from init_gmm on each layer's columns; uniform transitions.
RectHmm init_hmm(const std::vector<LayerData>& layers, std::span<const int> components, std::uint64_t seed);

struct HmmReport {
  double initial_nll = 0.0;  // mean per-example NLL before training
  std::vector<double> nll;   // after each epoch
  std::size_t clamped = 0;   // negative inputs clamped to zero
};

/// Joint EM over transitions and censored-Gaussian emissions.
HmmReport hmm_em_fit(RectHmm& model, const std::vector<LayerData>& layers, const EmOptions& options,
                     std::span<const std::size_t> examples = {});

/// Mean negative log-likelihood per example.
double hmm_mean_nll(const RectHmm& model, const std::vector<LayerData>& layers,
                    std::span<const std::size_t> examples = {});

/// Viterbi path of every example; result[l][n] is h^l of example n.
std::vector<std::vector<int>> decode_all(const RectHmm& model, const std::vector<LayerData>& layers);

/// Copies example n out of the layer tensors, clamping negative noise to zero.
/// Returns the number of clamped values.
std::size_t gather(const std::vector<LayerData>& layers, std::size_t n, std::vector<std::vector<float>>& buffer,
                   Observation& out);

inline const std::string kHmmRecord = "hmm";
void save_hmm(ModelBundle& bundle, const RectHmm& model);
RectHmm load_hmm(const ModelBundle& bundle);

}  // namespace atlas
