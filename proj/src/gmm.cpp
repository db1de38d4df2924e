#include "atlas/gmm.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "atlas/bundle.hpp"
#include "atlas/error.hpp"
#include "atlas/normal.hpp"
#include "atlas/parallel.hpp"
#include "atlas/random.hpp"

namespace atlas {
namespace {

// Per-component constants hoisted out of the column loop.
struct DensityCache {
  explicit DensityCache(const LayerGmm& gmm) : inv_sigma(gmm.sigma.cwiseInverse()), offset(gmm.components()) {
    const double d = gmm.dim();
    for (int k = 0; k < gmm.components(); ++k) {
      offset[k] = gmm.log_pi[k] - gmm.sigma.row(k).array().log().sum() - d * normal::kLogSqrt2Pi;
    }
  }

  void evaluate(const LayerGmm& gmm, std::span<const float> x, double* out) const {
    const int dim = gmm.dim();
    for (int k = 0; k < gmm.components(); ++k) {
      const double* mu = gmm.mu.row(k).data();
      const double* inv = inv_sigma.row(k).data();
      double q = 0.0;
      for (int d = 0; d < dim; ++d) {
        const double z = (static_cast<double>(x[d]) - mu[d]) * inv[d];
        q += z * z;
      }
      out[k] = offset[k] - 0.5 * q;
    }
  }

  RowMatrix inv_sigma;
  Eigen::VectorXd offset;
};

void check_dim(const LayerGmm& gmm, std::size_t dim) {
  if (static_cast<int>(dim) != gmm.dim()) {
    fail(Errc::dimension_mismatch, "column dimension " + std::to_string(dim) + " does not match mixture dimension " +
                                       std::to_string(gmm.dim()));
  }
}

// Normalizes log densities in place into responsibilities; returns the log-sum-exp.
double normalize(double* v, int k) {
  const double lse = normal::log_sum_exp({v, static_cast<std::size_t>(k)});
  for (int i = 0; i < k; ++i) v[i] = std::exp(v[i] - lse);
  return lse;
}

struct SuffStats {
  SuffStats(int k, int d) : weight(Eigen::VectorXd::Zero(k)), s1(RowMatrix::Zero(k, d)), s2(RowMatrix::Zero(k, d)) {}

  void merge(const SuffStats& o) {
    weight += o.weight;
    s1 += o.s1;
    s2 += o.s2;
    loglik += o.loglik;
    columns += o.columns;
    if (o.worst < worst) {
      worst = o.worst;
      worst_column = o.worst_column;
    }
  }

  Eigen::VectorXd weight;
  RowMatrix s1, s2;
  double loglik = 0.0;
  std::size_t columns = 0;
  double worst = std::numeric_limits<double>::infinity();
  std::vector<float> worst_column;
};

void accumulate(const LayerGmm& gmm, const DensityCache& cache, const ColumnView& cols, SuffStats& st) {
  const int K = gmm.components();
  const int D = gmm.dim();
  std::vector<double> r(static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < cols.rows(); ++i) {
    const auto x = cols.row(i);
    cache.evaluate(gmm, x, r.data());
    const double lse = normalize(r.data(), K);
    if (!std::isfinite(lse)) fail(Errc::numerical, "non-finite log-likelihood in E-step");
    st.loglik += lse;
    ++st.columns;
    if (lse < st.worst) {
      st.worst = lse;
      st.worst_column.assign(x.begin(), x.end());
    }
    for (int k = 0; k < K; ++k) {
      const double w = r[static_cast<std::size_t>(k)];
      if (w == 0.0) continue;
      st.weight[k] += w;
      double* s1 = st.s1.row(k).data();
      double* s2 = st.s2.row(k).data();
      for (int d = 0; d < D; ++d) {
        const double v = x[d];
        s1[d] += w * v;
        s2[d] += w * v * v;
      }
    }
  }
}

SuffStats collect(const LayerGmm& gmm, const LayerData& layer, std::span<const std::size_t> examples) {
  const DensityCache cache(gmm);
  const std::size_t chunks = chunk_count(examples.size());
  std::vector<SuffStats> parts(chunks, SuffStats(gmm.components(), gmm.dim()));
  parallel_chunks(chunks, [&](std::size_t c) {
    const std::size_t end = std::min(examples.size(), (c + 1) * kChunkSize);
    for (std::size_t i = c * kChunkSize; i < end; ++i) accumulate(gmm, cache, layer.example(examples[i]), parts[c]);
  });
  SuffStats total(gmm.components(), gmm.dim());
  for (const auto& p : parts) total.merge(p);
  return total;
}

// M-step from (possibly normalized) statistics. Components without support keep
// their previous means and deviations.
void maximize(LayerGmm& gmm, const Eigen::VectorXd& weight, const RowMatrix& s1, const RowMatrix& s2) {
  const double total = weight.sum();
  for (int k = 0; k < gmm.components(); ++k) {
    const double w = weight[k];
    if (w <= 0.0) continue;
    for (int d = 0; d < gmm.dim(); ++d) {
      const double mean = s1(k, d) / w;
      const double var = s2(k, d) / w - mean * mean;
      gmm.mu(k, d) = mean;
      gmm.sigma(k, d) = std::max(std::sqrt(std::max(var, 0.0)), kSigmaFloor);
    }
  }
  for (int k = 0; k < gmm.components(); ++k) {
    gmm.log_pi[k] = weight[k] > 0.0 ? std::log(weight[k] / total) : -std::numeric_limits<double>::infinity();
  }
}

// Moves the first component whose support fell under 1e-6 of the data onto the
// worst-explained column.
bool reseed_empty(LayerGmm& gmm, const SuffStats& st) {
  const double n = static_cast<double>(st.columns);
  for (int k = 0; k < gmm.components(); ++k) {
    if (st.weight[k] >= 1e-6 * n || st.worst_column.empty()) continue;
    for (int d = 0; d < gmm.dim(); ++d) {
      gmm.mu(k, d) = st.worst_column[static_cast<std::size_t>(d)];
      const double mean = st.s1.col(d).sum() / n;
      const double var = st.s2.col(d).sum() / n - mean * mean;
      gmm.sigma(k, d) = std::max(std::sqrt(std::max(var, 0.0)), kSigmaFloor);
    }
    gmm.log_pi[k] = std::log(1.0 / n);
    const double lse = normal::log_sum_exp({gmm.log_pi.data(), static_cast<std::size_t>(gmm.log_pi.size())});
    gmm.log_pi.array() -= lse;
    spdlog::warn("layer '{}': component {} lost its support and was re-seeded", gmm.layer_id, k);
    return true;
  }
  return false;
}

}  // namespace

void LayerGmm::validate() const {
  if (components() < 1 || mu.rows() != components() || sigma.rows() != components() || sigma.cols() != mu.cols()) {
    fail(Errc::dimension_mismatch, "inconsistent mixture parameter shapes");
  }
  if (!mu.allFinite() || !sigma.allFinite()) fail(Errc::numerical, "non-finite mixture parameters");
  if ((sigma.array() < kSigmaFloor).any()) fail(Errc::numerical, "sigma below floor");
  const double total = log_pi.array().exp().sum();
  if (std::abs(total - 1.0) > 1e-9) fail(Errc::numerical, "mixture weights do not sum to one");
}

LayerGmm fixed_output_gmm(std::string layer_id, int classes) {
  if (classes < 1) fail(Errc::invalid_argument, "output dictionary needs at least one class");
  LayerGmm g;
  g.layer_id = std::move(layer_id);
  g.log_pi = Eigen::VectorXd::Constant(classes, -std::log(static_cast<double>(classes)));
  g.mu = RowMatrix::Identity(classes, classes);
  g.sigma = RowMatrix::Constant(classes, classes, 0.1);
  g.trainable = false;
  return g;
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

void component_log_densities(const LayerGmm& gmm, std::span<const float> x, std::span<double> out) {
  check_dim(gmm, x.size());
  if (out.size() != static_cast<std::size_t>(gmm.components())) fail(Errc::dimension_mismatch, "output size != K");
  DensityCache(gmm).evaluate(gmm, x, out.data());
}

RowMatrix responsibilities(const LayerGmm& gmm, const ColumnView& columns) {
  check_dim(gmm, columns.dim);
  const DensityCache cache(gmm);
  RowMatrix r(static_cast<Eigen::Index>(columns.rows()), gmm.components());
  for (std::size_t i = 0; i < columns.rows(); ++i) {
    double* row = r.row(static_cast<Eigen::Index>(i)).data();
    cache.evaluate(gmm, columns.row(i), row);
    normalize(row, gmm.components());
  }
  return r;
}

std::vector<int> assign(const LayerGmm& gmm, const ColumnView& columns) {
  check_dim(gmm, columns.dim);
  const DensityCache cache(gmm);
  std::vector<int> out(columns.rows());
  std::vector<double> ll(static_cast<std::size_t>(gmm.components()));
  for (std::size_t i = 0; i < columns.rows(); ++i) {
    cache.evaluate(gmm, columns.row(i), ll.data());
    normalize(ll.data(), gmm.components());
    out[i] = argmax(ll);
  }
  return out;
}

LayerGmm init_gmm(const ColumnView& columns, int components, std::uint64_t seed, std::string layer_id) {
  const std::size_t n = columns.rows();
  const std::size_t dim = columns.dim;
  if (components < 1) fail(Errc::invalid_argument, "K must be >= 1");
  if (n == 0) fail(Errc::empty_input, "no columns to initialize from");

  auto permutation = [n](CounterRng rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
  };

  LayerGmm g;
  g.layer_id = std::move(layer_id);
  g.mu.resize(components, static_cast<Eigen::Index>(dim));
  int chosen = 0;
  for (std::size_t i : permutation(CounterRng(seed, 1))) {
    const auto x = columns.row(i);
    bool duplicate = false;
    for (int k = 0; k < chosen && !duplicate; ++k) {
      duplicate = std::equal(x.begin(), x.end(), g.mu.row(k).data(),
                             [](float a, double b) { return static_cast<double>(a) == b; });
    }
    if (duplicate) continue;
    for (std::size_t d = 0; d < dim; ++d) g.mu(chosen, static_cast<Eigen::Index>(d)) = x[d];
    if (++chosen == components) break;
  }
  if (chosen < components) {
    fail(Errc::invalid_argument, "K=" + std::to_string(components) + " exceeds the " + std::to_string(chosen) +
                                     " distinct columns available");
  }

  const auto sample = permutation(CounterRng(seed, 2));
  const std::size_t m = std::min<std::size_t>(1000, n);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < m; ++i) {
    const auto x = columns.row(sample[i]);
    for (std::size_t d = 0; d < dim; ++d) mean[static_cast<Eigen::Index>(d)] += x[d];
  }
  mean /= static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto x = columns.row(sample[i]);
    for (std::size_t d = 0; d < dim; ++d) {
      const double c = x[d] - mean[static_cast<Eigen::Index>(d)];
      sq[static_cast<Eigen::Index>(d)] += c * c;
    }
  }
  int clamped = 0;
  Eigen::VectorXd sd(static_cast<Eigen::Index>(dim));
  for (Eigen::Index d = 0; d < sd.size(); ++d) {
    sd[d] = std::sqrt(sq[d] / static_cast<double>(m));
    if (sd[d] < kSigmaFloor) {
      sd[d] = kSigmaFloor;
      ++clamped;
    }
  }
  if (clamped > 0) {
    spdlog::warn("layer '{}': {} zero-variance dimension(s) clamped to sigma floor {}", g.layer_id, clamped, kSigmaFloor);
  }
  g.sigma = sd.transpose().replicate(components, 1);
  g.log_pi = Eigen::VectorXd::Constant(components, -std::log(static_cast<double>(components)));
  return g;
}

std::vector<std::size_t> example_set(std::size_t n, std::span<const std::size_t> examples) {
  if (!examples.empty()) {
    for (std::size_t e : examples) {
      if (e >= n) fail(Errc::out_of_range, "example index " + std::to_string(e) + " out of range");
    }
    return {examples.begin(), examples.end()};
  }
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return all;
}

FitResult fit_gmm(const LayerData& layer, int components, const EmOptions& options, int restarts,
                  std::string layer_id, std::span<const std::size_t> examples) {
  if (restarts < 1) fail(Errc::invalid_argument, "restarts must be >= 1");
  std::optional<FitResult> best;
  for (int r = 0; r < restarts; ++r) {
    EmOptions run = options;
    run.seed = options.seed + static_cast<std::uint64_t>(r);
    FitResult f{init_gmm(layer.all(), components, run.seed, layer_id), {}, r};
    f.report = em_fit(f.gmm, layer, run, examples);
    const double nll = f.report.nll.empty() ? f.report.initial_nll : f.report.nll.back();
    const double best_nll = best ? (best->report.nll.empty() ? best->report.initial_nll : best->report.nll.back()) : 0.0;
    if (!best || nll < best_nll) best = std::move(f);
  }
  return std::move(*best);
}

double mean_nll(const LayerGmm& gmm, const LayerData& layer, std::span<const std::size_t> examples) {
  check_dim(gmm, layer.dim());
  const auto ex = example_set(layer.examples(), examples);
  const SuffStats st = collect(gmm, layer, ex);
  return -st.loglik / static_cast<double>(st.columns);
}

EmReport em_fit(LayerGmm& gmm, const LayerData& layer, const EmOptions& options,
                std::span<const std::size_t> examples) {
  if (!gmm.trainable) fail(Errc::invalid_argument, "mixture for layer '" + gmm.layer_id + "' is fixed");
  check_dim(gmm, layer.dim());
  const auto ex = example_set(layer.examples(), examples);
  if (ex.empty()) fail(Errc::empty_input, "empty layer");
  if (options.mode == EmMode::online && !(options.step_exponent > 0.5 && options.step_exponent <= 1.0)) {
    fail(Errc::invalid_argument, "online step exponent must lie in (0.5, 1]");
  }

  EmReport report;
  if (options.mode == EmMode::batch) {
    SuffStats st = collect(gmm, layer, ex);
    report.initial_nll = -st.loglik / static_cast<double>(st.columns);
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      maximize(gmm, st.weight, st.s1, st.s2);
      if (reseed_empty(gmm, st)) ++report.reseeded;
      st = collect(gmm, layer, ex);
      const double nll = -st.loglik / static_cast<double>(st.columns);
      if (!std::isfinite(nll)) fail(Errc::numerical, "NaN encountered in EM at epoch " + std::to_string(epoch));
      report.nll.push_back(nll);
    }
    return report;
  }

  // Online EM: running averages of per-column normalized statistics,
  // s <- s + gamma_t (s_batch - s), parameters re-derived after every minibatch.
  report.initial_nll = mean_nll(gmm, layer, ex);
  const std::size_t batch = std::max<std::size_t>(1, options.minibatch);
  SuffStats running(gmm.components(), gmm.dim());
  std::uint64_t step = 0;
  std::vector<std::size_t> order = ex;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    CounterRng rng(options.seed, 100 + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const SuffStats st = collect(gmm, layer, std::span(order).subspan(start, end - start));
      const double inv = 1.0 / static_cast<double>(st.columns);
      const double gamma = std::pow(static_cast<double>(++step), -options.step_exponent);
      running.weight = (1.0 - gamma) * running.weight + gamma * inv * st.weight;
      running.s1 = (1.0 - gamma) * running.s1 + gamma * inv * st.s1;
      running.s2 = (1.0 - gamma) * running.s2 + gamma * inv * st.s2;
      maximize(gmm, running.weight, running.s1, running.s2);
    }
    const double nll = mean_nll(gmm, layer, ex);
    if (!std::isfinite(nll)) fail(Errc::numerical, "NaN encountered in online EM at epoch " + std::to_string(epoch));
    report.nll.push_back(nll);
  }
  return report;
}

// ---------------------------------------------------------------------------

HistClassifier HistClassifier::zeros(int classes, int components) {
  return {RowMatrix::Zero(classes, components), Eigen::VectorXd::Zero(classes)};
}

HistClassifier HistClassifier::random(int classes, int components, std::uint64_t seed, double scale) {
  CounterRng rng(seed, 7);
  HistClassifier c = zeros(classes, components);
  for (Eigen::Index i = 0; i < c.weight.size(); ++i) c.weight.data()[i] = scale * rng.normal();
  return c;
}

Eigen::VectorXd histogram(const LayerGmm& gmm, const ColumnView& example_columns) {
  return responsibilities(gmm, example_columns).colwise().mean().transpose();
}

namespace {

void check_labels(const HistClassifier& classifier, const LayerGmm& gmm, const LayerData& layer,
                  std::span<const std::int64_t> labels) {
  if (labels.size() != layer.examples()) fail(Errc::labels_required, "labels required for every example");
  if (classifier.weight.cols() != gmm.components() || classifier.weight.rows() != classifier.bias.size()) {
    fail(Errc::dimension_mismatch, "classifier shape does not match the dictionary");
  }
  for (auto y : labels) {
    if (y < 0 || y >= classifier.classes()) fail(Errc::label_mismatch, "label outside classifier range");
  }
}

struct Evaluation {
  double loss = 0.0;
  double error = 0.0;
};

Evaluation evaluate(const LayerGmm& gmm, const HistClassifier& classifier, const LayerData& layer,
                    std::span<const std::int64_t> labels, const std::vector<std::size_t>& ex) {
  const std::size_t chunks = chunk_count(ex.size());
  std::vector<Evaluation> parts(chunks);
  parallel_chunks(chunks, [&](std::size_t c) {
    const std::size_t end = std::min(ex.size(), (c + 1) * kChunkSize);
    for (std::size_t i = c * kChunkSize; i < end; ++i) {
      const std::size_t n = ex[i];
      const Eigen::VectorXd z = classifier.weight * histogram(gmm, layer.example(n)) + classifier.bias;
      const auto y = static_cast<Eigen::Index>(labels[n]);
      parts[c].loss += normal::log_sum_exp({z.data(), static_cast<std::size_t>(z.size())}) - z[y];
      if (argmax({z.data(), static_cast<std::size_t>(z.size())}) != y) parts[c].error += 1.0;
    }
  });
  Evaluation total;
  for (const auto& p : parts) {
    total.loss += p.loss;
    total.error += p.error;
  }
  total.loss /= static_cast<double>(ex.size());
  total.error /= static_cast<double>(ex.size());
  return total;
}

}  // namespace

DiscriminativeGradient discriminative_gradient(const LayerGmm& gmm, const HistClassifier& classifier,
                                               const LayerData& layer, std::span<const std::int64_t> labels,
                                               std::span<const std::size_t> batch) {
  check_dim(gmm, layer.dim());
  check_labels(classifier, gmm, layer, labels);
  if (batch.empty()) fail(Errc::empty_input, "empty batch");
  const int K = gmm.components();
  const int D = gmm.dim();
  const int M = classifier.classes();
  const DensityCache cache(gmm);

  DiscriminativeGradient g;
  g.log_pi = Eigen::VectorXd::Zero(K);
  g.mu = RowMatrix::Zero(K, D);
  g.log_sigma = RowMatrix::Zero(K, D);
  g.weight = RowMatrix::Zero(M, K);
  g.bias = Eigen::VectorXd::Zero(M);

  for (std::size_t n : batch) {
    const ColumnView cols = layer.example(n);
    const std::size_t P = cols.rows();
    RowMatrix r(static_cast<Eigen::Index>(P), K);
    for (std::size_t p = 0; p < P; ++p) {
      double* row = r.row(static_cast<Eigen::Index>(p)).data();
      cache.evaluate(gmm, cols.row(p), row);
      normalize(row, K);
    }
    const Eigen::VectorXd hist = r.colwise().mean().transpose();
    const Eigen::VectorXd z = classifier.weight * hist + classifier.bias;
    const double lse = normal::log_sum_exp({z.data(), static_cast<std::size_t>(M)});
    const auto y = static_cast<Eigen::Index>(labels[n]);
    g.loss += lse - z[y];
    if (!std::isfinite(g.loss)) fail(Errc::numerical, "NaN loss");

    Eigen::VectorXd dz = (z.array() - lse).exp().matrix();
    dz[y] -= 1.0;
    g.weight += dz * hist.transpose();
    g.bias += dz;
    const Eigen::VectorXd dhist = classifier.weight.transpose() * dz;

    // through the per-position softmax: d loss / d logdensity_k = r_k (u_k - r.u) / P
    for (std::size_t p = 0; p < P; ++p) {
      const auto rp = r.row(static_cast<Eigen::Index>(p));
      const double ru = rp.dot(dhist);
      const auto x = cols.row(p);
      for (int k = 0; k < K; ++k) {
        const double delta = rp[k] * (dhist[k] - ru) / static_cast<double>(P);
        if (delta == 0.0) continue;
        g.log_pi[k] += delta;
        for (int d = 0; d < D; ++d) {
          const double z_kd = (static_cast<double>(x[d]) - gmm.mu(k, d)) * cache.inv_sigma(k, d);
          g.mu(k, d) += delta * z_kd * cache.inv_sigma(k, d);
          g.log_sigma(k, d) += delta * (z_kd * z_kd - 1.0);
        }
      }
    }
  }
  const double scale = 1.0 / static_cast<double>(batch.size());
  g.loss *= scale;
  g.log_pi *= scale;
  g.mu *= scale;
  g.log_sigma *= scale;
  g.weight *= scale;
  g.bias *= scale;
  return g;
}

DiscriminativeReport discriminative_fit(LayerGmm& gmm, HistClassifier& classifier, const LayerData& layer,
                                        std::span<const std::int64_t> labels, const DiscriminativeOptions& options,
                                        std::span<const std::size_t> examples) {
  check_dim(gmm, layer.dim());
  check_labels(classifier, gmm, layer, labels);
  const auto ex = example_set(layer.examples(), examples);
  if (ex.empty()) fail(Errc::empty_input, "empty layer");
  const double lr = options.learning_rate;
  const std::size_t batch = std::max<std::size_t>(1, options.minibatch);

  DiscriminativeReport report;
  std::vector<std::size_t> order = ex;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    CounterRng rng(options.seed, 200 + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const auto g = discriminative_gradient(gmm, classifier, layer, labels, std::span(order).subspan(start, end - start));
      classifier.weight -= lr * g.weight;
      classifier.bias -= lr * g.bias;
      if (!gmm.trainable) continue;
      gmm.log_pi -= lr * g.log_pi;
      const double shift = normal::log_sum_exp({gmm.log_pi.data(), static_cast<std::size_t>(gmm.log_pi.size())});
      if (std::abs(shift) > 1e-12) gmm.log_pi.array() -= shift;
      gmm.mu -= lr * g.mu;
      gmm.sigma.array() *= (-lr * g.log_sigma.array()).exp();
      gmm.sigma = gmm.sigma.cwiseMax(kSigmaFloor);
    }
    const Evaluation e = evaluate(gmm, classifier, layer, labels, ex);
    if (!std::isfinite(e.loss)) fail(Errc::numerical, "NaN loss at epoch " + std::to_string(epoch));
    report.loss.push_back(e.loss);
    report.error.push_back(e.error);
  }
  return report;
}

double hist_classifier_loss(const LayerGmm& gmm, const HistClassifier& classifier, const LayerData& layer,
                            std::span<const std::int64_t> labels, std::span<const std::size_t> examples) {
  check_dim(gmm, layer.dim());
  check_labels(classifier, gmm, layer, labels);
  return evaluate(gmm, classifier, layer, labels, example_set(layer.examples(), examples)).loss;
}

double hist_classifier_error(const LayerGmm& gmm, const HistClassifier& classifier, const LayerData& layer,
                             std::span<const std::int64_t> labels, std::span<const std::size_t> examples) {
  check_dim(gmm, layer.dim());
  check_labels(classifier, gmm, layer, labels);
  return evaluate(gmm, classifier, layer, labels, example_set(layer.examples(), examples)).error;
}

std::vector<Occurrence> top_m_examples(const LayerGmm& gmm, const LayerData& layer, int k, std::size_t m) {
  check_dim(gmm, layer.dim());
  if (k < 0 || k >= gmm.components()) fail(Errc::out_of_range, "cluster index " + std::to_string(k) + " out of range");
  const DensityCache cache(gmm);
  std::vector<Occurrence> hits;
  std::vector<double> ll(static_cast<std::size_t>(gmm.components()));
  for (std::size_t n = 0; n < layer.examples(); ++n) {
    const ColumnView cols = layer.example(n);
    for (std::size_t p = 0; p < cols.rows(); ++p) {
      cache.evaluate(gmm, cols.row(p), ll.data());
      const double density = ll[static_cast<std::size_t>(k)];
      normalize(ll.data(), gmm.components());
      if (argmax(ll) != k) continue;
      hits.push_back({n, p, ll[static_cast<std::size_t>(k)], density});
    }
  }
  auto before = [](const Occurrence& a, const Occurrence& b) {
    if (a.responsibility != b.responsibility) return a.responsibility > b.responsibility;
    if (a.log_density != b.log_density) return a.log_density > b.log_density;
    if (a.example != b.example) return a.example < b.example;
    return a.position < b.position;
  };
  const std::size_t take = std::min(m, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(take), hits.end(), before);
  hits.resize(take);
  return hits;
}

// ---------------------------------------------------------------------------

TensorBlob matrix_blob(const RowMatrix& m) {
  return TensorBlob({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                    std::vector<double>(m.data(), m.data() + m.size()));
}

TensorBlob vector_blob(const Eigen::VectorXd& v) {
  return TensorBlob({static_cast<std::uint64_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

RowMatrix blob_matrix(const TensorBlob& blob) {
  if (blob.dims().size() != 2) fail(Errc::shape_mismatch, "expected a matrix blob");
  const auto values = blob.f64();
  return Eigen::Map<const RowMatrix>(values.data(), static_cast<Eigen::Index>(blob.dims()[0]),
                                     static_cast<Eigen::Index>(blob.dims()[1]));
}

Eigen::VectorXd blob_vector(const TensorBlob& blob) {
  if (blob.dims().size() != 1) fail(Errc::shape_mismatch, "expected a vector blob");
  const auto values = blob.f64();
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

std::string gmm_record(const std::string& layer_id) { return "gmm_" + layer_id; }

void save_gmm(ModelBundle& bundle, const LayerGmm& gmm, const std::optional<HistClassifier>& classifier) {
  const std::string name = gmm_record(gmm.layer_id);
  bundle.put_blob(name, "log_pi", vector_blob(gmm.log_pi));
  bundle.put_blob(name, "mu", matrix_blob(gmm.mu));
  bundle.put_blob(name, "sigma", matrix_blob(gmm.sigma));
  nlohmann::json meta{{"type", "gmm"},
                      {"layer", gmm.layer_id},
                      {"components", gmm.components()},
                      {"dim", gmm.dim()},
                      {"trainable", gmm.trainable},
                      {"classifier", classifier.has_value()}};
  if (classifier) {
    bundle.put_blob(name, "classifier_weight", matrix_blob(classifier->weight));
    bundle.put_blob(name, "classifier_bias", vector_blob(classifier->bias));
  }
  bundle.put_record(name, std::move(meta));
}

LayerGmm load_gmm(const ModelBundle& bundle, const std::string& layer_id) {
  const std::string name = gmm_record(layer_id);
  const auto& meta = bundle.record(name);
  LayerGmm g;
  g.layer_id = layer_id;
  g.log_pi = blob_vector(bundle.blob(name, "log_pi"));
  g.mu = blob_matrix(bundle.blob(name, "mu"));
  g.sigma = blob_matrix(bundle.blob(name, "sigma"));
  g.trainable = meta.value("trainable", true);
  g.validate();
  return g;
}

std::optional<HistClassifier> load_classifier(const ModelBundle& bundle, const std::string& layer_id) {
  const std::string name = gmm_record(layer_id);
  if (!bundle.record(name).value("classifier", false)) return std::nullopt;
  return HistClassifier{blob_matrix(bundle.blob(name, "classifier_weight")),
                        blob_vector(bundle.blob(name, "classifier_bias"))};
}

}  // namespace atlas
