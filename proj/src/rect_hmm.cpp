#include "atlas/rect_hmm.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "atlas/bundle.hpp"
#include "atlas/error.hpp"
#include "atlas/normal.hpp"
#include "atlas/parallel.hpp"
#include "atlas/random.hpp"

namespace atlas {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

void check_observation(const RectHmm& model, const Observation& x) {
  if (x.size() != model.layers()) fail(Errc::dimension_mismatch, "observation has wrong number of layers");
  for (std::size_t l = 0; l < x.size(); ++l) {
    if (static_cast<int>(x[l].size()) != model.dim(l)) {
      fail(Errc::dimension_mismatch, "layer " + std::to_string(l) + " activation has dimension " +
                                         std::to_string(x[l].size()) + ", model expects " + std::to_string(model.dim(l)));
    }
  }
}

// Log-space parameters shared by every example of a pass.
struct LogModel {
  explicit LogModel(const RectHmm& m) : initial(m.initial.unaryExpr(&safe_log)) {
    transitions.resize(m.layers());
    zero_mass.resize(m.layers());
    for (std::size_t l = 0; l < m.layers(); ++l) {
      if (l > 0) transitions[l] = m.transitions[l].unaryExpr(&safe_log);
      zero_mass[l] = RowMatrix(m.mu[l].rows(), m.mu[l].cols());
      for (Eigen::Index i = 0; i < m.mu[l].size(); ++i) {
        zero_mass[l].data()[i] = normal::log_cdf(-m.mu[l].data()[i] / m.sigma[l].data()[i]);
      }
    }
  }

  Eigen::VectorXd initial;
  std::vector<RowMatrix> transitions;
  std::vector<RowMatrix> zero_mass;  // log Phi(-mu / sigma)
};

std::vector<Eigen::VectorXd> emissions(const RectHmm& m, const LogModel& lm, const Observation& x) {
  std::vector<Eigen::VectorXd> e(m.layers());
  for (std::size_t l = 0; l < m.layers(); ++l) {
    const int K = m.components(l);
    const int D = m.dim(l);
    e[l].resize(K);
    for (int k = 0; k < K; ++k) {
      const double* mu = m.mu[l].row(k).data();
      const double* sg = m.sigma[l].row(k).data();
      const double* z0 = lm.zero_mass[l].row(k).data();
      double sum = 0.0;
      for (int d = 0; d < D; ++d) {
        const double v = x[l][static_cast<std::size_t>(d)];
        if (v < 0.0) fail(Errc::negative_activation, "negative post-ReLU activation");
        sum += v > 0.0 ? normal::log_pdf(v, mu[d], sg[d]) : z0[d];
      }
      e[l][k] = sum;
    }
  }
  return e;
}

Posteriors run_forward_backward(const RectHmm& m, const LogModel& lm, const Observation& x) {
  const std::size_t L = m.layers();
  const auto e = emissions(m, lm, x);
  std::vector<Eigen::VectorXd> alpha(L), beta(L);
  std::vector<double> scratch;

  alpha[0] = lm.initial + e[0];
  for (std::size_t l = 1; l < L; ++l) {
    const int K = m.components(l), Kp = m.components(l - 1);
    alpha[l].resize(K);
    scratch.resize(static_cast<std::size_t>(Kp));
    for (int k = 0; k < K; ++k) {
      for (int kp = 0; kp < Kp; ++kp) scratch[static_cast<std::size_t>(kp)] = alpha[l - 1][kp] + lm.transitions[l](k, kp);
      alpha[l][k] = e[l][k] + normal::log_sum_exp(scratch);
    }
  }
  beta[L - 1] = Eigen::VectorXd::Zero(m.components(L - 1));
  for (std::size_t l = L - 1; l > 0; --l) {
    const int K = m.components(l), Kp = m.components(l - 1);
    beta[l - 1].resize(Kp);
    scratch.resize(static_cast<std::size_t>(K));
    for (int kp = 0; kp < Kp; ++kp) {
      for (int k = 0; k < K; ++k) scratch[static_cast<std::size_t>(k)] = lm.transitions[l](k, kp) + e[l][k] + beta[l][k];
      beta[l - 1][kp] = normal::log_sum_exp(scratch);
    }
  }

  Posteriors post;
  post.log_likelihood = normal::log_sum_exp({alpha[L - 1].data(), static_cast<std::size_t>(alpha[L - 1].size())});
  if (!std::isfinite(post.log_likelihood)) fail(Errc::numerical, "observation has zero likelihood under the model");
  post.gamma.resize(L);
  post.xi.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    post.gamma[l] = (alpha[l] + beta[l]).array() - post.log_likelihood;
    post.gamma[l] = post.gamma[l].array().exp();
    if (l == 0) continue;
    const int K = m.components(l), Kp = m.components(l - 1);
    post.xi[l].resize(K, Kp);
    for (int k = 0; k < K; ++k) {
      for (int kp = 0; kp < Kp; ++kp) {
        post.xi[l](k, kp) =
            std::exp(alpha[l - 1][kp] + lm.transitions[l](k, kp) + e[l][k] + beta[l][k] - post.log_likelihood);
      }
    }
  }
  return post;
}

LayerPath run_viterbi(const RectHmm& m, const LogModel& lm, const Observation& x) {
  const std::size_t L = m.layers();
  const auto e = emissions(m, lm, x);
  std::vector<Eigen::VectorXd> delta(L);
  std::vector<std::vector<int>> back(L);
  delta[0] = lm.initial + e[0];
  for (std::size_t l = 1; l < L; ++l) {
    const int K = m.components(l), Kp = m.components(l - 1);
    delta[l].resize(K);
    back[l].assign(static_cast<std::size_t>(K), 0);
    for (int k = 0; k < K; ++k) {
      int best = 0;
      double best_v = delta[l - 1][0] + lm.transitions[l](k, 0);
      for (int kp = 1; kp < Kp; ++kp) {
        const double v = delta[l - 1][kp] + lm.transitions[l](k, kp);
        if (v > best_v) {
          best_v = v;
          best = kp;
        }
      }
      delta[l][k] = e[l][k] + best_v;
      back[l][static_cast<std::size_t>(k)] = best;
    }
  }
  LayerPath path;
  path.states.assign(L, 0);
  int state = argmax({delta[L - 1].data(), static_cast<std::size_t>(delta[L - 1].size())});
  path.log_joint = delta[L - 1][state];
  for (std::size_t l = L; l-- > 0;) {
    path.states[l] = state;
    if (l > 0) state = back[l][static_cast<std::size_t>(state)];
  }
  return path;
}

// Sufficient statistics of the complete-data likelihood.
struct HmmStats {
  explicit HmmStats(const RectHmm& m) {
    const std::size_t L = m.layers();
    initial = Eigen::VectorXd::Zero(m.components(0));
    trans.resize(L);
    weight.resize(L);
    s1.resize(L);
    s2.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
      if (l > 0) trans[l] = RowMatrix::Zero(m.components(l), m.components(l - 1));
      weight[l] = Eigen::VectorXd::Zero(m.components(l));
      s1[l] = RowMatrix::Zero(m.components(l), m.dim(l));
      s2[l] = RowMatrix::Zero(m.components(l), m.dim(l));
    }
  }

  void merge(const HmmStats& o) {
    initial += o.initial;
    for (std::size_t l = 0; l < weight.size(); ++l) {
      if (l > 0) trans[l] += o.trans[l];
      weight[l] += o.weight[l];
      s1[l] += o.s1[l];
      s2[l] += o.s2[l];
    }
    loglik += o.loglik;
    examples += o.examples;
    clamped += o.clamped;
  }

  void scale_into(HmmStats& running, double gamma, double inv) const {
    running.initial = (1 - gamma) * running.initial + gamma * inv * initial;
    for (std::size_t l = 0; l < weight.size(); ++l) {
      if (l > 0) running.trans[l] = (1 - gamma) * running.trans[l] + gamma * inv * trans[l];
      running.weight[l] = (1 - gamma) * running.weight[l] + gamma * inv * weight[l];
      running.s1[l] = (1 - gamma) * running.s1[l] + gamma * inv * s1[l];
      running.s2[l] = (1 - gamma) * running.s2[l] + gamma * inv * s2[l];
    }
  }

  Eigen::VectorXd initial;
  std::vector<RowMatrix> trans;
  std::vector<Eigen::VectorXd> weight;
  std::vector<RowMatrix> s1, s2;  // posterior-weighted E[y], E[y^2]
  double loglik = 0.0;
  std::size_t examples = 0;
  std::size_t clamped = 0;
};

// Moments of the latent pre-ReLU value given x = 0 under every component.
struct CensoredMoments {
  explicit CensoredMoments(const RectHmm& m) : first(m.layers()), second(m.layers()) {
    for (std::size_t l = 0; l < m.layers(); ++l) {
      first[l].resize(m.mu[l].rows(), m.mu[l].cols());
      second[l].resize(m.mu[l].rows(), m.mu[l].cols());
      for (Eigen::Index i = 0; i < m.mu[l].size(); ++i) {
        const auto mom = normal::truncated_below_zero(m.mu[l].data()[i], m.sigma[l].data()[i]);
        first[l].data()[i] = mom.mean;
        second[l].data()[i] = mom.second;
      }
    }
  }
  std::vector<RowMatrix> first, second;
};

HmmStats collect(const RectHmm& m, const std::vector<LayerData>& layers, std::span<const std::size_t> examples) {
  const LogModel lm(m);
  const CensoredMoments cm(m);
  const std::size_t chunks = chunk_count(examples.size());
  std::vector<HmmStats> parts(chunks, HmmStats(m));
  parallel_chunks(chunks, [&](std::size_t c) {
    HmmStats& st = parts[c];
    std::vector<std::vector<float>> buffer;
    Observation x;
    const std::size_t end = std::min(examples.size(), (c + 1) * kChunkSize);
    for (std::size_t i = c * kChunkSize; i < end; ++i) {
      st.clamped += gather(layers, examples[i], buffer, x);
      const Posteriors post = run_forward_backward(m, lm, x);
      st.loglik += post.log_likelihood;
      ++st.examples;
      st.initial += post.gamma[0];
      for (std::size_t l = 0; l < m.layers(); ++l) {
        if (l > 0) st.trans[l] += post.xi[l];
        st.weight[l] += post.gamma[l];
        for (int k = 0; k < m.components(l); ++k) {
          const double w = post.gamma[l][k];
          if (w == 0.0) continue;
          for (int d = 0; d < m.dim(l); ++d) {
            const double v = x[l][static_cast<std::size_t>(d)];
            const double ey = v > 0.0 ? v : cm.first[l](k, d);
            const double ey2 = v > 0.0 ? v * v : cm.second[l](k, d);
            st.s1[l](k, d) += w * ey;
            st.s2[l](k, d) += w * ey2;
          }
        }
      }
    }
  });
  HmmStats total(m);
  for (const auto& p : parts) total.merge(p);
  return total;
}

void maximize(RectHmm& m, const HmmStats& st) {
  m.initial = st.initial / st.initial.sum();
  for (std::size_t l = 0; l < m.layers(); ++l) {
    if (l > 0) {
      for (Eigen::Index kp = 0; kp < st.trans[l].cols(); ++kp) {
        const double col = st.trans[l].col(kp).sum();
        if (col > 0.0) {
          m.transitions[l].col(kp) = st.trans[l].col(kp) / col;
        } else {
          m.transitions[l].col(kp).setConstant(1.0 / static_cast<double>(st.trans[l].rows()));
        }
      }
    }
    for (int k = 0; k < m.components(l); ++k) {
      const double w = st.weight[l][k];
      if (w <= 0.0) continue;
      for (int d = 0; d < m.dim(l); ++d) {
        const double mean = st.s1[l](k, d) / w;
        const double var = st.s2[l](k, d) / w - mean * mean;
        m.mu[l](k, d) = mean;
        m.sigma[l](k, d) = std::max(std::sqrt(std::max(var, 0.0)), kSigmaFloor);
      }
    }
  }
}

void check_layers(const RectHmm& m, const std::vector<LayerData>& layers) {
  if (layers.size() != m.layers()) fail(Errc::dimension_mismatch, "layer list does not match the model");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].positions() != 1) fail(Errc::invalid_argument, "HMM layers must be global (one column per example)");
    if (static_cast<int>(layers[l].dim()) != m.dim(l)) fail(Errc::dimension_mismatch, "layer dimension mismatch");
    if (layers[l].examples() != layers[0].examples()) fail(Errc::example_count_mismatch, "example-count mismatch");
  }
}

}  // namespace

void RectHmm::validate() const {
  const std::size_t L = layers();
  if (L == 0 || sigma.size() != L || transitions.size() != L || layer_ids.size() != L) {
    fail(Errc::dimension_mismatch, "inconsistent HMM layer count");
  }
  if (initial.size() != components(0) || std::abs(initial.sum() - 1.0) > 1e-9 || (initial.array() < 0).any()) {
    fail(Errc::numerical, "initial distribution must be a probability vector");
  }
  for (std::size_t l = 0; l < L; ++l) {
    if (sigma[l].rows() != mu[l].rows() || sigma[l].cols() != mu[l].cols()) fail(Errc::dimension_mismatch, "sigma shape");
    if (!mu[l].allFinite() || !sigma[l].allFinite() || (sigma[l].array() < kSigmaFloor).any()) {
      fail(Errc::numerical, "invalid emission parameters");
    }
    if (l == 0) continue;
    const auto& t = transitions[l];
    if (t.rows() != components(l) || t.cols() != components(l - 1)) fail(Errc::dimension_mismatch, "transition shape");
    for (Eigen::Index c = 0; c < t.cols(); ++c) {
      if (std::abs(t.col(c).sum() - 1.0) > 1e-9 || (t.col(c).array() < 0).any()) {
        fail(Errc::numerical, "transition column does not sum to one");
      }
    }
  }
}

double rg_log_emission(double mu, double sigma, double x) {
  if (x < 0.0) fail(Errc::negative_activation, "negative post-ReLU activation");
  if (x > 0.0) return normal::log_pdf(x, mu, sigma);
  return normal::log_cdf(-mu / sigma);
}

double rg_log_emission(const RectHmm& model, std::size_t l, int k, std::span<const float> x) {
  if (static_cast<int>(x.size()) != model.dim(l)) fail(Errc::dimension_mismatch, "activation dimension mismatch");
  double sum = 0.0;
  for (int d = 0; d < model.dim(l); ++d) {
    sum += rg_log_emission(model.mu[l](k, d), model.sigma[l](k, d), x[static_cast<std::size_t>(d)]);
  }
  return sum;
}

Posteriors forward_backward(const RectHmm& model, const Observation& x) {
  check_observation(model, x);
  return run_forward_backward(model, LogModel(model), x);
}

LayerPath viterbi(const RectHmm& model, const Observation& x) {
  check_observation(model, x);
  const LogModel lm(model);
  LayerPath path = run_viterbi(model, lm, x);
  path.log_posterior = path.log_joint - run_forward_backward(model, lm, x).log_likelihood;
  return path;
}

std::size_t gather(const std::vector<LayerData>& layers, std::size_t n, std::vector<std::vector<float>>& buffer,
                   Observation& out) {
  buffer.resize(layers.size());
  out.resize(layers.size());
  std::size_t clamped = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto src = layers[l].example(n).data;
    buffer[l].assign(src.begin(), src.end());
    for (float& v : buffer[l]) {
      if (v < 0.0f) {
        v = 0.0f;
        ++clamped;
      }
    }
    out[l] = buffer[l];
  }
  return clamped;
}

RectHmm init_hmm(const std::vector<LayerData>& layers, std::span<const int> components, std::uint64_t seed) {
  if (layers.empty()) fail(Errc::empty_input, "no layers to model");
  if (components.size() != layers.size()) fail(Errc::invalid_argument, "need one component count per layer");
  RectHmm m;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerGmm g = init_gmm(layers[l].all(), components[l], seed + 7919 * l, layers[l].info().id);
    m.layer_ids.push_back(g.layer_id);
    m.mu.push_back(g.mu);
    m.sigma.push_back(g.sigma);
    const int K = components[l];
    if (l == 0) {
      m.initial = Eigen::VectorXd::Constant(K, 1.0 / K);
      m.transitions.emplace_back();
    } else {
      m.transitions.push_back(RowMatrix::Constant(K, components[l - 1], 1.0 / K));
    }
  }
  return m;
}

double hmm_mean_nll(const RectHmm& model, const std::vector<LayerData>& layers, std::span<const std::size_t> examples) {
  check_layers(model, layers);
  const auto ex = example_set(layers[0].examples(), examples);
  const HmmStats st = collect(model, layers, ex);
  return -st.loglik / static_cast<double>(st.examples);
}

HmmReport hmm_em_fit(RectHmm& model, const std::vector<LayerData>& layers, const EmOptions& options,
                     std::span<const std::size_t> examples) {
  check_layers(model, layers);
  model.validate();
  const auto ex = example_set(layers[0].examples(), examples);
  if (ex.empty()) fail(Errc::empty_input, "empty layer");
  if (options.mode == EmMode::online && !(options.step_exponent > 0.5 && options.step_exponent <= 1.0)) {
    fail(Errc::invalid_argument, "online step exponent must lie in (0.5, 1]");
  }

  HmmReport report;
  auto check = [](double nll, int epoch) {
    if (!std::isfinite(nll)) fail(Errc::numerical, "NaN encountered in HMM EM at epoch " + std::to_string(epoch));
    return nll;
  };

  if (options.mode == EmMode::batch) {
    HmmStats st = collect(model, layers, ex);
    report.initial_nll = -st.loglik / static_cast<double>(st.examples);
    report.clamped = st.clamped;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      maximize(model, st);
      st = collect(model, layers, ex);
      report.nll.push_back(check(-st.loglik / static_cast<double>(st.examples), epoch));
    }
  } else {
    const HmmStats first = collect(model, layers, ex);
    report.initial_nll = -first.loglik / static_cast<double>(first.examples);
    report.clamped = first.clamped;
    const std::size_t batch = std::max<std::size_t>(1, options.minibatch);
    HmmStats running(model);
    std::uint64_t step = 0;
    std::vector<std::size_t> order = ex;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      CounterRng rng(options.seed, 300 + static_cast<std::uint64_t>(epoch));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t end = std::min(order.size(), start + batch);
        const HmmStats st = collect(model, layers, std::span(order).subspan(start, end - start));
        const double gamma = std::pow(static_cast<double>(++step), -options.step_exponent);
        st.scale_into(running, gamma, 1.0 / static_cast<double>(st.examples));
        maximize(model, running);
      }
      report.nll.push_back(check(hmm_mean_nll(model, layers, ex), epoch));
    }
  }
  if (report.clamped > 0) spdlog::warn("{} negative activation value(s) clamped to zero", report.clamped);
  return report;
}

std::vector<std::vector<int>> decode_all(const RectHmm& model, const std::vector<LayerData>& layers) {
  check_layers(model, layers);
  const LogModel lm(model);
  const std::size_t n = layers[0].examples();
  std::vector<std::vector<int>> out(model.layers(), std::vector<int>(n));
  parallel_chunks(chunk_count(n), [&](std::size_t c) {
    std::vector<std::vector<float>> buffer;
    Observation x;
    for (std::size_t i = c * kChunkSize; i < std::min(n, (c + 1) * kChunkSize); ++i) {
      gather(layers, i, buffer, x);
      const LayerPath path = run_viterbi(model, lm, x);
      for (std::size_t l = 0; l < model.layers(); ++l) out[l][i] = path.states[l];
    }
  });
  return out;
}

void save_hmm(ModelBundle& bundle, const RectHmm& model) {
  nlohmann::json comps = nlohmann::json::array(), dims = nlohmann::json::array();
  for (std::size_t l = 0; l < model.layers(); ++l) {
    comps.push_back(model.components(l));
    dims.push_back(model.dim(l));
    const std::string idx = std::to_string(l);
    bundle.put_blob(kHmmRecord, "mu_" + idx, matrix_blob(model.mu[l]));
    bundle.put_blob(kHmmRecord, "sigma_" + idx, matrix_blob(model.sigma[l]));
    if (l > 0) bundle.put_blob(kHmmRecord, "transition_" + idx, matrix_blob(model.transitions[l]));
  }
  bundle.put_blob(kHmmRecord, "initial", vector_blob(model.initial));
  bundle.put_record(kHmmRecord,
                    {{"type", "rect-hmm"}, {"layers", model.layer_ids}, {"components", comps}, {"dims", dims}});
}

RectHmm load_hmm(const ModelBundle& bundle) {
  const auto& meta = bundle.record(kHmmRecord);
  RectHmm m;
  m.layer_ids = meta.at("layers").get<std::vector<std::string>>();
  m.initial = blob_vector(bundle.blob(kHmmRecord, "initial"));
  for (std::size_t l = 0; l < m.layer_ids.size(); ++l) {
    const std::string idx = std::to_string(l);
    m.mu.push_back(blob_matrix(bundle.blob(kHmmRecord, "mu_" + idx)));
    m.sigma.push_back(blob_matrix(bundle.blob(kHmmRecord, "sigma_" + idx)));
    m.transitions.push_back(l > 0 ? blob_matrix(bundle.blob(kHmmRecord, "transition_" + idx)) : RowMatrix());
  }
  m.validate();
  return m;
}

}  // namespace atlas
