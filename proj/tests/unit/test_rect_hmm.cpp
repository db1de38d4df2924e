#include <cmath>

#include "atlas/bundle.hpp"
#include "atlas/normal.hpp"
#include "atlas/random.hpp"
#include "atlas/rect_hmm.hpp"
#include "atlas/synth.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace atlas;
using testing_support::error_code;
using testing_support::materialize;
using testing_support::TempDir;

namespace {

RectHmm random_hmm(CounterRng& rng, std::vector<int> K, std::vector<int> D) {
  RectHmm m;
  auto simplex = [&](int n) {
    Eigen::VectorXd p(n);
    for (int i = 0; i < n; ++i) p[i] = 0.05 + rng.uniform();
    return Eigen::VectorXd(p / p.sum());
  };
  m.transitions.resize(K.size());
  for (std::size_t l = 0; l < K.size(); ++l) {
    m.layer_ids.push_back("fc" + std::to_string(l + 1));
    RowMatrix mu(K[l], D[l]), sigma(K[l], D[l]);
    for (int k = 0; k < K[l]; ++k) {
      for (int d = 0; d < D[l]; ++d) {
        mu(k, d) = 2.0 * rng.normal();
        sigma(k, d) = 0.5 + rng.uniform();
      }
    }
    m.mu.push_back(mu);
    m.sigma.push_back(sigma);
    if (l == 0) {
      m.initial = simplex(K[0]);
    } else {
      m.transitions[l].resize(K[l], K[l - 1]);
      for (int c = 0; c < K[l - 1]; ++c) m.transitions[l].col(c) = simplex(K[l]);
    }
  }
  return m;
}

struct Sample {
  std::vector<std::vector<float>> data;
  Observation x;
};

Sample random_observation(CounterRng& rng, const RectHmm& m) {
  Sample s;
  s.data.resize(m.layers());
  for (std::size_t l = 0; l < m.layers(); ++l) {
    for (int d = 0; d < m.dim(l); ++d) s.data[l].push_back(static_cast<float>(std::max(0.0, 2.0 * rng.normal())));
  }
  for (auto& v : s.data) s.x.emplace_back(v);
  return s;
}

SynthSpec hmm_spec(double offset, double separation, std::size_t examples) {
  SynthSpec spec;
  spec.family = SynthFamily::rect_hmm;
  spec.examples = examples;
  spec.offset = offset;
  spec.separation = separation;
  spec.seed = 3;
  return spec;
}

double zero_fraction(const SynthSample& s) {
  std::size_t zeros = 0, total = 0;
  for (const auto& [id, blob] : s.store.layers) {
    for (float v : blob.f32()) {
      zeros += v == 0.0f;
      ++total;
    }
  }
  return static_cast<double>(zeros) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("rectified-Gaussian emission examples") {
  CHECK(rg_log_emission(0.0, 1.0, 0.0) == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(rg_log_emission(-3.0, 1.0, 0.0) == doctest::Approx(std::log(0.5 * std::erfc(-3.0 / std::sqrt(2.0)))).epsilon(1e-12));
  CHECK(rg_log_emission(-3.0, 1.0, 0.0) == doctest::Approx(-0.001350).epsilon(1e-3));
  CHECK(rg_log_emission(1.0, 1.0, 1.0) == doctest::Approx(-0.918939).epsilon(1e-6));
  CHECK(error_code([] { rg_log_emission(0.0, 1.0, -1e-3); }) == Errc::negative_activation);

  CounterRng rng(1, 0);
  for (int i = 0; i < 200; ++i) {
    const double mu = 4.0 * rng.normal(), sigma = 0.1 + 3.0 * rng.uniform();
    const double x = rng.uniform() < 0.3 ? 0.0 : 5.0 * rng.uniform();
    CHECK(rg_log_emission(mu, sigma, x) == doctest::Approx(oracle::rg_emission(mu, sigma, x)).epsilon(1e-10));
  }
}

TEST_CASE("forward-backward and Viterbi match enumeration on small chains") {
  CounterRng rng(2, 0);
  for (int trial = 0; trial < 40; ++trial) {
    const RectHmm m = trial % 2 ? random_hmm(rng, {2, 2}, {3, 2}) : random_hmm(rng, {2, 3, 2}, {2, 1, 3});
    m.validate();
    const Sample s = random_observation(rng, m);
    const auto truth = oracle::enumerate_paths(m, s.x);
    const Posteriors post = forward_backward(m, s.x);
    const LayerPath path = viterbi(m, s.x);
    CHECK(post.log_likelihood == doctest::Approx(truth.log_likelihood).epsilon(1e-12));
    CHECK(path.states == truth.best);
    CHECK(path.log_joint == doctest::Approx(truth.best_log_joint).epsilon(1e-12));
    CHECK(path.log_joint <= post.log_likelihood + 1e-12);
    CHECK(path.log_posterior == doctest::Approx(path.log_joint - post.log_likelihood).epsilon(1e-12));
    CHECK(path.log_posterior <= 1e-12);
    for (std::size_t l = 0; l < m.layers(); ++l) {
      CHECK(post.gamma[l].sum() == doctest::Approx(1.0).epsilon(1e-9));
      CHECK((post.gamma[l].array() >= 0.0).all());
      if (l == 0) continue;
      CHECK(post.xi[l].sum() == doctest::Approx(1.0).epsilon(1e-9));
      const Eigen::VectorXd rows = post.xi[l].rowwise().sum();
      const Eigen::VectorXd cols = post.xi[l].colwise().sum().transpose();
      CHECK((rows - post.gamma[l]).cwiseAbs().maxCoeff() < 1e-9);
      CHECK((cols - post.gamma[l - 1]).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("degenerate chain with one state per layer") {
  CounterRng rng(3, 0);
  const RectHmm m = random_hmm(rng, {1, 1, 1}, {2, 3, 1});
  const Sample s = random_observation(rng, m);
  const Posteriors post = forward_backward(m, s.x);
  double expected = 0.0;
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(post.gamma[l][0] == doctest::Approx(1.0));
    if (l > 0) CHECK(post.xi[l](0, 0) == doctest::Approx(1.0));
    for (int d = 0; d < m.dim(l); ++d) expected += oracle::rg_emission(m.mu[l](0, d), m.sigma[l](0, d), s.x[l][static_cast<std::size_t>(d)]);
  }
  CHECK(post.log_likelihood == doctest::Approx(expected).epsilon(1e-12));
  CHECK(viterbi(m, s.x).states == std::vector<int>{0, 0, 0});
}

TEST_CASE("inference rejects bad observations") {
  CounterRng rng(4, 0);
  const RectHmm m = random_hmm(rng, {2, 2}, {2, 2});
  Sample s = random_observation(rng, m);
  s.data[1].push_back(1.0f);
  Observation wrong{s.data[0], s.data[1]};
  CHECK(error_code([&] { forward_backward(m, wrong); }) == Errc::dimension_mismatch);
  CHECK(error_code([&] { viterbi(m, wrong); }) == Errc::dimension_mismatch);
  s.data[1].pop_back();
  s.data[0][0] = -1.0f;
  Observation negative{s.data[0], s.data[1]};
  CHECK(error_code([&] { forward_backward(m, negative); }) == Errc::negative_activation);
}

TEST_CASE("gather clamps dump noise below zero") {
  StoreContents c;
  c.manifest.example_count = 2;
  c.manifest.layers.push_back({"fc1", LayerKind::global, {2}});
  c.layers.emplace("fc1", TensorBlob({2, 2}, std::vector<float>{1.0f, -1e-6f, -0.5f, 2.0f}));
  TempDir dir;
  const ActivationStore s = materialize(dir, c);
  const std::vector<LayerData> layers{s.layer("fc1")};
  std::vector<std::vector<float>> buffer;
  Observation x;
  CHECK(gather(layers, 0, buffer, x) == 1);
  CHECK(x[0][1] == 0.0f);
  CHECK(x[0][0] == 1.0f);
  CHECK(gather(layers, 1, buffer, x) == 1);
  CHECK(x[0][0] == 0.0f);
}

TEST_CASE("synthetic censoring rates") {
  const SynthSample high = synthesize(hmm_spec(8.0, 1e-9, 2000), 2000, 0);
  CHECK(zero_fraction(high) == 0.0);
  const SynthSample low = synthesize(hmm_spec(-5.0, 1e-9, 2000), 2000, 0);
  CHECK(zero_fraction(low) > 0.999);
  SynthSpec spec = hmm_spec(0.0, 1e-9, 100000);
  spec.layer_components = {1};
  spec.layer_dims = {1};
  const SynthSample mid = synthesize(spec, spec.examples, 0);
  const double se = std::sqrt(0.25 / 1e5);
  CHECK(std::abs(zero_fraction(mid) - 0.5) <= 3.0 * se);
}

TEST_CASE("HMM EM is monotone and keeps tables stochastic") {
  SynthSpec spec = hmm_spec(0.5, 3.0, 600);
  spec.layer_components = {2, 3};
  const SynthSample sample = synthesize(spec, spec.examples, 0);
  TempDir dir;
  const ActivationStore s = materialize(dir, sample.store);
  const std::vector<LayerData> layers{s.layer("fc1"), s.layer("fc2")};
  RectHmm model = init_hmm(layers, std::vector<int>{2, 3}, 1);
  CHECK(model.transitions[1].isApproxToConstant(1.0 / 3.0));
  EmOptions o;
  o.epochs = 15;
  const HmmReport r = hmm_em_fit(model, layers, o);
  double prev = r.initial_nll;
  for (double v : r.nll) {
    CHECK(v <= prev + 1e-6);
    prev = v;
  }
  model.validate();
  CHECK(model.initial.sum() == doctest::Approx(1.0).epsilon(1e-9));
  for (int c = 0; c < 2; ++c) CHECK(model.transitions[1].col(c).sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.nll.back() == doctest::Approx(hmm_mean_nll(model, layers)).epsilon(1e-9));

  const auto paths = decode_all(model, layers);
  CHECK(paths.size() == 2);
  CHECK(paths[0].size() == 600);
  std::vector<std::vector<float>> buffer;
  Observation x;
  for (std::size_t n = 0; n < 600; n += 97) {
    gather(layers, n, buffer, x);
    const auto path = viterbi(model, x);
    CHECK(paths[0][n] == path.states[0]);
    CHECK(paths[1][n] == path.states[1]);
  }

  EmOptions online = o;
  online.mode = EmMode::online;
  online.epochs = 3;
  RectHmm m2 = init_hmm(layers, std::vector<int>{2, 3}, 1);
  const HmmReport r2 = hmm_em_fit(m2, layers, online);
  CHECK(r2.nll.size() == 3);
  m2.validate();
}

TEST_CASE("single-layer HMM EM equals censored mixture EM") {
  SynthSpec spec = hmm_spec(0.0, 3.0, 400);
  spec.layer_components = {3};
  spec.layer_dims = {2};
  const SynthSample sample = synthesize(spec, spec.examples, 0);
  TempDir dir;
  const ActivationStore s = materialize(dir, sample.store);
  const std::vector<LayerData> layers{s.layer("fc1")};
  RectHmm model = init_hmm(layers, std::vector<int>{3}, 2);
  const RectHmm start = model;
  EmOptions o;
  o.epochs = 1;
  hmm_em_fit(model, layers, o);

  // One hand-written censored-mixture EM step.
  const ColumnView cols = layers[0].all();
  Eigen::VectorXd nk = Eigen::VectorXd::Zero(3);
  RowMatrix s1 = RowMatrix::Zero(3, 2), s2 = RowMatrix::Zero(3, 2);
  for (std::size_t n = 0; n < cols.rows(); ++n) {
    std::vector<double> lp(3);
    for (int k = 0; k < 3; ++k) {
      lp[static_cast<std::size_t>(k)] = std::log(start.initial[k]);
      for (int d = 0; d < 2; ++d) lp[static_cast<std::size_t>(k)] += oracle::rg_emission(start.mu[0](k, d), start.sigma[0](k, d), cols.row(n)[static_cast<std::size_t>(d)]);
    }
    const double lse = oracle::log_sum_exp(lp);
    for (int k = 0; k < 3; ++k) {
      const double r = std::exp(lp[static_cast<std::size_t>(k)] - lse);
      nk[k] += r;
      for (int d = 0; d < 2; ++d) {
        const double x = cols.row(n)[static_cast<std::size_t>(d)];
        double m1 = x, m2 = x * x;
        if (x <= 0.0) {
          const double mu = start.mu[0](k, d), sg = start.sigma[0](k, d), b = -mu / sg;
          const double lam = std::exp(oracle::log_normal(b, 0.0, 1.0) - std::log(0.5 * std::erfc(-b / std::sqrt(2.0))));
          m1 = mu - sg * lam;
          m2 = sg * sg * (1.0 - b * lam - lam * lam) + m1 * m1;
        }
        s1(k, d) += r * m1;
        s2(k, d) += r * m2;
      }
    }
  }
  for (int k = 0; k < 3; ++k) {
    CHECK(model.initial[k] == doctest::Approx(nk[k] / 400.0).epsilon(1e-9));
    for (int d = 0; d < 2; ++d) {
      const double mean = s1(k, d) / nk[k];
      const double var = s2(k, d) / nk[k] - mean * mean;
      CHECK(model.mu[0](k, d) == doctest::Approx(mean).epsilon(1e-8));
      CHECK(model.sigma[0](k, d) == doctest::Approx(std::max(std::sqrt(std::max(var, 0.0)), kSigmaFloor)).epsilon(1e-8));
    }
  }
}

TEST_CASE("hmm persistence round trip") {
  CounterRng rng(5, 0);
  const RectHmm m = random_hmm(rng, {2, 3}, {2, 2});
  TempDir dir;
  ModelBundle b = ModelBundle::open_or_create(dir / "b");
  save_hmm(b, m);
  b.save();
  const RectHmm r = load_hmm(ModelBundle::open(dir / "b"));
  CHECK(r.layer_ids == m.layer_ids);
  CHECK(r.initial == m.initial);
  CHECK(r.transitions[1] == m.transitions[1]);
  CHECK(r.mu[1] == m.mu[1]);
  CHECK(r.sigma[0] == m.sigma[0]);
  CHECK(error_code([&] { load_hmm(ModelBundle::open_or_create(dir / "empty")); }) == Errc::missing_model);
}
