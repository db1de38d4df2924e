#include <algorithm>
#include <cmath>

#include "atlas/bundle.hpp"
#include "atlas/gmm.hpp"
#include "atlas/normal.hpp"
#include "atlas/random.hpp"
#include "atlas/synth.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace atlas;
using testing_support::error_code;
using testing_support::materialize;
using testing_support::TempDir;

namespace {

StoreContents layer_store(const std::string& id, std::vector<std::uint64_t> shape, std::vector<float> data,
                          std::vector<std::int64_t> labels = {}, int classes = 2) {
  StoreContents c;
  std::size_t per = 1;
  for (auto s : shape) per *= s;
  const std::uint64_t n = data.size() / per;
  c.manifest.example_count = n;
  c.manifest.num_classes = static_cast<std::uint64_t>(classes);
  c.manifest.layers.push_back({id, shape.size() == 3 ? LayerKind::conv : LayerKind::global, shape});
  std::vector<std::uint64_t> dims{n};
  dims.insert(dims.end(), shape.begin(), shape.end());
  c.layers.emplace(id, TensorBlob(dims, std::move(data)));
  if (!labels.empty()) {
    c.manifest.has_labels = true;
    c.labels = TensorBlob({n}, std::move(labels));
  }
  return c;
}

LayerGmm random_gmm(CounterRng& rng, int K, int D) {
  LayerGmm g;
  g.layer_id = "x";
  g.mu.resize(K, D);
  g.sigma.resize(K, D);
  g.log_pi.resize(K);
  for (int k = 0; k < K; ++k) {
    g.log_pi[k] = rng.normal();
    for (int d = 0; d < D; ++d) {
      g.mu(k, d) = 3.0 * rng.normal();
      g.sigma(k, d) = 0.1 + rng.uniform();
    }
  }
  g.log_pi.array() -= normal::log_sum_exp(std::span<const double>(g.log_pi.data(), K));
  return g;
}

std::vector<float> random_columns(CounterRng& rng, std::size_t n, double scale = 4.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

}  // namespace

TEST_CASE("responsibilities rows sum to one and match direct densities") {
  CounterRng rng(1, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const int K = 1 + static_cast<int>(rng.below(6)), D = 1 + static_cast<int>(rng.below(5));
    const LayerGmm g = random_gmm(rng, K, D);
    const auto data = random_columns(rng, static_cast<std::size_t>(20 * D), 8.0);
    const ColumnView cols{data, static_cast<std::size_t>(D)};
    const RowMatrix r = responsibilities(g, cols);
    const auto a = assign(g, cols);
    for (std::size_t i = 0; i < cols.rows(); ++i) {
      CHECK(r.row(static_cast<Eigen::Index>(i)).sum() == doctest::Approx(1.0).epsilon(1e-9));
      std::vector<double> ld(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k) {
        ld[static_cast<std::size_t>(k)] = g.log_pi[k];
        for (int d = 0; d < D; ++d) ld[static_cast<std::size_t>(k)] += oracle::log_normal(cols.row(i)[static_cast<std::size_t>(d)], g.mu(k, d), g.sigma(k, d));
      }
      const double lse = oracle::log_sum_exp(ld);
      for (int k = 0; k < K; ++k) CHECK(r(static_cast<Eigen::Index>(i), k) == doctest::Approx(std::exp(ld[static_cast<std::size_t>(k)] - lse)).epsilon(1e-9));
      // argmax invariance: assign equals argmax of the raw log densities.
      CHECK(a[i] == static_cast<int>(std::max_element(ld.begin(), ld.end()) - ld.begin()));
      CHECK(a[i] == assign(g, ColumnView{cols.row(i), cols.dim})[0]);
    }
  }
}

TEST_CASE("responsibility examples") {
  LayerGmm g;
  g.log_pi = Eigen::Vector2d(std::log(0.5), std::log(0.5));
  g.mu = RowMatrix(2, 1);
  g.mu << -5.0, 5.0;
  g.sigma = RowMatrix::Ones(2, 1);
  const std::vector<float> mid{0.0f}, at{5.0f};
  const RowMatrix r = responsibilities(g, {mid, 1});
  CHECK(r(0, 0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(r(0, 1) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(assign(g, {mid, 1})[0] == 0);
  CHECK(responsibilities(g, {at, 1})(0, 1) > 0.99);

  LayerGmm one = g;
  one.log_pi = Eigen::VectorXd::Zero(1);
  one.mu = RowMatrix::Zero(1, 1);
  one.sigma = RowMatrix::Ones(1, 1);
  CHECK(responsibilities(one, {at, 1})(0, 0) == 1.0);

  const std::vector<float> wrong{1.0f, 2.0f};
  CHECK(error_code([&] { responsibilities(g, {wrong, 2}); }) == Errc::dimension_mismatch);
}

TEST_CASE("argmax ties resolve to the lowest index") {
  const std::vector<double> a{0.2, 0.8}, b{0.5, 0.5}, c{1.0, 3.0, 3.0};
  CHECK(argmax(a) == 1);
  CHECK(argmax(b) == 0);
  CHECK(argmax(c) == 1);
}

TEST_CASE("fixed output dictionary") {
  const LayerGmm g = fixed_output_gmm("out", 4);
  CHECK_FALSE(g.trainable);
  CHECK(g.mu == RowMatrix::Identity(4, 4));
  CHECK((g.sigma.array() == 0.1).all());
  CHECK(g.log_pi.array().exp().sum() == doctest::Approx(1.0));
  CHECK(g.log_pi[0] == g.log_pi[3]);
  TempDir dir;
  const ActivationStore s = materialize(dir, layer_store("out", {4}, std::vector<float>(8, 0.25f)));
  LayerGmm copy = g;
  CHECK(error_code([&] { em_fit(copy, s.layer("out"), {}); }) == Errc::invalid_argument);
}

TEST_CASE("init_gmm") {
  CounterRng rng(2, 0);
  auto data = random_columns(rng, 300);
  for (std::size_t i = 0; i < 100; ++i) data[i * 3 + 2] = 1.5f;  // constant dimension
  const ColumnView cols{data, 3};
  const LayerGmm g = init_gmm(cols, 5, 7, "x");
  CHECK(g.components() == 5);
  CHECK(g.log_pi.array().exp().sum() == doctest::Approx(1.0));
  for (int k = 0; k < 5; ++k) {
    bool found = false;
    for (std::size_t i = 0; i < cols.rows(); ++i) {
      bool same = true;
      for (int d = 0; d < 3; ++d) same = same && g.mu(k, d) == cols.row(i)[static_cast<std::size_t>(d)];
      found = found || same;
    }
    CHECK(found);
    for (int j = 0; j < k; ++j) CHECK(g.mu.row(j) != g.mu.row(k));
    CHECK(g.sigma.row(k) == g.sigma.row(0));
  }
  CHECK(g.sigma(0, 2) == kSigmaFloor);
  const LayerGmm one = init_gmm(cols, 1, 7, "x");
  CHECK(one.log_pi[0] == 0.0);
  const std::vector<float> same(30, 1.0f);
  CHECK(error_code([&] { init_gmm({same, 3}, 2, 1); }) == Errc::invalid_argument);
  CHECK(init_gmm(cols, 5, 7, "x").mu == g.mu);
}

TEST_CASE("batch EM is monotone on conv data") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CounterRng rng(seed, 3);
    TempDir dir;
    const ActivationStore s = materialize(dir, layer_store("c", {3, 3, 2}, random_columns(rng, 40 * 18)));
    LayerGmm g = init_gmm(s.layer("c").all(), 4, seed, "c");
    EmOptions o;
    o.epochs = 25;
    const EmReport r = em_fit(g, s.layer("c"), o);
    double prev = r.initial_nll;
    for (double v : r.nll) {
      CHECK(v <= prev + 1e-6);
      prev = v;
    }
    CHECK(r.nll.back() == doctest::Approx(mean_nll(g, s.layer("c"))).epsilon(1e-9));
    g.validate();
  }
}

TEST_CASE("online EM lands within twice the batch parameter error") {
  SynthSpec spec;
  spec.family = SynthFamily::gmm;
  spec.examples = 10000;
  spec.seed = 5;
  const SynthSample sample = synthesize(spec, spec.examples, 0);
  TempDir dir;
  const ActivationStore s = materialize(dir, sample.store);
  auto error = [&](const LayerGmm& g) {
    const auto perm = oracle::best_permutation(sample.truth.gmm->mu, g.mu);
    double e = 0.0;
    for (int k = 0; k < 3; ++k) e += (sample.truth.gmm->mu.row(k) - g.mu.row(perm[k])).cwiseAbs().sum();
    return e / 12.0;
  };
  EmOptions batch;
  batch.epochs = 100;
  LayerGmm b = init_gmm(s.layer("x").all(), 3, 1, "x");
  em_fit(b, s.layer("x"), batch);
  EmOptions online = batch;
  online.mode = EmMode::online;
  online.epochs = 10;
  online.step_exponent = 0.7;
  LayerGmm o = init_gmm(s.layer("x").all(), 3, 1, "x");
  const EmReport r = em_fit(o, s.layer("x"), online);
  CHECK(r.nll.size() == 10);
  CHECK(error(o) <= 2.0 * error(b));
}

TEST_CASE("empty components are re-seeded") {
  std::vector<float> data;
  for (int i = 0; i < 200; ++i) data.push_back(static_cast<float>(i % 2 ? 10.0 + 0.01 * i : -10.0 - 0.01 * i));
  TempDir dir;
  const ActivationStore s = materialize(dir, layer_store("x", {1}, data));
  LayerGmm g;
  g.layer_id = "x";
  g.log_pi = Eigen::Vector3d::Constant(std::log(1.0 / 3));
  g.mu = RowMatrix(3, 1);
  g.mu << -10.0, 10.0, 1000.0;
  g.sigma = RowMatrix::Ones(3, 1);
  EmOptions o;
  o.epochs = 3;
  const EmReport r = em_fit(g, s.layer("x"), o);
  CHECK(r.reseeded >= 1);
  CHECK(std::abs(g.mu(2, 0)) < 20.0);
  g.validate();
}

TEST_CASE("discriminative gradient matches finite differences (K=3, D=5, M=2)") {
  CounterRng rng(4, 0);
  std::vector<std::int64_t> labels{0, 1, 1, 0};
  TempDir dir;
  const ActivationStore s = materialize(dir, layer_store("c", {2, 2, 5}, random_columns(rng, 4 * 20, 1.0), labels));
  const LayerData layer = s.layer("c");
  const LayerGmm g = init_gmm(layer.all(), 3, 2, "c");
  const HistClassifier clf = HistClassifier::random(2, 3, 3, 1.0);
  const std::vector<std::size_t> batch{0, 1, 2, 3};
  const auto grad = discriminative_gradient(g, clf, layer, labels, batch);
  CHECK(grad.loss == doctest::Approx(hist_classifier_loss(g, clf, layer, labels, batch)));
  const double h = 1e-3;
  std::vector<double> a, n;
  for (int k = 0; k < 3; ++k) {
    for (int d = 0; d < 5; ++d) {
      LayerGmm p = g, m = g;
      p.mu(k, d) += h;
      m.mu(k, d) -= h;
      n.push_back((hist_classifier_loss(p, clf, layer, labels, batch) - hist_classifier_loss(m, clf, layer, labels, batch)) / (2 * h));
      a.push_back(grad.mu(k, d));
      p = g;
      m = g;
      p.sigma(k, d) *= std::exp(h);
      m.sigma(k, d) *= std::exp(-h);
      n.push_back((hist_classifier_loss(p, clf, layer, labels, batch) - hist_classifier_loss(m, clf, layer, labels, batch)) / (2 * h));
      a.push_back(grad.log_sigma(k, d));
    }
  }
  const Eigen::Map<Eigen::VectorXd> av(a.data(), static_cast<Eigen::Index>(a.size()));
  const Eigen::Map<Eigen::VectorXd> nv(n.data(), static_cast<Eigen::Index>(n.size()));
  CHECK((av - nv).norm() / std::max(av.norm(), nv.norm()) < 1e-4);
  CHECK(grad.log_pi.sum() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  CounterRng rng(5, 0);
  TempDir dir;
  std::vector<std::int64_t> labels(20);
  for (std::size_t i = 0; i < 20; ++i) labels[i] = static_cast<std::int64_t>(i % 2);
  const ActivationStore s = materialize(dir, layer_store("c", {2, 2, 3}, random_columns(rng, 20 * 12), labels));
  LayerGmm g = init_gmm(s.layer("c").all(), 3, 1, "c");
  HistClassifier clf = HistClassifier::random(2, 3, 1);
  const LayerGmm g0 = g;
  const HistClassifier c0 = clf;
  DiscriminativeOptions o;
  o.learning_rate = 0.0;
  o.epochs = 3;
  discriminative_fit(g, clf, s.layer("c"), s.labels(), o);
  CHECK(g.mu == g0.mu);
  CHECK(g.sigma == g0.sigma);
  CHECK(g.log_pi == g0.log_pi);
  CHECK(clf.weight == c0.weight);
  CHECK(clf.bias == c0.bias);
}

TEST_CASE("linearly separable two-class columns reach zero training error") {
  CounterRng rng(6, 0);
  std::vector<float> data;
  std::vector<std::int64_t> labels;
  for (int n = 0; n < 200; ++n) {
    const int y = n % 2;
    labels.push_back(y);
    data.push_back(static_cast<float>((y ? 3.0 : -3.0) + rng.normal()));
    data.push_back(static_cast<float>(rng.normal()));
  }
  TempDir dir;
  const ActivationStore s = materialize(dir, layer_store("x", {2}, data, labels));
  LayerGmm g = init_gmm(s.layer("x").all(), 4, 1, "x");
  HistClassifier clf = HistClassifier::zeros(2, 4);
  DiscriminativeOptions o;
  o.epochs = 50;
  o.learning_rate = 0.5;
  const auto r = discriminative_fit(g, clf, s.layer("x"), s.labels(), o);
  CHECK(r.error.size() == 50);
  CHECK(*std::min_element(r.error.begin(), r.error.end()) == 0.0);
  CHECK(hist_classifier_error(g, clf, s.layer("x"), s.labels()) == r.error.back());
  CHECK(r.loss.back() < r.loss.front());
  g.validate();
}

TEST_CASE("random classifier on balanced 10-class labels errs about 90%") {
  CounterRng rng(7, 0);
  std::vector<std::int64_t> labels(10000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int64_t>(i % 10);
  TempDir dir;
  const ActivationStore s = materialize(dir, layer_store("x", {2}, random_columns(rng, 20000), labels, 10));
  const LayerGmm g = init_gmm(s.layer("x").all(), 5, 1, "x");
  const HistClassifier clf = HistClassifier::random(10, 5, 9);
  CHECK(hist_classifier_error(g, clf, s.layer("x"), s.labels()) == doctest::Approx(0.9).epsilon(0.05 / 0.9));
  HistClassifier perfect = HistClassifier::zeros(10, 5);
  CHECK(error_code([&] { hist_classifier_error(g, perfect, s.layer("x"), std::span<const std::int64_t>{}); }) == Errc::labels_required);
}

TEST_CASE("top_m_examples") {
  CounterRng rng(8, 0);
  TempDir dir;
  const ActivationStore s = materialize(dir, layer_store("c", {2, 3, 2}, random_columns(rng, 30 * 12)));
  const LayerData layer = s.layer("c");
  LayerGmm g = init_gmm(layer.all(), 3, 1, "c");
  em_fit(g, layer, {});
  const auto words = assign(g, layer.all());
  for (int k = 0; k < 3; ++k) {
    const auto top = top_m_examples(g, layer, k, 6);
    CHECK(top.size() == std::min<std::size_t>(6, static_cast<std::size_t>(std::count(words.begin(), words.end(), k))));
    for (std::size_t i = 0; i < top.size(); ++i) {
      CHECK(words[top[i].example * 6 + top[i].position] == k);
      if (i > 0) CHECK(top[i - 1].responsibility >= top[i].responsibility);
    }
  }
  const auto all = top_m_examples(g, layer, 0, 100000);
  CHECK(all.size() == static_cast<std::size_t>(std::count(words.begin(), words.end(), 0)));
  CHECK(error_code([&] { top_m_examples(g, layer, 3); }) == Errc::out_of_range);

  // K=1: every responsibility is 1, so the order is by likelihood under the single Gaussian.
  const LayerGmm one = init_gmm(layer.all(), 1, 1, "c");
  const auto top = top_m_examples(one, layer, 0, 6);
  std::vector<std::pair<double, std::size_t>> oracle_order;
  for (std::size_t i = 0; i < layer.all().rows(); ++i) {
    double ld = 0.0;
    for (int d = 0; d < 2; ++d) ld += oracle::log_normal(layer.all().row(i)[static_cast<std::size_t>(d)], one.mu(0, d), one.sigma(0, d));
    oracle_order.emplace_back(-ld, i);
  }
  std::sort(oracle_order.begin(), oracle_order.end());
  for (std::size_t i = 0; i < 6; ++i) CHECK(top[i].example * 6 + top[i].position == oracle_order[i].second);
}

TEST_CASE("gmm persistence round trip") {
  CounterRng rng(9, 0);
  TempDir dir;
  ModelBundle b = ModelBundle::open_or_create(dir / "b");
  const LayerGmm g = random_gmm(rng, 4, 3);
  const HistClassifier clf = HistClassifier::random(2, 4, 1);
  save_gmm(b, g, clf);
  save_gmm(b, fixed_output_gmm("out", 3));
  b.save();
  const ModelBundle r = ModelBundle::open(dir / "b");
  const LayerGmm back = load_gmm(r, "x");
  CHECK(back.mu == g.mu);
  CHECK(back.sigma == g.sigma);
  CHECK(back.log_pi == g.log_pi);
  CHECK(load_classifier(r, "x")->weight == clf.weight);
  CHECK_FALSE(load_classifier(r, "out").has_value());
  CHECK_FALSE(load_gmm(r, "out").trainable);
  CHECK(error_code([&] { load_gmm(r, "nope"); }) == Errc::missing_model);
}
