#include <cmath>

#include "atlas/bundle.hpp"
#include "atlas/cooccur.hpp"
#include "atlas/random.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace atlas;
using testing_support::error_code;
using testing_support::TempDir;

namespace {

AssignmentGrid grid_of(std::string id, GridExtent g, int K, std::size_t examples, CounterRng& rng) {
  AssignmentGrid a;
  a.layer_id = std::move(id);
  a.grid = g;
  a.components = K;
  a.examples = examples;
  a.words.resize(examples * g.size());
  for (auto& w : a.words) w = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
  return a;
}

CoocModel from_counts(CountMatrix counts) {
  CoocModel m;
  m.upper = "u";
  m.lower = "l";
  m.counts = std::move(counts);
  derive_estimates(m);
  return m;
}

const std::vector<StageSpec> kConv3{{3, 3, 1, 1, 0, 0, false}};

}  // namespace

TEST_CASE("counting examples") {
  CounterRng rng(1, 0);
  const FieldMap fm = compose(kConv3, {3, 3});
  AssignmentGrid up = grid_of("u", {1, 1}, 2, 1, rng);
  AssignmentGrid low = grid_of("l", {3, 3}, 7, 1, rng);
  CHECK(count_cooccurrence(up, low, fm).total() == 9);

  std::fill(low.words.begin(), low.words.end(), 5);
  const CoocModel m = count_cooccurrence(up, low, fm);
  for (int k = 0; k < 2; ++k) {
    for (int j = 0; j < 7; ++j) {
      if (j != 5) CHECK(m.counts(k, j) == 0);
    }
  }
  CHECK(m.counts.col(5).sum() == 9);
  // Single lower word: its prior is 1 - O(eps), the rest O(eps).
  CHECK(priors(m).lower[5] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(priors(m).lower[0] < 1e-8);
  CHECK(priors(m).upper.sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("counts match the naive loop on random small grids") {
  CounterRng rng(2, 0);
  const std::vector<std::vector<StageSpec>> chains{
      {{3, 3, 1, 1, 1, 1, false}},
      {{2, 2, 2, 2, 0, 0, false}},
      {{3, 3, 1, 1, 1, 1, false}, {2, 2, 2, 2, 0, 0, false}},
      {{3, 3, 2, 2, 1, 1, false}},
      {{1, 1, 2, 2, 0, 0, false}},
  };
  for (int trial = 0; trial < 60; ++trial) {
    const auto& chain = chains[static_cast<std::size_t>(trial) % chains.size()];
    const int h = 4 + static_cast<int>(rng.below(5)), w = 4 + static_cast<int>(rng.below(5));
    const FieldMap fm = compose(chain, {h, w});
    const int Ku = 1 + static_cast<int>(rng.below(5)), Kl = 1 + static_cast<int>(rng.below(5));
    const std::size_t n = 1 + rng.below(4);
    const AssignmentGrid up = grid_of("u", fm.upper, Ku, n, rng);
    const AssignmentGrid low = grid_of("l", {h, w}, Kl, n, rng);
    const CoocModel m = count_cooccurrence(up, low, fm);
    CHECK(m.counts == oracle::naive_counts(up, low, chain));
    for (Eigen::Index k = 0; k < m.log_transition.rows(); ++k) {
      CHECK(m.log_transition.row(k).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(priors(m).lower.sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(priors(m).upper.sum() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("counting rejects mismatched grids") {
  CounterRng rng(3, 0);
  const FieldMap fm = compose(kConv3, {3, 3});
  const AssignmentGrid up = grid_of("u", {1, 1}, 2, 2, rng);
  const AssignmentGrid low = grid_of("l", {4, 4}, 2, 2, rng);
  CHECK(error_code([&] { count_cooccurrence(up, low, fm); }) == Errc::shape_mismatch);
  const AssignmentGrid fewer = grid_of("l", {3, 3}, 2, 1, rng);
  CHECK(error_code([&] { count_cooccurrence(up, fewer, fm); }) == Errc::example_count_mismatch);
  CHECK(error_code([] { from_counts(CountMatrix::Zero(2, 2)); }) == Errc::empty_input);
}

TEST_CASE("uniform assignments give uniform priors") {
  CounterRng rng(4, 0);
  const std::vector<StageSpec> pool{{2, 2, 2, 2, 0, 0, false}};
  const FieldMap fm = compose(pool, {32, 32});
  const AssignmentGrid up = grid_of("u", fm.upper, 4, 20, rng);
  const AssignmentGrid low = grid_of("l", {32, 32}, 4, 20, rng);
  const CoocModel m = count_cooccurrence(up, low, fm);
  for (int k = 0; k < 4; ++k) {
    CHECK(std::abs(priors(m).lower[k] - 0.25) < 0.01);
    CHECK(std::abs(priors(m).upper[k] - 0.25) < 0.01);
  }
}

TEST_CASE("independent layers give transitions near the lower prior") {
  CounterRng rng(5, 0);
  const std::vector<StageSpec> pool{{2, 2, 2, 2, 0, 0, false}};
  const FieldMap fm = compose(pool, {20, 20});
  AssignmentGrid up = grid_of("u", fm.upper, 3, 250, rng);
  AssignmentGrid low = grid_of("l", {20, 20}, 3, 250, rng);
  for (auto& w : low.words) w = rng.uniform() < 0.6 ? 0 : static_cast<int>(1 + rng.below(2));
  const CoocModel m = count_cooccurrence(up, low, fm);
  CHECK(m.total() == 100000);
  const RowMatrix t = transitions(m);
  const Eigen::VectorXd prior = priors(m).lower;
  for (int k = 0; k < 3; ++k) {
    const double rows = static_cast<double>(m.counts.row(k).sum());
    for (int j = 0; j < 3; ++j) {
      const double se = std::sqrt(prior[j] * (1.0 - prior[j]) / rows);
      CHECK(std::abs(t(k, j) - prior[j]) < 4.0 * se);
    }
  }
}

TEST_CASE("smoothed estimates") {
  CountMatrix c(2, 3);
  c << 6, 0, 4, 0, 0, 0;
  const CoocModel m = from_counts(c);
  CHECK(m.epsilon == doctest::Approx(1e-8));
  CHECK(m.dead_upper == std::vector<bool>{false, true});
  CHECK(m.dead_lower == std::vector<bool>{false, true, false});
  const RowMatrix t = transitions(m);
  CHECK(t(0, 0) == doctest::Approx((6 + 1e-8) / (10 + 3e-8)).epsilon(1e-12));
  CHECK(t(0, 1) > 0.0);
  CHECK(t(1, 2) == doctest::Approx(1.0 / 3.0));
  const RowMatrix raw = raw_transitions(m);
  CHECK(raw(0, 0) == 0.6);
  CHECK(raw(0, 1) == 0.0);
  CHECK(raw.row(1).sum() == 0.0);
  CHECK(priors(m).upper[0] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("adding an image without word k leaves row k unchanged") {
  CounterRng rng(6, 0);
  const FieldMap fm = compose(kConv3, {5, 5});
  for (int trial = 0; trial < 20; ++trial) {
    AssignmentGrid up = grid_of("u", fm.upper, 3, 4, rng);
    AssignmentGrid low = grid_of("l", {5, 5}, 3, 4, rng);
    const CoocModel before = count_cooccurrence(up, low, fm);
    const int k = static_cast<int>(rng.below(3));
    for (std::size_t i = 0; i < fm.upper.size(); ++i) up.words.push_back(static_cast<int>((k + 1 + rng.below(2)) % 3));
    for (std::size_t i = 0; i < 25; ++i) low.words.push_back(static_cast<int>(rng.below(3)));
    ++up.examples;
    ++low.examples;
    const CoocModel after = count_cooccurrence(up, low, fm);
    CHECK(after.counts.row(k) == before.counts.row(k));
    CHECK(raw_transitions(after).row(k) == raw_transitions(before).row(k));
  }
}

TEST_CASE("image subsets and interior-only counting") {
  CounterRng rng(7, 0);
  const FieldMap fm = compose(std::vector<StageSpec>{{3, 3, 1, 1, 1, 1, false}}, {6, 6});
  const AssignmentGrid up = grid_of("u", fm.upper, 3, 6, rng);
  const AssignmentGrid low = grid_of("l", {6, 6}, 3, 6, rng);
  const std::vector<std::size_t> a{0, 2, 4}, b{1, 3, 5};
  CHECK(count_cooccurrence(up, low, fm, a).counts + count_cooccurrence(up, low, fm, b).counts ==
        count_cooccurrence(up, low, fm).counts);
  const CoocModel interior = count_cooccurrence(up, low, fm, {}, true);
  CHECK(interior.total() == 6 * 16 * 9);
  CHECK(interior.interior_only);
}

TEST_CASE("neighbor classes") {
  const std::vector<std::int64_t> labels{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2};
  std::vector<std::int64_t> perfect = labels;
  CHECK(neighbor_classes(labels, perfect, 0, 2) == std::vector<int>{0});
  std::vector<std::int64_t> one = labels;
  one[0] = one[1] = 3;
  CHECK(neighbor_classes(labels, one, 0, 2) == std::vector<int>{0, 3});
  // Confusion counts {c1:5, c2:3, c3:1} with c1=4, c2=1, c3=2.
  const std::vector<std::int64_t> conf{4, 4, 4, 4, 4, 1, 1, 1, 2, 0, 1, 2};
  CHECK(neighbor_classes(labels, conf, 0, 2) == std::vector<int>{0, 4, 1});
  const std::vector<std::int64_t> tie{2, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2};
  CHECK(neighbor_classes(labels, tie, 0, 5) == std::vector<int>{0, 1, 2});
  CHECK(error_code([&] { neighbor_classes({}, {}, 0, 1); }) == Errc::labels_required);
  CHECK(error_code([&] { neighbor_classes(labels, std::span<const std::int64_t>{}, 0, 1); }) == Errc::predictions_required);
  const std::vector<int> classes{1, 2};
  CHECK(examples_of_classes(labels, classes) == std::vector<std::size_t>{10, 11});
}

TEST_CASE("assignment and co-occurrence persistence") {
  CounterRng rng(8, 0);
  const FieldMap fm = compose(kConv3, {5, 5});
  const AssignmentGrid up = grid_of("u", fm.upper, 3, 4, rng);
  const AssignmentGrid low = grid_of("l", {5, 5}, 4, 4, rng);
  const CoocModel m = count_cooccurrence(up, low, fm);
  TempDir dir;
  ModelBundle b = ModelBundle::open_or_create(dir / "b");
  save_assignments(b, low);
  save_cooc(b, m);
  b.save();
  const ModelBundle r = ModelBundle::open(dir / "b");
  const AssignmentGrid back = load_assignments(r, "l");
  CHECK(back.words == low.words);
  CHECK(back.grid == low.grid);
  CHECK(back.components == 4);
  const CoocModel mb = load_cooc(r, "u", "l");
  CHECK(mb.counts == m.counts);
  CHECK(mb.log_transition == m.log_transition);
  CHECK(mb.log_prior_lower == m.log_prior_lower);
  CHECK(error_code([&] { load_cooc(r, "l", "u"); }) == Errc::missing_model);
}
