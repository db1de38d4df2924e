#include "atlas/synth.hpp"

#include <algorithm>
#include <cmath>

#include "atlas/bundle.hpp"
#include "atlas/cooccur.hpp"
#include "atlas/error.hpp"
#include "atlas/random.hpp"

namespace atlas {

SynthFamily parse_family(const std::string& name) {
  if (name == "gmm") return SynthFamily::gmm;
  if (name == "rect-hmm") return SynthFamily::rect_hmm;
  if (name == "planted-cooc") return SynthFamily::planted_cooc;
  fail(Errc::config, "unknown synth family '" + name + "'");
}

std::string family_name(SynthFamily family) {
  switch (family) {
    case SynthFamily::gmm: return "gmm";
    case SynthFamily::rect_hmm: return "rect-hmm";
    case SynthFamily::planted_cooc: return "planted-cooc";
  }
  return "?";
}

void SynthSpec::validate() const {
  if (examples == 0) fail(Errc::config, "synth needs at least one example");
  if (!(separation > 0.0) || !(sigma > 0.0)) fail(Errc::config, "separation and sigma must be positive");
  switch (family) {
    case SynthFamily::gmm:
      if (components < 1 || dim < 1) fail(Errc::config, "gmm family needs components >= 1 and dim >= 1");
      break;
    case SynthFamily::rect_hmm:
      if (layer_components.empty() || layer_components.size() != layer_dims.size()) {
        fail(Errc::config, "rect-hmm family needs one component count and one dimension per layer");
      }
      for (std::size_t l = 0; l < layer_components.size(); ++l) {
        if (layer_components[l] < 1 || layer_dims[l] < 1) fail(Errc::config, "layer sizes must be positive");
        if (layer_dims[l] < 31 && layer_components[l] > (1 << layer_dims[l])) {
          fail(Errc::config, "rect-hmm layer has more components than distinct sign patterns");
        }
      }
      break;
    case SynthFamily::planted_cooc:
      if (classes < 2) fail(Errc::config, "planted-cooc family needs at least two classes");
      if (grid < 4 || grid % 2 != 0) fail(Errc::config, "planted-cooc grid must be even and >= 4");
      if (confusion < 0.0 || confusion >= 1.0) fail(Errc::config, "confusion must lie in [0, 1)");
      break;
  }
}

namespace {

constexpr std::uint64_t kModelStream = 0;

std::uint64_t example_stream(std::uint64_t split, std::size_t n) { return ((split + 1) << 40) + n; }

int draw_index(CounterRng& rng, const double* p, int count, std::ptrdiff_t stride = 1) {
  double u = rng.uniform();
  for (int k = 0; k < count - 1; ++k) {
    u -= p[k * stride];
    if (u < 0.0) return k;
  }
  return count - 1;
}

Eigen::VectorXd random_simplex(CounterRng& rng, int n) {
  Eigen::VectorXd p(n);
  for (int i = 0; i < n; ++i) p[i] = 0.2 + 0.8 * rng.uniform();
  return p / p.sum();
}

LayerGmm gmm_truth(const SynthSpec& spec) {
  CounterRng rng(spec.seed, kModelStream);
  LayerGmm g;
  g.layer_id = "x";
  g.mu = RowMatrix::Zero(spec.components, spec.dim);
  g.sigma = RowMatrix::Zero(spec.components, spec.dim);
  for (int k = 0; k < spec.components; ++k) {
    for (int attempt = 0;; ++attempt) {
      for (int d = 0; d < spec.dim; ++d) g.mu(k, d) = spec.separation * (2.0 * rng.uniform() - 1.0);
      bool apart = true;
      for (int j = 0; j < k; ++j) apart = apart && (g.mu.row(j) - g.mu.row(k)).norm() >= spec.separation;
      if (apart || attempt == 1000) break;
    }
    for (int d = 0; d < spec.dim; ++d) g.sigma(k, d) = spec.sigma * (0.3 + 0.3 * rng.uniform());
  }
  g.log_pi = random_simplex(rng, spec.components).array().log();
  return g;
}

RectHmm hmm_truth(const SynthSpec& spec) {
  CounterRng rng(spec.seed, kModelStream);
  RectHmm m;
  const std::size_t L = spec.layer_components.size();
  m.transitions.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    const int K = spec.layer_components[l];
    const int D = spec.layer_dims[l];
    m.layer_ids.push_back("fc" + std::to_string(l + 1));
    RowMatrix sign(K, D);
    for (int k = 0; k < K; ++k) {
      for (int attempt = 0;; ++attempt) {
        for (int d = 0; d < D; ++d) sign(k, d) = rng.below(2) == 0 ? -0.5 : 0.5;
        bool distinct = true;
        for (int j = 0; j < k; ++j) distinct = distinct && sign.row(j) != sign.row(k);
        if (distinct || attempt == 1000) break;
      }
    }
    m.mu.push_back(spec.sigma * (spec.offset + spec.separation * sign.array()).matrix());
    m.sigma.push_back(RowMatrix::Constant(K, D, spec.sigma));
    if (l == 0) {
      m.initial = random_simplex(rng, K);
    } else {
      RowMatrix t(K, spec.layer_components[l - 1]);
      for (Eigen::Index c = 0; c < t.cols(); ++c) t.col(c) = random_simplex(rng, K);
      m.transitions[l] = t;
    }
  }
  m.validate();
  return m;
}

SynthSample sample_gmm(const SynthSpec& spec, const LayerGmm& truth, std::size_t count, std::uint64_t split) {
  const int D = spec.dim;
  std::vector<float> x(count * static_cast<std::size_t>(D));
  std::vector<std::int64_t> labels(count);
  const Eigen::VectorXd pi = truth.log_pi.array().exp();
  for (std::size_t n = 0; n < count; ++n) {
    CounterRng rng(spec.seed, example_stream(split, n));
    const int k = draw_index(rng, pi.data(), spec.components);
    labels[n] = k;
    for (int d = 0; d < D; ++d) {
      x[n * static_cast<std::size_t>(D) + static_cast<std::size_t>(d)] =
          static_cast<float>(truth.mu(k, d) + truth.sigma(k, d) * rng.normal());
    }
  }
  SynthSample s;
  s.store.manifest.example_count = count;
  s.store.manifest.num_classes = static_cast<std::uint64_t>(spec.components);
  s.store.manifest.layers.push_back({"x", LayerKind::global, {static_cast<std::uint64_t>(D)}});
  s.store.manifest.has_labels = true;
  s.store.layers.emplace("x", TensorBlob({count, static_cast<std::uint64_t>(D)}, std::move(x)));
  s.store.labels = TensorBlob({count}, std::move(labels));
  s.truth.gmm = truth;
  return s;
}

SynthSample sample_hmm(const SynthSpec& spec, const RectHmm& truth, std::size_t count, std::uint64_t split) {
  const std::size_t L = truth.layers();
  std::vector<std::vector<float>> x(L);
  for (std::size_t l = 0; l < L; ++l) x[l].resize(count * static_cast<std::size_t>(truth.dim(l)));
  std::vector<std::int64_t> labels(count);
  SynthSample s;
  s.truth.paths.assign(L, std::vector<int>(count));
  for (std::size_t n = 0; n < count; ++n) {
    CounterRng rng(spec.seed, example_stream(split, n));
    int h = 0;
    for (std::size_t l = 0; l < L; ++l) {
      const int K = truth.components(l);
      if (l == 0) {
        h = draw_index(rng, truth.initial.data(), K);
      } else {
        h = draw_index(rng, truth.transitions[l].data() + h, K, truth.transitions[l].cols());
      }
      s.truth.paths[l][n] = h;
      const int D = truth.dim(l);
      for (int d = 0; d < D; ++d) {
        const double y = truth.mu[l](h, d) + truth.sigma[l](h, d) * rng.normal();
        x[l][n * static_cast<std::size_t>(D) + static_cast<std::size_t>(d)] = static_cast<float>(std::max(y, 0.0));
      }
    }
    labels[n] = h;
  }
  s.store.manifest.example_count = count;
  s.store.manifest.num_classes = static_cast<std::uint64_t>(truth.components(L - 1));
  s.store.manifest.has_labels = true;
  for (std::size_t l = 0; l < L; ++l) {
    const auto D = static_cast<std::uint64_t>(truth.dim(l));
    s.store.manifest.layers.push_back({truth.layer_ids[l], LayerKind::global, {D}});
    s.store.layers.emplace(truth.layer_ids[l], TensorBlob({count, D}, std::move(x[l])));
  }
  s.store.labels = TensorBlob({count}, std::move(labels));
  s.truth.hmm = truth;
  return s;
}

SynthSample sample_planted(const SynthSpec& spec, std::size_t count, std::uint64_t split) {
  const int M = spec.classes;
  const int G = spec.grid;
  const int H = G / 2;
  const int low_words = M + 2;
  const int mid_words = M + 1;
  const auto low_pos = static_cast<std::size_t>(G * G);
  const auto mid_pos = static_cast<std::size_t>(H * H);

  PlantedWords low{"low", {G, G}, low_words, std::vector<int>(count * low_pos, 0)};
  PlantedWords mid{"mid", {H, H}, mid_words, std::vector<int>(count * mid_pos, 0)};
  PlantedWords out{"out", {1, 1}, M, std::vector<int>(count, 0)};
  std::vector<float> xl(count * low_pos * static_cast<std::size_t>(low_words));
  std::vector<float> xm(count * mid_pos * static_cast<std::size_t>(mid_words));
  std::vector<float> xo(count * static_cast<std::size_t>(M), 0.0f);
  std::vector<std::int64_t> labels(count);
  std::vector<std::int64_t> predictions(count);

  for (std::size_t n = 0; n < count; ++n) {
    CounterRng rng(spec.seed, example_stream(split, n));
    const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(M)));
    int* lw = low.values.data() + n * low_pos;
    auto paint = [&](int y0, int x0, int h, int w, int word) {
      for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) lw[y * G + x] = word;
      }
    };
    paint(static_cast<int>(rng.below(G - 1)), static_cast<int>(rng.below(G - 1)), 2, 2, M + 1);
    const int rh = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(H - 1)));
    const int rw = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(H - 1)));
    paint(static_cast<int>(rng.below(static_cast<std::uint64_t>(G - rh + 1))),
          static_cast<int>(rng.below(static_cast<std::uint64_t>(G - rw + 1))), rh, rw, c + 1);

    int* mw = mid.values.data() + n * mid_pos;
    for (int by = 0; by < H; ++by) {
      for (int bx = 0; bx < H; ++bx) {
        bool hit = false;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) hit = hit || lw[(2 * by + dy) * G + 2 * bx + dx] == c + 1;
        }
        mw[by * H + bx] = hit ? c + 1 : 0;
      }
    }

    auto emit = [&](std::vector<float>& dst, std::size_t base, int words, int word) {
      for (int d = 0; d < words; ++d) {
        const double mean = d == word ? spec.separation : 0.0;
        dst[base + static_cast<std::size_t>(d)] = static_cast<float>(mean + spec.sigma * rng.normal());
      }
    };
    for (std::size_t p = 0; p < low_pos; ++p) {
      emit(xl, (n * low_pos + p) * static_cast<std::size_t>(low_words), low_words, lw[p]);
    }
    for (std::size_t p = 0; p < mid_pos; ++p) {
      emit(xm, (n * mid_pos + p) * static_cast<std::size_t>(mid_words), mid_words, mw[p]);
    }

    int pred = c;
    if (rng.uniform() < spec.confusion) {
      pred = static_cast<int>(rng.below(static_cast<std::uint64_t>(M - 1)));
      if (pred >= c) ++pred;
    }
    out.values[n] = pred;
    xo[n * static_cast<std::size_t>(M) + static_cast<std::size_t>(pred)] = 1.0f;
    labels[n] = c;
    predictions[n] = pred;
  }

  SynthSample s;
  auto& mf = s.store.manifest;
  mf.example_count = count;
  mf.num_classes = static_cast<std::uint64_t>(M);
  mf.has_labels = true;
  mf.has_predictions = true;
  const auto g = static_cast<std::uint64_t>(G);
  const auto h = static_cast<std::uint64_t>(H);
  mf.layers.push_back({"low", LayerKind::conv, {g, g, static_cast<std::uint64_t>(low_words)}});
  mf.layers.push_back({"mid", LayerKind::conv, {h, h, static_cast<std::uint64_t>(mid_words)}});
  mf.layers.push_back({"out", LayerKind::global, {static_cast<std::uint64_t>(M)}});
  mf.geometry.push_back({"mid", "low", {StageSpec{2, 2, 2, 2, 0, 0, false}}});
  mf.geometry.push_back({"out", "mid", {StageSpec{.global = true}}});
  s.store.layers.emplace("low", TensorBlob({count, g, g, static_cast<std::uint64_t>(low_words)}, std::move(xl)));
  s.store.layers.emplace("mid", TensorBlob({count, h, h, static_cast<std::uint64_t>(mid_words)}, std::move(xm)));
  s.store.layers.emplace("out", TensorBlob({count, static_cast<std::uint64_t>(M)}, std::move(xo)));
  s.store.labels = TensorBlob({count}, std::move(labels));
  s.store.predictions = TensorBlob({count}, std::move(predictions));
  s.truth.planted = {std::move(low), std::move(mid), std::move(out)};
  return s;
}

}  // namespace

SynthTruth synth_model(const SynthSpec& spec) {
  spec.validate();
  SynthTruth t;
  if (spec.family == SynthFamily::gmm) t.gmm = gmm_truth(spec);
  if (spec.family == SynthFamily::rect_hmm) t.hmm = hmm_truth(spec);
  return t;
}

SynthSample synthesize(const SynthSpec& spec, std::size_t count, std::uint64_t split) {
  const SynthTruth truth = synth_model(spec);
  switch (spec.family) {
    case SynthFamily::gmm: return sample_gmm(spec, *truth.gmm, count, split);
    case SynthFamily::rect_hmm: return sample_hmm(spec, *truth.hmm, count, split);
    case SynthFamily::planted_cooc: return sample_planted(spec, count, split);
  }
  fail(Errc::config, "unknown synth family");
}

void sample_store(const SynthSpec& spec, const std::filesystem::path& root) {
  spec.validate();
  const SynthSample train = synthesize(spec, spec.examples, 0);
  write_store(root / "train", train.store);
  std::optional<SynthSample> val;
  if (spec.val_examples > 0) {
    val = synthesize(spec, spec.val_examples, 1);
    write_store(root / "val", val->store);
  }

  ModelBundle truth = ModelBundle::open_or_create(root / "truth");
  truth.provenance() = {{"family", family_name(spec.family)}, {"seed", spec.seed}};
  if (train.truth.gmm) save_gmm(truth, *train.truth.gmm);
  if (train.truth.hmm) save_hmm(truth, *train.truth.hmm);
  const SynthSample& eval = val ? *val : train;
  for (const auto& words : eval.truth.planted) {
    AssignmentGrid grid{words.layer_id, words.grid, words.words, eval.store.manifest.example_count, words.values};
    save_assignments(truth, grid);
  }
  truth.save();
}

}  // namespace atlas
