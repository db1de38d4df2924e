#include "atlas/cooccur.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <map>

#include "atlas/bundle.hpp"
#include "atlas/error.hpp"
#include "atlas/parallel.hpp"

namespace atlas {

AssignmentGrid assign_layer(const LayerGmm& gmm, const LayerData& layer) {
  AssignmentGrid g;
  g.layer_id = layer.info().id;
  g.grid = layer.info().grid();
  g.components = gmm.components();
  g.examples = layer.examples();
  g.words.resize(g.examples * g.grid.size());
  parallel_chunks(chunk_count(g.examples), [&](std::size_t c) {
    const std::size_t first = c * kChunkSize;
    const std::size_t count = std::min(g.examples, first + kChunkSize) - first;
    const auto words = assign(gmm, layer.examples(first, count));
    std::copy(words.begin(), words.end(), g.words.begin() + static_cast<std::ptrdiff_t>(first * g.grid.size()));
  });
  return g;
}

std::string assignment_record(const std::string& layer_id) { return "assign_" + layer_id; }

void save_assignments(ModelBundle& bundle, const AssignmentGrid& grid) {
  const std::string name = assignment_record(grid.layer_id);
  bundle.put_blob(name, "words",
                  TensorBlob({grid.examples, static_cast<std::uint64_t>(grid.grid.h), static_cast<std::uint64_t>(grid.grid.w)},
                             std::vector<std::int64_t>(grid.words.begin(), grid.words.end())));
  bundle.put_record(name, {{"type", "assignments"},
                           {"layer", grid.layer_id},
                           {"components", grid.components},
                           {"examples", grid.examples},
                           {"grid", {grid.grid.h, grid.grid.w}}});
}

AssignmentGrid load_assignments(const ModelBundle& bundle, const std::string& layer_id) {
  const std::string name = assignment_record(layer_id);
  const auto& meta = bundle.record(name);
  const TensorBlob blob = bundle.blob(name, "words");
  AssignmentGrid g;
  g.layer_id = layer_id;
  g.components = meta.at("components").get<int>();
  g.examples = static_cast<std::size_t>(blob.dims().at(0));
  g.grid = {static_cast<int>(blob.dims().at(1)), static_cast<int>(blob.dims().at(2))};
  const auto words = blob.i64();
  g.words.assign(words.begin(), words.end());
  return g;
}

CoocModel count_cooccurrence(const AssignmentGrid& upper, const AssignmentGrid& lower, const FieldMap& fm,
                             std::span<const std::size_t> images, bool interior_only) {
  if (upper.grid != fm.upper || lower.grid != fm.lower) {
    fail(Errc::shape_mismatch, "assignment grids of '" + upper.layer_id + "'/'" + lower.layer_id +
                                   "' do not match the receptive-field geometry");
  }
  if (upper.examples != lower.examples) fail(Errc::example_count_mismatch, "example-count mismatch between layers");
  const auto ex = example_set(upper.examples, images);

  const std::size_t chunks = chunk_count(ex.size());
  std::vector<CountMatrix> parts(chunks, CountMatrix::Zero(upper.components, lower.components));
  parallel_chunks(chunks, [&](std::size_t c) {
    CountMatrix& counts = parts[c];
    for (std::size_t i = c * kChunkSize; i < std::min(ex.size(), (c + 1) * kChunkSize); ++i) {
      const std::size_t n = ex[i];
      for (int py = 0; py < fm.upper.h; ++py) {
        for (int px = 0; px < fm.upper.w; ++px) {
          if (interior_only && !fm.interior({py, px})) continue;
          const int k = upper.at(n, {py, px});
          for (int qy : fm.rows[static_cast<std::size_t>(py)]) {
            for (int qx : fm.cols[static_cast<std::size_t>(px)]) ++counts(k, lower.at(n, {qy, qx}));
          }
        }
      }
    }
  });

  CoocModel model;
  model.upper = upper.layer_id;
  model.lower = lower.layer_id;
  model.interior_only = interior_only;
  model.counts = CountMatrix::Zero(upper.components, lower.components);
  for (const auto& p : parts) model.counts += p;
  derive_estimates(model);
  return model;
}

void derive_estimates(CoocModel& model) {
  const auto Ku = model.counts.rows();
  const auto Kl = model.counts.cols();
  const double total = static_cast<double>(model.total());
  if (total <= 0.0) fail(Errc::empty_input, "all co-occurrence counts are zero");
  const double eps = 1e-9 * total;
  model.epsilon = eps;

  const Eigen::VectorXd rows = model.counts.cast<double>().rowwise().sum();
  const Eigen::VectorXd cols = model.counts.cast<double>().colwise().sum().transpose();
  model.log_prior_upper = ((rows.array() + eps) / (total + static_cast<double>(Ku) * eps)).log();
  model.log_prior_lower = ((cols.array() + eps) / (total + static_cast<double>(Kl) * eps)).log();

  model.log_transition.resize(Ku, Kl);
  model.dead_upper.assign(static_cast<std::size_t>(Ku), false);
  model.dead_lower.assign(static_cast<std::size_t>(Kl), false);
  std::size_t dead = 0;
  for (Eigen::Index k = 0; k < Ku; ++k) {
    if (rows[k] == 0.0) {
      model.dead_upper[static_cast<std::size_t>(k)] = true;
      model.log_transition.row(k).setConstant(-std::log(static_cast<double>(Kl)));
      ++dead;
      continue;
    }
    const double denom = rows[k] + static_cast<double>(Kl) * eps;
    for (Eigen::Index j = 0; j < Kl; ++j) {
      model.log_transition(k, j) = std::log((static_cast<double>(model.counts(k, j)) + eps) / denom);
    }
  }
  for (Eigen::Index j = 0; j < Kl; ++j) model.dead_lower[static_cast<std::size_t>(j)] = cols[j] == 0.0;
  if (dead > 0) {
    spdlog::info("co-occurrence {}->{}: {} upper word(s) without support, rows set uniform", model.upper, model.lower,
                 dead);
  }
}

Priors priors(const CoocModel& model) {
  return {model.log_prior_upper.array().exp(), model.log_prior_lower.array().exp()};
}

RowMatrix transitions(const CoocModel& model) { return model.log_transition.array().exp(); }

RowMatrix raw_transitions(const CoocModel& model) {
  RowMatrix t = model.counts.cast<double>();
  for (Eigen::Index k = 0; k < t.rows(); ++k) {
    const double row = t.row(k).sum();
    if (row > 0.0) t.row(k) /= row;
  }
  return t;
}

std::string cooc_record(const std::string& upper, const std::string& lower) { return "cooc_" + upper + "__" + lower; }

void save_cooc(ModelBundle& bundle, const CoocModel& model) {
  const std::string name = cooc_record(model.upper, model.lower);
  const auto& c = model.counts;
  bundle.put_blob(name, "counts",
                  TensorBlob({static_cast<std::uint64_t>(c.rows()), static_cast<std::uint64_t>(c.cols())},
                             std::vector<std::int64_t>(c.data(), c.data() + c.size())));
  bundle.put_blob(name, "log_prior_upper", vector_blob(model.log_prior_upper));
  bundle.put_blob(name, "log_prior_lower", vector_blob(model.log_prior_lower));
  bundle.put_blob(name, "log_transition", matrix_blob(model.log_transition));
  std::vector<int> dead;
  for (std::size_t k = 0; k < model.dead_upper.size(); ++k) {
    if (model.dead_upper[k]) dead.push_back(static_cast<int>(k));
  }
  bundle.put_record(name, {{"type", "cooccurrence"},
                           {"upper", model.upper},
                           {"lower", model.lower},
                           {"interior_only", model.interior_only},
                           {"total", model.total()},
                           {"dead_upper", dead}});
}

CoocModel load_cooc(const ModelBundle& bundle, const std::string& upper, const std::string& lower) {
  const std::string name = cooc_record(upper, lower);
  const auto& meta = bundle.record(name);
  const TensorBlob counts = bundle.blob(name, "counts");
  CoocModel m;
  m.upper = upper;
  m.lower = lower;
  m.interior_only = meta.value("interior_only", false);
  m.counts = Eigen::Map<const CountMatrix>(counts.i64().data(), static_cast<Eigen::Index>(counts.dims()[0]),
                                           static_cast<Eigen::Index>(counts.dims()[1]));
  derive_estimates(m);
  return m;
}

std::vector<int> neighbor_classes(std::span<const std::int64_t> labels, std::span<const std::int64_t> predictions,
                                  int m, std::size_t max_neighbors) {
  if (labels.empty()) fail(Errc::labels_required, "labels required");
  if (predictions.size() != labels.size()) fail(Errc::predictions_required, "predictions required");
  std::map<int, std::size_t> confusion;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] == m && predictions[n] != m) ++confusion[static_cast<int>(predictions[n])];
  }
  std::vector<std::pair<int, std::size_t>> ranked(confusion.begin(), confusion.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<int> scope{m};
  for (std::size_t i = 0; i < ranked.size() && i < max_neighbors; ++i) scope.push_back(ranked[i].first);
  return scope;
}

std::vector<std::size_t> examples_of_classes(std::span<const std::int64_t> labels, std::span<const int> classes) {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (std::find(classes.begin(), classes.end(), static_cast<int>(labels[n])) != classes.end()) out.push_back(n);
  }
  return out;
}

}  // namespace atlas
