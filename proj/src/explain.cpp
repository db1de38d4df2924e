#include "atlas/explain.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "atlas/bundle.hpp"
#include "atlas/error.hpp"

namespace atlas {
using nlohmann::json;

namespace {

struct Scatter {
  RowMatrix within;
  RowMatrix between;
  Eigen::RowVectorXd mean;
  double lambda = 0.0;
  int groups = 0;
};

Scatter scatter(const RowMatrix& x, std::span<const int> groups) {
  if (static_cast<Eigen::Index>(groups.size()) != x.rows()) fail(Errc::dimension_mismatch, "one group label per row required");
  const Eigen::Index D = x.cols();
  std::map<int, std::vector<Eigen::Index>> members;
  for (Eigen::Index i = 0; i < x.rows(); ++i) members[groups[static_cast<std::size_t>(i)]].push_back(i);

  Scatter s;
  s.within = RowMatrix::Zero(D, D);
  s.between = RowMatrix::Zero(D, D);
  s.mean = Eigen::RowVectorXd::Zero(D);
  std::vector<std::pair<Eigen::RowVectorXd, double>> centers;
  double eligible = 0.0;
  for (const auto& [g, rows] : members) {
    if (rows.size() < 2) continue;
    Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(D);
    for (auto i : rows) c += x.row(i);
    c /= static_cast<double>(rows.size());
    for (auto i : rows) {
      const Eigen::RowVectorXd d = x.row(i) - c;
      s.within += d.transpose() * d;
    }
    s.mean += c * static_cast<double>(rows.size());
    eligible += static_cast<double>(rows.size());
    centers.emplace_back(std::move(c), static_cast<double>(rows.size()));
  }
  s.groups = static_cast<int>(centers.size());
  if (s.groups < 2) fail(Errc::invalid_argument, "LDA needs at least two sub-clusters with two or more members");
  s.mean /= eligible;
  for (const auto& [c, n] : centers) {
    const Eigen::RowVectorXd d = c - s.mean;
    s.between += n * d.transpose() * d;
  }
  s.lambda = 1e-4 * s.within.trace() / static_cast<double>(D);
  if (!(s.lambda > 0.0)) s.lambda = 1e-12;
  return s;
}

}  // namespace

Projection lda_project(const RowMatrix& x, std::span<const int> groups) {
  const Scatter s = scatter(x, groups);
  const Eigen::Index D = x.cols();
  const Eigen::MatrixXd a = s.between;
  const Eigen::MatrixXd b = Eigen::MatrixXd(s.within) + s.lambda * Eigen::MatrixXd::Identity(D, D);
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> solver(a, b);
  if (solver.info() != Eigen::Success) fail(Errc::numerical, "LDA eigenproblem did not converge");

  Projection p;
  p.basis = RowMatrix::Zero(D, 2);
  p.eigenvalues.setZero();
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, D); ++c) {
    const Eigen::Index src = D - 1 - c;
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    v.normalize();
    for (Eigen::Index i = 0; i < D; ++i) {
      if (std::abs(v[i]) > 1e-12) {
        if (v[i] < 0) v = -v;
        break;
      }
    }
    p.basis.col(c) = v;
    p.eigenvalues[c] = solver.eigenvalues()[src];
  }
  p.coords = (x.rowwise() - s.mean) * p.basis;
  return p;
}

double fisher_criterion(const RowMatrix& x, std::span<const int> groups, const RowMatrix& basis) {
  const Scatter s = scatter(x, groups);
  if (basis.rows() != x.cols()) fail(Errc::dimension_mismatch, "basis rows must equal the dimension");
  const Eigen::Index D = x.cols();
  const Eigen::MatrixXd w = basis;
  const Eigen::MatrixXd sw = w.transpose() * (Eigen::MatrixXd(s.within) + s.lambda * Eigen::MatrixXd::Identity(D, D)) * w;
  const Eigen::MatrixXd sb = w.transpose() * Eigen::MatrixXd(s.between) * w;
  return sw.ldlt().solve(sb).trace();
}

std::vector<std::size_t> l2_representatives(const RowMatrix& members, std::size_t m) {
  if (members.rows() == 0) return {};
  const Eigen::RowVectorXd center = members.colwise().mean();
  std::vector<double> dist(static_cast<std::size_t>(members.rows()));
  for (Eigen::Index i = 0; i < members.rows(); ++i) dist[static_cast<std::size_t>(i)] = (members.row(i) - center).squaredNorm();
  std::vector<std::size_t> idx(dist.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  idx.resize(std::min(m, idx.size()));
  return idx;
}

std::vector<double> llr_scores(const RowMatrix& log_emission, int j) {
  if (j < 0 || j >= log_emission.cols()) fail(Errc::out_of_range, "sub-cluster index out of range");
  if (log_emission.cols() < 2) fail(Errc::invalid_argument, "LLR needs at least two sub-clusters");
  std::vector<double> scores(static_cast<std::size_t>(log_emission.rows()));
  for (Eigen::Index i = 0; i < log_emission.rows(); ++i) {
    double worst = std::numeric_limits<double>::infinity();
    for (Eigen::Index z = 0; z < log_emission.cols(); ++z) {
      if (z != j) worst = std::min(worst, log_emission(i, j) - log_emission(i, z));
    }
    scores[static_cast<std::size_t>(i)] = worst;
  }
  return scores;
}

std::vector<std::size_t> llr_representatives(const RowMatrix& log_emission, int j, std::size_t m) {
  const std::vector<double> scores = llr_scores(log_emission, j);
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(m, idx.size()));
  return idx;
}

Junction junction(const RectHmm& model, const std::vector<LayerData>& layers,
                  const std::vector<std::vector<int>>& paths, std::size_t level, int cluster, std::size_t m) {
  if (level + 1 >= model.layers()) fail(Errc::out_of_range, "junction needs a following modeled layer");
  if (cluster < 0 || cluster >= model.components(level)) fail(Errc::out_of_range, "cluster index out of range");
  if (layers.size() != model.layers() || paths.size() != model.layers()) {
    fail(Errc::dimension_mismatch, "layers and paths must cover every modeled layer");
  }

  Junction j;
  j.layer = model.layer_ids[level];
  j.next_layer = model.layer_ids[level + 1];
  j.level = level;
  j.cluster = cluster;
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t n = 0; n < paths[level].size(); ++n) {
    if (paths[level][n] != cluster) continue;
    j.members.push_back(n);
    groups[paths[level + 1][n]].push_back(n);
  }
  if (j.members.empty()) fail(Errc::empty_input, "cluster " + std::to_string(cluster) + " of " + j.layer + " is empty");

  double mass = 0.0;
  for (const auto& [next, _] : groups) mass += model.transitions[level + 1](next, cluster);

  std::vector<std::vector<float>> buffer;
  Observation obs;
  auto activity = [&](std::size_t n, std::size_t l) {
    gather(layers, n, buffer, obs);
    return std::vector<float>(obs[l].begin(), obs[l].end());
  };

  std::vector<int> observed;
  for (const auto& [next, _] : groups) observed.push_back(next);
  for (const auto& [next, members] : groups) {
    SubCluster sub;
    sub.next = next;
    sub.members = members;
    sub.transition = mass > 0.0 ? model.transitions[level + 1](next, cluster) / mass : 1.0 / static_cast<double>(groups.size());
    sub.in_scatter = members.size() >= 2;

    RowMatrix x(static_cast<Eigen::Index>(members.size()), model.dim(level));
    RowMatrix emis(static_cast<Eigen::Index>(members.size()), static_cast<Eigen::Index>(observed.size()));
    for (std::size_t i = 0; i < members.size(); ++i) {
      const auto lower = activity(members[i], level);
      for (int d = 0; d < model.dim(level); ++d) x(static_cast<Eigen::Index>(i), d) = lower[static_cast<std::size_t>(d)];
      const auto upper = activity(members[i], level + 1);
      for (std::size_t z = 0; z < observed.size(); ++z) {
        emis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(z)) =
            rg_log_emission(model, level + 1, observed[z], upper);
      }
    }
    for (std::size_t r : l2_representatives(x, m)) sub.l2.push_back(members[r]);
    if (observed.size() > 1) {
      const int self = static_cast<int>(std::find(observed.begin(), observed.end(), next) - observed.begin());
      for (std::size_t r : llr_representatives(emis, self, m)) sub.llr.push_back(members[r]);
    }
    j.subclusters.push_back(std::move(sub));
  }
  j.single_subcluster = groups.size() == 1;

  int eligible = 0;
  for (const auto& sub : j.subclusters) eligible += sub.in_scatter;
  if (eligible >= 2) {
    RowMatrix x(static_cast<Eigen::Index>(j.members.size()), model.dim(level));
    std::vector<int> labels;
    for (std::size_t i = 0; i < j.members.size(); ++i) {
      const auto lower = activity(j.members[i], level);
      for (int d = 0; d < model.dim(level); ++d) x(static_cast<Eigen::Index>(i), d) = lower[static_cast<std::size_t>(d)];
      labels.push_back(paths[level + 1][j.members[i]]);
    }
    j.coords = lda_project(x, labels).coords;
    j.projected = true;
  }
  return j;
}

Junction junction(const ModelBundle& bundle, const ActivationStore& store, const std::string& layer, int cluster,
                  std::size_t m) {
  const RectHmm model = load_hmm(bundle);
  const auto it = std::find(model.layer_ids.begin(), model.layer_ids.end(), layer);
  if (it == model.layer_ids.end()) fail(Errc::missing_model, "layer '" + layer + "' is not part of the HMM");
  std::vector<LayerData> layers;
  for (std::size_t l = 0; l < model.layers(); ++l) {
    layers.push_back(store.layer(model.layer_ids[l]));
    if (static_cast<int>(layers.back().dim()) != model.dim(l) || layers.back().positions() != 1) {
      fail(Errc::shape_mismatch, "layer '" + model.layer_ids[l] + "' does not match the HMM");
    }
  }
  const auto paths = decode_all(model, layers);
  return junction(model, layers, paths, static_cast<std::size_t>(it - model.layer_ids.begin()), cluster, m);
}

json junction_to_json(const Junction& j) {
  json subs = json::array();
  for (const auto& s : j.subclusters) {
    subs.push_back({{"next", s.next},
                    {"size", s.members.size()},
                    {"members", s.members},
                    {"transition", s.transition},
                    {"in_scatter", s.in_scatter},
                    {"l2", s.l2},
                    {"llr", s.llr}});
  }
  json coords = json::array();
  if (j.projected) {
    for (Eigen::Index i = 0; i < j.coords.rows(); ++i) coords.push_back({j.coords(i, 0), j.coords(i, 1)});
  }
  return json{{"layer", j.layer},
              {"next_layer", j.next_layer},
              {"cluster", j.cluster},
              {"size", j.members.size()},
              {"members", j.members},
              {"single_subcluster", j.single_subcluster},
              {"projected", j.projected},
              {"coords", coords},
              {"subclusters", subs}};
}

SimilarityReport similarity_report(const std::string& layer, const RowMatrix& means, const AssignmentGrid& grid,
                                   std::span<const std::int64_t> labels) {
  if (labels.empty()) fail(Errc::labels_required, "labels required");
  if (labels.size() != grid.examples) fail(Errc::label_mismatch, "one label per example required");
  const int K = static_cast<int>(means.rows());
  if (grid.components != K) fail(Errc::dimension_mismatch, "assignments do not match the dictionary size");

  SimilarityReport r;
  r.layer = layer;
  r.distances = RowMatrix::Zero(K, K);
  for (int a = 0; a < K; ++a) {
    for (int b = a + 1; b < K; ++b) r.distances(a, b) = r.distances(b, a) = (means.row(a) - means.row(b)).norm();
  }

  std::vector<std::map<std::int64_t, std::int64_t>> votes(static_cast<std::size_t>(K));
  for (std::size_t n = 0; n < grid.examples; ++n) {
    for (int w : grid.example(n)) ++votes[static_cast<std::size_t>(w)][labels[n]];
  }
  r.sizes.assign(static_cast<std::size_t>(K), 0);
  r.dominant.assign(static_cast<std::size_t>(K), -1);
  r.dominant_fraction.assign(static_cast<std::size_t>(K), 0.0);
  double sum = 0.0;
  int nonempty = 0;
  for (int k = 0; k < K; ++k) {
    std::int64_t best = 0;
    std::int64_t total = 0;
    for (const auto& [label, count] : votes[static_cast<std::size_t>(k)]) {
      total += count;
      if (count > best) {
        best = count;
        r.dominant[static_cast<std::size_t>(k)] = static_cast<int>(label);
      }
    }
    r.sizes[static_cast<std::size_t>(k)] = total;
    if (total > 0) {
      r.dominant_fraction[static_cast<std::size_t>(k)] = static_cast<double>(best) / static_cast<double>(total);
      sum += r.dominant_fraction[static_cast<std::size_t>(k)];
      ++nonempty;
    }
  }
  r.average_dominant = nonempty > 0 ? sum / nonempty : 0.0;
  r.order.resize(static_cast<std::size_t>(K));
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) {
    const int da = r.dominant[static_cast<std::size_t>(a)];
    const int db = r.dominant[static_cast<std::size_t>(b)];
    if ((da < 0) != (db < 0)) return db < 0;
    return da < db;
  });
  return r;
}

json similarity_to_json(const SimilarityReport& report) {
  json distances = json::array();
  for (Eigen::Index a = 0; a < report.distances.rows(); ++a) {
    json row = json::array();
    for (Eigen::Index b = 0; b < report.distances.cols(); ++b) row.push_back(report.distances(a, b));
    distances.push_back(std::move(row));
  }
  return json{{"layer", report.layer},
              {"sizes", report.sizes},
              {"dominant", report.dominant},
              {"dominant_fraction", report.dominant_fraction},
              {"order", report.order},
              {"average_dominant", report.average_dominant},
              {"distances", distances}};
}

}  // namespace atlas
