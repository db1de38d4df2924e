#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "atlas/gmm.hpp"
#include "atlas/rect_hmm.hpp"
#include "atlas/tensor_store.hpp"

namespace atlas {

enum class SynthFamily { gmm, rect_hmm, planted_cooc };

SynthFamily parse_family(const std::string& name);
std::string family_name(SynthFamily family);

struct SynthSpec {
  SynthFamily family = SynthFamily::gmm;
  std::size_t examples = 1000;      // train split
  std::size_t val_examples = 500;
  std::uint64_t seed = 0;
  double separation = 4.0;

  // gmm: one global layer "x" of `dim` units, `components` clusters.
  int components = 3;
  int dim = 4;

  // rect-hmm: layers "fc1".."fcL"; means are sigma * (offset +- separation / 2).
  std::vector<int> layer_components{2, 2};
  std::vector<int> layer_dims{3, 3};
  double sigma = 1.0;
  double offset = 2.0;

  // planted-cooc: "low" grid x grid, "mid" grid/2 x grid/2 (2x2 stride-2 pooling), "out" one-hot over classes.
  int classes = 4;
  int grid = 8;
  double confusion = 0.05;

  /// Throws config on an inconsistent spec.
  void validate() const;
};

/// Ground-truth word of every position of one layer of the planted store.
struct PlantedWords {
  std::string layer_id;
  GridExtent grid;
  int words = 0;
  std::vector<int> values;  // examples x positions
};

struct SynthTruth {
  std::optional<LayerGmm> gmm;
  std::optional<RectHmm> hmm;
  std::vector<std::vector<int>> paths;  // rect-hmm: [l][n]
  std::vector<PlantedWords> planted;    // planted-cooc: low, mid, out
};

struct SynthSample {
  StoreContents store;
  SynthTruth truth;
};

/// Ground-truth model of the spec, drawn from the spec seed alone.
SynthTruth synth_model(const SynthSpec& spec);

/// `count` examples of split `split` (0 train, 1 val) under the configured model.
SynthSample synthesize(const SynthSpec& spec, std::size_t count, std::uint64_t split);

/// Writes `root/train`, `root/val` and the ground-truth bundle `root/truth`.
void sample_store(const SynthSpec& spec, const std::filesystem::path& root);

}  // namespace atlas
