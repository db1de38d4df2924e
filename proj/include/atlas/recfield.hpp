#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace atlas {

/// One convolution or pooling stage between two modeled layers.
/// `global` stands for global pooling: the kernel covers the whole input grid.
struct StageSpec {
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
  bool global = false;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct GridExtent {
  int h = 1, w = 1;
  std::size_t size() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  friend bool operator==(const GridExtent&, const GridExtent&) = default;
};

struct Position {
  int y = 0, x = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

/// Receptive-field relation between an upper layer and a lower layer.
///
/// Upper position p reads lower positions q = p * scale + origin + o for o in a
/// rectangle of `extent` cells. When some stage has kernel < stride the
/// rectangle has holes; `mask_y`/`mask_x` flag the offsets actually reached, so
/// the offset set O is their cross product.
struct FieldMap {
  int scale_y = 1, scale_x = 1;
  int origin_y = 0, origin_x = 0;
  int extent_y = 1, extent_x = 1;
  GridExtent lower;
  GridExtent upper;
  std::vector<StageSpec> stages;  // with global stages resolved to concrete kernels
  std::vector<bool> mask_y, mask_x;

  // Valid lower coordinates read by each upper row / column, after clipping
  // through every intermediate grid.
  std::vector<std::vector<int>> rows;
  std::vector<std::vector<int>> cols;

  /// |O|: offsets reached by an interior position.
  std::size_t offset_count() const;
  /// True when no offset of p is clipped.
  bool interior(Position p) const;
};

struct WindowCell {
  Position q;
  int oy = 0, ox = 0;  // cell of the extent rectangle, in [0, extent)
};

struct Window {
  std::vector<WindowCell> cells;
  std::size_t clipped = 0;  // offsets of O that fall outside a valid grid
};

/// Composes a stage chain, lowest stage first, applied to a lower grid.
FieldMap compose(std::span<const StageSpec> stages, GridExtent lower);

/// Valid lower positions feeding upper position p. Throws out_of_range for p
/// outside the upper grid.
Window window(const FieldMap& fm, Position p);

}  // namespace atlas
