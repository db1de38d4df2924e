#include "atlas/recfield.hpp"

#include <algorithm>
#include <string>

#include "atlas/error.hpp"

namespace atlas {
namespace {

struct AxisStage {
  int kernel, stride, pad;
};

// Lower coordinates reachable from upper coordinate p along one axis. With
// `grids` empty no clipping is applied.
std::vector<int> trace_axis(const std::vector<AxisStage>& stages, const std::vector<int>& grids, int p) {
  std::vector<int> current{p};
  for (std::size_t i = stages.size(); i-- > 0;) {
    const AxisStage& st = stages[i];
    std::vector<int> below;
    for (int u : current) {
      if (!grids.empty() && (u < 0 || u >= grids[i + 1])) continue;
      for (int j = 0; j < st.kernel; ++j) below.push_back(u * st.stride - st.pad + j);
    }
    std::sort(below.begin(), below.end());
    below.erase(std::unique(below.begin(), below.end()), below.end());
    current = std::move(below);
  }
  if (!grids.empty()) {
    std::erase_if(current, [&](int q) { return q < 0 || q >= grids.front(); });
  }
  return current;
}

}  // namespace

std::size_t FieldMap::offset_count() const {
  return static_cast<std::size_t>(std::count(mask_y.begin(), mask_y.end(), true)) *
         static_cast<std::size_t>(std::count(mask_x.begin(), mask_x.end(), true));
}

bool FieldMap::interior(Position p) const {
  const auto full_y = static_cast<std::size_t>(std::count(mask_y.begin(), mask_y.end(), true));
  const auto full_x = static_cast<std::size_t>(std::count(mask_x.begin(), mask_x.end(), true));
  return rows.at(static_cast<std::size_t>(p.y)).size() == full_y &&
         cols.at(static_cast<std::size_t>(p.x)).size() == full_x;
}

FieldMap compose(std::span<const StageSpec> stages, GridExtent lower) {
  if (stages.empty()) fail(Errc::invalid_argument, "stage chain is empty");
  if (lower.h < 1 || lower.w < 1) fail(Errc::invalid_argument, "lower grid must be at least 1x1");

  FieldMap fm;
  fm.lower = lower;
  std::vector<AxisStage> ys, xs;
  std::vector<int> grid_y{lower.h}, grid_x{lower.w};
  for (const StageSpec& raw : stages) {
    StageSpec st = raw;
    if (st.global) {
      st = StageSpec{grid_y.back(), grid_x.back(), 1, 1, 0, 0, false};
    }
    if (st.kh < 1 || st.kw < 1 || st.sh < 1 || st.sw < 1 || st.ph < 0 || st.pw < 0) {
      fail(Errc::invalid_argument, "stage needs kernel >= 1, stride >= 1, padding >= 0");
    }
    const int out_h = (grid_y.back() + 2 * st.ph - st.kh) / st.sh + 1;
    const int out_w = (grid_x.back() + 2 * st.pw - st.kw) / st.sw + 1;
    if (grid_y.back() + 2 * st.ph < st.kh || grid_x.back() + 2 * st.pw < st.kw || out_h < 1 || out_w < 1) {
      fail(Errc::invalid_argument, "stage kernel larger than its padded input grid");
    }
    grid_y.push_back(out_h);
    grid_x.push_back(out_w);
    ys.push_back({st.kh, st.sh, st.ph});
    xs.push_back({st.kw, st.sw, st.pw});
    fm.stages.push_back(st);
  }
  fm.upper = GridExtent{grid_y.back(), grid_x.back()};

  // closed form: scale = prod(stride), extent = 1 + sum (k - 1) * prod(preceding strides),
  // origin = -sum pad * prod(preceding strides)
  int jump_y = 1, jump_x = 1;
  fm.extent_y = fm.extent_x = 1;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    fm.extent_y += (ys[i].kernel - 1) * jump_y;
    fm.extent_x += (xs[i].kernel - 1) * jump_x;
    fm.origin_y -= ys[i].pad * jump_y;
    fm.origin_x -= xs[i].pad * jump_x;
    jump_y *= ys[i].stride;
    jump_x *= xs[i].stride;
  }
  fm.scale_y = jump_y;
  fm.scale_x = jump_x;

  auto mask_of = [](const std::vector<AxisStage>& axis, int origin, int extent) {
    std::vector<bool> mask(static_cast<std::size_t>(extent), false);
    for (int q : trace_axis(axis, {}, 0)) mask[static_cast<std::size_t>(q - origin)] = true;
    return mask;
  };
  fm.mask_y = mask_of(ys, fm.origin_y, fm.extent_y);
  fm.mask_x = mask_of(xs, fm.origin_x, fm.extent_x);

  for (int p = 0; p < fm.upper.h; ++p) fm.rows.push_back(trace_axis(ys, grid_y, p));
  for (int p = 0; p < fm.upper.w; ++p) fm.cols.push_back(trace_axis(xs, grid_x, p));
  return fm;
}

Window window(const FieldMap& fm, Position p) {
  if (p.y < 0 || p.y >= fm.upper.h || p.x < 0 || p.x >= fm.upper.w) {
    fail(Errc::out_of_range, "position (" + std::to_string(p.y) + "," + std::to_string(p.x) +
                                 ") outside the upper grid");
  }
  const auto& rows = fm.rows[static_cast<std::size_t>(p.y)];
  const auto& cols = fm.cols[static_cast<std::size_t>(p.x)];
  Window w;
  w.cells.reserve(rows.size() * cols.size());
  const int base_y = p.y * fm.scale_y + fm.origin_y;
  const int base_x = p.x * fm.scale_x + fm.origin_x;
  for (int qy : rows) {
    for (int qx : cols) w.cells.push_back({{qy, qx}, qy - base_y, qx - base_x});
  }
  w.clipped = fm.offset_count() - w.cells.size();
  return w;
}

}  // namespace atlas
