#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace sasan {

/// Row-major 2D grid of values.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  T& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  const T& at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return values.size(); }
  bool empty() const { return values.empty(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using ImageGrid = Grid<float>;
using LabelGrid = Grid<std::uint8_t>;

}  // namespace sasan
