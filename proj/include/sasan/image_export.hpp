#pragma once

// Static figure export: binary PGM grayscale images and attention-map grids.

#include <torch/torch.h>

#include <filesystem>

#include "sasan/grid.hpp"

namespace sasan::runner {

/// Writes `image` as 8-bit binary PGM, mapping [lo, hi] to [0, 255].
void write_pgm(const std::filesystem::path& path, const ImageGrid& image, double lo, double hi);

/// Tiles the input image ([H,W] in [-1,1]) beside its N attention maps ([N,H,W],
/// each scaled by its own maximum) in rows of `columns` tiles separated by a
/// `gap`-pixel border.
ImageGrid attention_grid(const torch::Tensor& image, const torch::Tensor& maps, int columns = 3, int gap = 2);

}  // namespace sasan::runner
