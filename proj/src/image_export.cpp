#include "sasan/image_export.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sasan/error.hpp"

namespace sasan::runner {

void write_pgm(const std::filesystem::path& path, const ImageGrid& image, double lo, double hi) {
  if (!(hi > lo)) throw ContractError("write_pgm: empty intensity range");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  for (float v : image.values) {
    const double t = std::clamp((static_cast<double>(v) - lo) / (hi - lo), 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
}

ImageGrid attention_grid(const torch::Tensor& image, const torch::Tensor& maps, int columns, int gap) {
  if (image.dim() != 2 || maps.dim() != 3 || maps.size(1) != image.size(0) || maps.size(2) != image.size(1)) {
    throw ContractError("attention_grid: expected image [H,W] and maps [N,H,W]");
  }
  const int h = static_cast<int>(image.size(0)), w = static_cast<int>(image.size(1));
  const int tiles = static_cast<int>(maps.size(0)) + 1;
  columns = std::max(1, std::min(columns, tiles));
  const int rows = (tiles + columns - 1) / columns;
  // Canvas in [0,1]; borders white.
  ImageGrid canvas(rows * h + (rows + 1) * gap, columns * w + (columns + 1) * gap, 1.0f);

  auto place = [&](int tile, const torch::Tensor& values) {
    const auto v = values.to(torch::kFloat32).contiguous();
    const auto* p = v.data_ptr<float>();
    const int r0 = gap + (tile / columns) * (h + gap), c0 = gap + (tile % columns) * (w + gap);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) canvas.at(r0 + r, c0 + c) = p[r * w + c];
    }
  };
  place(0, (image.detach() + 1.0) / 2.0);
  for (int k = 0; k + 1 < tiles; ++k) {
    const auto m = maps[k].detach();
    place(k + 1, m / m.max().clamp_min(1e-12));
  }
  return canvas;
}

}  // namespace sasan::runner
