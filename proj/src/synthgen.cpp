#include "sasan/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sasan/error.hpp"

namespace sasan::synthgen {

void LayoutSpec::validate() const {
  if (image_size < 16 || image_size % 4 != 0) {
    throw ConfigError("layout: image_size must be >= 16 and divisible by 4, got " +
                      std::to_string(image_size));
  }
  if (num_classes < 2 || num_classes > 255) {
    throw ConfigError("layout: num_classes must be in [2, 255] (background included), got " +
                      std::to_string(num_classes));
  }
  if (min_shapes_per_class < 1 || max_shapes_per_class < min_shapes_per_class) {
    throw ConfigError("layout: shapes_per_class range must satisfy 1 <= min <= max");
  }
  if (num_train < 0 || num_test < 0) {
    throw ConfigError("layout: split sizes must be non-negative");
  }
}

std::string to_string(Contrast c) {
  switch (c) {
    case Contrast::identity: return "identity";
    case Contrast::invert: return "invert";
    case Contrast::gamma: return "gamma";
  }
  return "identity";
}

Contrast contrast_from_string(const std::string& name) {
  if (name == "identity") return Contrast::identity;
  if (name == "invert") return Contrast::invert;
  if (name == "gamma") return Contrast::gamma;
  throw ConfigError("unknown contrast transform '" + name + "'");
}

double ModalityProfile::transformed(int cls) const {
  const double v = base_intensity.at(static_cast<std::size_t>(cls));
  switch (contrast) {
    case Contrast::identity: return v;
    case Contrast::invert: return 1.0 - v;
    case Contrast::gamma: return std::sqrt(v);
  }
  return v;
}

void ModalityProfile::validate(int num_classes) const {
  if (static_cast<int>(base_intensity.size()) != num_classes) {
    throw ConfigError("profile: expected " + std::to_string(num_classes) + " base intensities, got " +
                      std::to_string(base_intensity.size()));
  }
  for (double v : base_intensity) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("profile: base intensities must lie in [0,1]");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("profile: noise_sigma must be >= 0");
  if (!(bias_field_strength >= 0.0)) throw ConfigError("profile: bias_field_strength must be >= 0");
}

namespace {

std::vector<double> spread_intensities(int num_classes) {
  std::vector<double> base(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    base[static_cast<std::size_t>(c)] = 0.1 + 0.8 * c / (num_classes - 1);
  }
  return base;
}

constexpr double kMinGap = 0.1;

}  // namespace

ModalityProfile default_profile_a(int num_classes) {
  return {spread_intensities(num_classes), Contrast::identity, 0.03, 0.05};
}

ModalityProfile default_profile_b(int num_classes) {
  return {spread_intensities(num_classes), Contrast::invert, 0.04, 0.05};
}

void validate_profile_pair(const ModalityProfile& a, const ModalityProfile& b, int num_classes) {
  a.validate(num_classes);
  b.validate(num_classes);
  for (const auto* p : {&a, &b}) {
    for (int i = 0; i < num_classes; ++i) {
      for (int j = i + 1; j < num_classes; ++j) {
        if (std::abs(p->transformed(i) - p->transformed(j)) < kMinGap - 1e-12) {
          throw ConfigError("profile: classes " + std::to_string(i) + " and " + std::to_string(j) +
                            " are closer than 0.1 in intensity");
        }
      }
    }
  }
  bool differs = false;
  for (int c = 0; c < num_classes; ++c) {
    differs = differs || std::abs(a.transformed(c) - b.transformed(c)) >= kMinGap - 1e-12;
  }
  if (!differs) throw ConfigError("profile pair: modalities render every class alike");
}

LabelGrid random_layout(const LayoutSpec& spec, Rng& rng) {
  const int s = spec.image_size;
  const int min_area = std::max(4, s * s / 100);
  for (int attempt = 0;; ++attempt) {
    LabelGrid grid(s, s, 0);
    for (int cls = 1; cls < spec.num_classes; ++cls) {
      const int span = spec.max_shapes_per_class - spec.min_shapes_per_class + 1;
      const int count = spec.min_shapes_per_class + static_cast<int>(rng() % static_cast<std::uint64_t>(span));
      for (int k = 0; k < count; ++k) {
        const double cy = uniform(rng, 0.25 * s, 0.75 * s);
        const double cx = uniform(rng, 0.25 * s, 0.75 * s);
        const double ry = uniform(rng, 0.08 * s, 0.18 * s);
        const double rx = uniform(rng, 0.08 * s, 0.18 * s);
        const double theta = uniform(rng, 0.0, std::numbers::pi);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int r = 0; r < s; ++r) {
          for (int c = 0; c < s; ++c) {
            const double dy = r - cy, dx = c - cx;
            const double u = (ct * dx + st * dy) / rx;
            const double v = (-st * dx + ct * dy) / ry;
            if (u * u + v * v <= 1.0) grid.at(r, c) = static_cast<std::uint8_t>(cls);
          }
        }
      }
    }
    std::vector<int> area(static_cast<std::size_t>(spec.num_classes), 0);
    for (auto v : grid.values) ++area[v];
    const bool ok = std::all_of(area.begin() + 1, area.end(), [&](int a) { return a >= min_area; });
    // Very many classes on a small canvas may never satisfy the area floor.
    if (ok || attempt >= 200) return grid;
  }
}

ImageGrid modality_render(const LabelGrid& layout, const ModalityProfile& profile, Rng& rng) {
  const int h = layout.height, w = layout.width;
  // Low-frequency field: product of two slow cosines with random phase and frequency.
  const double fy = uniform(rng, 0.5, 1.0), fx = uniform(rng, 0.5, 1.0);
  const double py = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double px = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  std::vector<double> lut(profile.base_intensity.size());
  for (std::size_t c = 0; c < lut.size(); ++c) lut[c] = profile.transformed(static_cast<int>(c));

  ImageGrid out(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double v = lut.at(layout.at(r, c));
      if (profile.bias_field_strength > 0.0) {
        v += profile.bias_field_strength * std::cos(2.0 * std::numbers::pi * fy * r / h + py) *
             std::cos(2.0 * std::numbers::pi * fx * c / w + px);
      }
      if (profile.noise_sigma > 0.0) v += profile.noise_sigma * gaussian(rng);
      out.at(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

double percentile(std::vector<float> values, double pct) {
  if (values.empty()) throw ContractError("percentile of an empty sample");
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto k = static_cast<std::size_t>(std::floor(pos));
  const double t = pos - static_cast<double>(k);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  const double lower = values[k];
  if (k + 1 >= values.size() || t == 0.0) return lower;
  const double upper = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(k) + 1, values.end());
  return lower + t * (upper - lower);
}

Preprocessed preprocess(const ImageGrid& raw, double lo_pct, double hi_pct) {
  if (raw.empty()) throw ContractError("preprocess: empty image");
  if (!(lo_pct < hi_pct) || lo_pct < 0.0 || hi_pct > 100.0) {
    throw ContractError("preprocess: percentiles must satisfy 0 <= lo < hi <= 100");
  }
  const double lo = percentile(raw.values, lo_pct);
  const double hi = percentile(raw.values, hi_pct);
  Preprocessed out{ImageGrid(raw.height, raw.width, 0.0f), false};
  if (!(hi - lo > 0.0)) {
    out.degenerate = true;
    return out;
  }
  const double scale = 2.0 / (hi - lo);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = std::clamp(static_cast<double>(raw.values[i]), lo, hi);
    out.image.values[i] = static_cast<float>(std::clamp((v - lo) * scale - 1.0, -1.0, 1.0));
  }
  return out;
}

DatasetBundle gen_dataset(const LayoutSpec& spec, const ModalityProfile& profile_a,
                          const ModalityProfile& profile_b) {
  spec.validate();
  validate_profile_pair(profile_a, profile_b, spec.num_classes);

  DatasetBundle bundle{spec, profile_a, profile_b, {}, {}, {}, {}, {}};
  const int total = spec.num_train + spec.num_test;
  bundle.images_a.reserve(static_cast<std::size_t>(total));
  bundle.images_b.reserve(static_cast<std::size_t>(total));
  bundle.labels.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    Rng layout_rng = make_rng(spec.rng_seed, {idx, 0});
    Rng a_rng = make_rng(spec.rng_seed, {idx, 1});
    Rng b_rng = make_rng(spec.rng_seed, {idx, 2});
    LabelGrid layout = random_layout(spec, layout_rng);
    bundle.images_a.push_back(preprocess(modality_render(layout, profile_a, a_rng)).image);
    bundle.images_b.push_back(preprocess(modality_render(layout, profile_b, b_rng)).image);
    bundle.labels.push_back(std::move(layout));
    (i < spec.num_train ? bundle.train : bundle.test).push_back(i);
  }
  return bundle;
}

AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  p.angle_deg = uniform(rng, -25.0, 25.0);
  p.scale_x = uniform(rng, 0.75, 1.0);
  p.scale_y = uniform(rng, 0.75, 1.0);
  p.flip_h = coin(rng);
  p.flip_v = coin(rng);
  return p;
}

std::pair<ImageGrid, LabelGrid> augment_with(const ImageGrid& image, const LabelGrid& labels,
                                             const AugmentParams& params) {
  if (image.height != labels.height || image.width != labels.width) {
    throw ContractError("augment: image and labels are not aligned");
  }
  const int h = image.height, w = image.width;
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);

  ImageGrid out_img(h, w, -1.0f);
  LabelGrid out_lbl(h, w, 0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double dy = r - cy, dx = c - cx;
      double ux = (ct * dx + st * dy) / params.scale_x;
      double uy = (-st * dx + ct * dy) / params.scale_y;
      if (params.flip_h) ux = -ux;
      if (params.flip_v) uy = -uy;
      const double sy = cy + uy, sx = cx + ux;
      if (sy < -0.5 || sy >= h - 0.5 || sx < -0.5 || sx >= w - 0.5) continue;

      const int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, h - 1);
      const int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, w - 1);
      out_lbl.at(r, c) = labels.at(ny, nx);

      const double fy = std::clamp(sy, 0.0, h - 1.0), fx = std::clamp(sx, 0.0, w - 1.0);
      const int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double ty = fy - y0, tx = fx - x0;
      const double top = image.at(y0, x0) * (1.0 - tx) + image.at(y0, x1) * tx;
      const double bot = image.at(y1, x0) * (1.0 - tx) + image.at(y1, x1) * tx;
      out_img.at(r, c) = static_cast<float>(top * (1.0 - ty) + bot * ty);
    }
  }
  return {std::move(out_img), std::move(out_lbl)};
}

std::pair<ImageGrid, LabelGrid> augment(const ImageGrid& image, const LabelGrid& labels, Rng& rng) {
  return augment_with(image, labels, draw_augment(rng));
}

}  // namespace sasan::synthgen
