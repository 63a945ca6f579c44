#pragma once

// Synthetic two-modality dataset: random semantic layouts rendered under two
// acquisition profiles, plus percentile preprocessing and geometric augmentation.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sasan/grid.hpp"
#include "sasan/rng.hpp"

namespace sasan::synthgen {

struct LayoutSpec {
  int image_size = 64;
  int num_classes = 4;  // background + 3 foreground classes
  int min_shapes_per_class = 1;
  int max_shapes_per_class = 2;
  std::uint64_t rng_seed = 0;
  int num_train = 400;
  int num_test = 50;

  /// Throws ConfigError when the spec cannot produce a valid dataset.
  void validate() const;
};

enum class Contrast { identity, invert, gamma };

std::string to_string(Contrast c);
Contrast contrast_from_string(const std::string& name);

struct ModalityProfile {
  std::vector<double> base_intensity;  // one per class, in [0,1]
  Contrast contrast = Contrast::identity;
  double noise_sigma = 0.0;
  double bias_field_strength = 0.0;

  double transformed(int cls) const;
  void validate(int num_classes) const;
};

/// Default rendering of the source modality (dark background, bright structures).
ModalityProfile default_profile_a(int num_classes);
/// Default target modality: inverted contrast of the same class intensities.
ModalityProfile default_profile_b(int num_classes);

/// Checks that each profile separates its classes (pairwise gap >= 0.1) and the
/// two profiles differ by >= 0.1 on at least one class.
void validate_profile_pair(const ModalityProfile& a, const ModalityProfile& b, int num_classes);

struct DatasetBundle {
  LayoutSpec spec;
  ModalityProfile profile_a;
  ModalityProfile profile_b;
  std::vector<ImageGrid> images_a;
  std::vector<ImageGrid> images_b;
  std::vector<LabelGrid> labels;
  std::vector<int> train;
  std::vector<int> test;

  friend bool operator==(const DatasetBundle& x, const DatasetBundle& y) {
    return x.images_a == y.images_a && x.images_b == y.images_b && x.labels == y.labels &&
           x.train == y.train && x.test == y.test;
  }
};

/// Draws one random layout. Every foreground class keeps a minimum area.
LabelGrid random_layout(const LayoutSpec& spec, Rng& rng);

/// Raw rendering in [0,1]: contrast(base[class]) + bias field + noise, clamped.
ImageGrid modality_render(const LabelGrid& layout, const ModalityProfile& profile, Rng& rng);

struct Preprocessed {
  ImageGrid image;
  bool degenerate = false;
};

/// Linear-interpolation percentile of a non-empty sample (numpy "linear" rule).
double percentile(std::vector<float> values, double pct);

/// Clips to the [lo_pct, hi_pct] empirical percentiles and maps affinely to [-1,1].
Preprocessed preprocess(const ImageGrid& raw, double lo_pct = 2.0, double hi_pct = 98.0);

DatasetBundle gen_dataset(const LayoutSpec& spec, const ModalityProfile& profile_a,
                          const ModalityProfile& profile_b);

struct AugmentParams {
  double angle_deg = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;
  bool flip_h = false;
  bool flip_v = false;

  static AugmentParams identity() { return {}; }
};

/// Rotation in [-25, 25] degrees, independent axis scales in [0.75, 1], flips with p = 0.5.
AugmentParams draw_augment(Rng& rng);

/// Applies one geometric transform to both image (bilinear, fill -1) and labels
/// (nearest, fill background).
std::pair<ImageGrid, LabelGrid> augment_with(const ImageGrid& image, const LabelGrid& labels,
                                             const AugmentParams& params);

std::pair<ImageGrid, LabelGrid> augment(const ImageGrid& image, const LabelGrid& labels, Rng& rng);

}  // namespace sasan::synthgen
