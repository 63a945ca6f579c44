#pragma once

// Evaluation metrics: overlap and surface distance on binary masks, image
// fidelity, attention orthogonality and Welch's unequal-variance t-test.

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sasan/grid.hpp"

namespace sasan::metricore {

/// 2D (H x W) or 3D (D x H x W) boolean grid with unit isotropic spacing.
struct BinaryMask {
  std::vector<int> dims;
  std::vector<std::uint8_t> cells;

  BinaryMask() = default;
  explicit BinaryMask(std::vector<int> dims_);
  static BinaryMask from_labels(const LabelGrid& labels, int cls);

  int rank() const { return static_cast<int>(dims.size()); }
  std::size_t size() const { return cells.size(); }
  std::size_t count() const;
  bool empty_set() const { return count() == 0; }
  /// Cell value at (z, y, x); z must be 0 for 2D masks.
  bool at(int z, int y, int x) const;
  void set(int z, int y, int x, bool v);
  int depth() const { return rank() == 3 ? dims[0] : 1; }
  int height() const { return dims[static_cast<std::size_t>(rank() - 2)]; }
  int width() const { return dims[static_cast<std::size_t>(rank() - 1)]; }
};

using Cell = std::array<int, 3>;  // (z, y, x); z = 0 in 2D

constexpr double kAssdCap = 50.0;

/// 2|P & G| / (|P| + |G|); both empty -> 1, exactly one empty -> 0.
double dice_score(const BinaryMask& pred, const BinaryMask& gt);

/// Mask cells with a face neighbour outside the mask (grid border counts as outside).
std::vector<Cell> boundary_extract(const BinaryMask& mask);

/// Exact squared Euclidean distance from every cell to the nearest seed cell
/// (separable lower-envelope transform). Infinite when there are no seeds.
std::vector<double> squared_distance_transform(const BinaryMask& seeds);

/// Average of the two directed mean boundary distances; returns `cap` when
/// either mask is empty and never exceeds it.
double assd(const BinaryMask& pred, const BinaryMask& gt, double cap = kAssdCap);

struct FidelityRecord {
  double ssim = 0.0;
  double psnr = 0.0;  // +inf when the images are identical
  double mae = 0.0;
  double rmse = 0.0;
  double pcc = 0.0;   // NaN when either image is constant
};

/// Inputs in [-1,1] of identical shape; PSNR and SSIM are computed after
/// remapping to [0,1] with dynamic range 1.
FidelityRecord image_fidelity(const torch::Tensor& a, const torch::Tensor& b);

/// Mean absolute off-diagonal entry of the Gram matrix of L2-normalized
/// flattened maps. Accepts [N,H,W] or [B,N,H,W] (batch averaged).
double orthogonality_score(const torch::Tensor& maps);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
};

WelchResult welch_t_test(const std::vector<double>& sample_a, const std::vector<double>& sample_b);

struct Summary {
  double mean = 0.0;
  std::optional<double> std;  // sample standard deviation, absent when n < 2
  std::size_t n = 0;
};

Summary summarize(const std::vector<double>& values);

/// Per-sample segmentation and fidelity scores with their aggregates.
struct MetricsReport {
  std::vector<int> classes;            // evaluated (foreground) class ids
  std::vector<std::string> sample_ids;
  std::vector<std::vector<double>> dice;  // [class][sample]
  std::vector<std::vector<double>> assd;  // [class][sample]
  std::vector<FidelityRecord> fidelity;   // optional, per sample

  Summary dice_summary(std::size_t class_index) const;
  Summary assd_summary(std::size_t class_index) const;
  /// Per-sample class averages, summarized.
  Summary mean_dice() const;
  Summary mean_assd() const;
  std::vector<double> per_sample_mean_dice() const;

  nlohmann::ordered_json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  /// One row per class plus a Mean row.
  std::string to_csv() const;
};

/// Scores predicted label maps against ground truth for classes 1..num_classes-1.
MetricsReport evaluate_segmentation(const std::vector<LabelGrid>& predictions, const std::vector<LabelGrid>& truth,
                                    int num_classes, std::vector<std::string> sample_ids = {});

}  // namespace sasan::metricore
