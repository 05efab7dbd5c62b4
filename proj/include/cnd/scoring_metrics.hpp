#pragma once

// Pixel anomaly maps from promoted feature pairs, image scores, and the
// evaluation metrics (AUROC, average precision, AUPRO).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cnd/autograd.hpp"
#include "cnd/fnp.hpp"
#include "cnd/image.hpp"

namespace cnd {

class Model;

struct AnomalyResult {
  Mat pixel_map;  // out_h x out_w, values in [0, 6]
  double image_score = 0.0;
  /// Patch positions where either feature had zero norm (scored 0).
  int degenerate_patches = 0;
};

/// 1 - cos per patch row of two HW x C grids, reshaped to grid_h x grid_w.
Mat cosine_distance_grid(const Mat& encoded, const Mat& decoded, int grid_h, int grid_w, int* degenerate = nullptr);

/// Bilinear resize with corner-aligned sampling: output pixel (y, x) samples
/// the input at (y (h_in - 1) / (h_out - 1), x (w_in - 1) / (w_out - 1)).
Mat upsample_bilinear(const Mat& grid, int out_h, int out_w);

/// Separable Gaussian blur with a 4-sigma radius and replicated borders.
Mat gaussian_smooth(const Mat& map, double sigma);

/// Sum over the three layers of the upsampled 1 - cos maps; image score is
/// the map maximum.
AnomalyResult anomaly_map(std::span<const Mat, 3> encoded, std::span<const Mat, 3> decoded, int grid_h, int grid_w,
                          int out_h, int out_w);
AnomalyResult anomaly_map(std::span<const PromotedFeature, 3> encoded, std::span<const PromotedFeature, 3> decoded,
                          int out_h, int out_w);

/// Mann-Whitney AUROC, ties counted one half.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Step-wise sum of (R_k - R_{k-1}) P_k over distinct descending thresholds.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Connected-component labels of the nonzero mask pixels (0 is background,
/// regions are 1..count). `connectivity` is 4 or 8.
std::vector<int> label_regions(const Mask& mask, int connectivity, int* count);

/// Per-region overlap integrated over FPR in [0, fpr_limit] and divided by
/// fpr_limit. Regions are labeled per mask; FPR is over all normal pixels.
double aupro(std::span<const Mat> maps, std::span<const Mask> masks, double fpr_limit = 0.3, int connectivity = 8);

struct CategoryMetrics {
  std::string category;
  double i_auroc = 0.0;
  double p_auroc = 0.0;
  double aupro = 0.0;
  double i_map = 0.0;
  double p_map = 0.0;
};

struct MetricsReport {
  std::vector<CategoryMetrics> categories;  // sorted by name
  CategoryMetrics mean;                     // unweighted mean of the rows

  /// Columns category,i_auroc,p_auroc,aupro,i_map,p_map; rows then "mean".
  std::string to_csv() const;
};

/// One scored test image.
struct ScoredSample {
  std::string category;
  bool is_anomalous = false;
  AnomalyResult result;
  Mask mask;  // all zero for good images
};

struct MetricOptions {
  double fpr_limit = 0.3;
  int connectivity = 8;
};

MetricsReport compute_report(std::span<const ScoredSample> samples, const MetricOptions& options = {});

/// Eval-mode scoring of `images` at their own resolution.
std::vector<AnomalyResult> score_images(const Model& model, std::span<const ImageSample> images,
                                        double smoothing_sigma = 0.0);

/// Scores every test image and reports the five metrics per category.
MetricsReport evaluate(const Model& model, std::span<const ImageSample> test_set, const MetricOptions& options = {},
                       double smoothing_sigma = 0.0);

}  // namespace cnd
