#pragma once

#include <string>
#include <vector>

#include "hrdepth/tensor.hpp"

namespace hrdepth {

struct DepthMetrics {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
  std::size_t count = 0;  ///< valid pixels evaluated

  bool operator==(const DepthMetrics&) const = default;
};

struct MetricOptions {
  bool median_scale = true;
  double cap = 80.0;
  double min_pred = 1e-3;
  /// Restrict to the customary KITTI crop (rows 40.8%..99.2%, cols 3.6%..96.4%).
  bool eigen_crop = false;
  /// Also drop pixels whose ground truth exceeds the cap.
  bool gt_within_cap = false;
};

/// Median of a non-empty sample (mean of the two middle values for even sizes).
double median(std::vector<double> v);

/// Pixels with gt > 0 (inside the crop when enabled). With median scaling,
/// pred is multiplied by median(gt) / median(pred) over those pixels, then
/// clamped to [min_pred, cap]. delta_k counts max(p/g, g/p) < 1.25^k strictly.
/// pred and gt: (N, 1, H, W) of equal shape.
DepthMetrics depth_metrics(const Tensor& pred, const Tensor& gt, const MetricOptions& opt = {});

/// Validity mask used by depth_metrics, one entry per element.
std::vector<char> valid_mask(const Tensor& gt, bool eigen_crop);

struct GradientBand {
  double lo = 0, hi = 0;  ///< band covers lo < |grad| <= hi (the lowest band includes lo)
  std::size_t count = 0;
  double hr_abs_rel = 0;  ///< original prediction
  double lr_abs_rel = 0;  ///< low-resolution map read at the nearest low-resolution pixel
  double up_abs_rel = 0;  ///< low-resolution map bilinearly upsampled

  bool operator==(const GradientBand&) const = default;
};

struct GradientBandReport {
  int downscale = 0;
  std::size_t valid = 0;
  std::vector<GradientBand> bands;  ///< ascending gradient magnitude
  /// Per-pixel data for visualisation: up-sampled abs rel and band index (-1 invalid).
  std::vector<double> up_error;
  std::vector<int> band_of;
  int width = 0, height = 0;

  /// Bands with at least one pixel.
  std::vector<const GradientBand*> populated() const;
};

/// |grad gt| by forward differences (zero on the last row / column and next to invalid pixels).
std::vector<double> gradient_magnitude(const Tensor& gt);

/// Splits valid pixels into `num_bands` bands at the quantiles of |grad gt|.
/// Equal quantiles collapse: a band may be empty, and ties stay in the lower band.
/// hr_depth and gt: (1, 1, H, W); downscale in {2, 4, 8}, dividing H and W.
GradientBandReport interp_gap_analysis(const Tensor& hr_depth, const Tensor& gt, int downscale, int num_bands = 4);

// ---------------------------------------------------------------- reports

struct MetricsRow {
  std::string method;
  int width = 0, height = 0;
  DepthMetrics metrics;

  bool operator==(const MetricsRow&) const = default;
};

/// Aligned, human-readable table with a header row.
std::string metrics_table(const std::vector<MetricsRow>& rows);
/// One "key=value ..." line per row, full precision.
std::string metrics_key_values(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics_key_values(const std::string& text);

std::string band_table(const GradientBandReport& r);
std::string band_key_values(const GradientBandReport& r);
/// Restores downscale, valid and the band rows (not the per-pixel arrays).
GradientBandReport parse_band_key_values(const std::string& text);

/// RGB visualisation: red = up-sampled abs rel (scaled to the maximum), green = band index.
Tensor band_image(const GradientBandReport& r);

}  // namespace hrdepth
