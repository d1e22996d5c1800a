#pragma once

#include <string>
#include <vector>

#include "hrdepth/geometry.hpp"
#include "hrdepth/ops.hpp"

namespace hrdepth {

struct LossConfig {
  double alpha = 0.85;
  double lambda_smooth = 1e-3;
  int num_scales = 4;
  bool automask = false;
  int ssim_window = 3;
  double ssim_c1 = 1e-4;
  double ssim_c2 = 9e-4;

  void validate() const;
};

/// Per-pixel, per-channel SSIM with box-window statistics (reflect padding).
Tensor ssim(const Tensor& a, const Tensor& b, const LossConfig& cfg = {});

/// (alpha / 2)(1 - SSIM) + (1 - alpha)|a - b|, averaged over channels: (N, 1, H, W).
Tensor photometric_error(const Tensor& target, const Tensor& warped, const LossConfig& cfg = {});
/// The same blend for already reduced terms.
double photometric_blend(double ssim_value, double l1_value, double alpha);

/// Pixelwise minimum over per-source error maps.
Tensor min_reprojection(std::span<const Tensor> errors);

struct Reprojection {
  Tensor loss;      ///< scalar mean over kept pixels
  Tensor per_pixel; ///< minimum over sources
  Tensor mask;      ///< 1 where a pixel contributes
};
/// Minimum over `errors`, then the mean. With automask, pixels whose minimum
/// identity error (target vs. unwarped source) is below the warped minimum
/// are dropped from the mean.
Reprojection reprojection_loss(std::span<const Tensor> errors, std::span<const Tensor> identity_errors, bool automask);

/// Edge-aware smoothness on mean-normalised disparity:
/// mean(|dx d*| exp(-|dx I|)) + mean(|dy d*| exp(-|dy I|)), forward differences,
/// image gradients averaged over channels. disp (N,1,H,W), image (N,C,H,W).
Tensor smoothness(const Tensor& disp, const Tensor& image);

/// Target frame, source frames and the target->source pose for each source.
struct ViewBatch {
  Tensor target;
  std::vector<Tensor> sources;
  std::vector<Tensor> poses;  ///< (N, 6, 1, 1) each; may be tape-bound
  CameraIntrinsics K;
};

struct LossBreakdown {
  Tensor total;
  std::vector<double> reprojection;  ///< per scale
  std::vector<double> smooth;        ///< per scale, before lambda
  double final_value() const { return total.item(); }
};

/// L_final = (1/s) sum_i (L_re^i + lambda L_smooth^i); each scale's disparity
/// is upsampled to full resolution for the reprojection term, while the
/// smoothness term uses the native-resolution disparity and a resized image.
LossBreakdown total_loss(std::span<const Tensor> disparities, const ViewBatch& batch, const LossConfig& cfg,
                         const DepthRange& range = {});

enum class DistillNorm { kL1, kL2 };

struct DistillConfig {
  DistillNorm norm = DistillNorm::kL1;
  /// Empty means equal weights.
  std::vector<double> scale_weights;
};

/// Weighted mean over scales of mean |d_T - d_S| (or squared). Teacher maps
/// are detached and resized to the student's resolution when they differ.
Tensor distill_loss(std::span<const Tensor> teacher, std::span<const Tensor> student, const DistillConfig& cfg = {});

}  // namespace hrdepth
