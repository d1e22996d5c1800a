#pragma once

#include <span>
#include <vector>

#include "hrdepth/tensor.hpp"

// Differentiable primitives. Every op records its backward on the tape shared
// by its inputs (if any) and is otherwise a pure function of its arguments.
// Shapes must match exactly; the only broadcasting is per-channel
// (1, C, 1, 1) parameters and per-sample (N, C, 1, 1) gates.

namespace hrdepth {

enum class PadMode { kZero, kReflect };

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  PadMode pad_mode = PadMode::kZero;
  /// 1, or equal to the input channel count (depthwise).
  int groups = 1;
};

/// weight: (out, in / groups, k, k); bias: (1, out, 1, 1) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt);

/// Output spatial extent of a convolution or pooling window.
int conv_out_size(int in, int kernel, int stride, int padding);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);

// Activations.
Tensor relu(const Tensor& x);
Tensor elu(const Tensor& x, double alpha = 1.0);
Tensor sigmoid(const Tensor& x);
Tensor hardswish(const Tensor& x);

/// Elementwise minimum across same-shaped tensors; ties route the gradient
/// to the earliest argument.
Tensor minimum(std::span<const Tensor> xs);

// Reductions.
Tensor sum(const Tensor& x);   ///< (1,1,1,1)
Tensor mean(const Tensor& x);  ///< (1,1,1,1)
/// Mean of `x` over elements where `mask` is nonzero; mask is a constant.
Tensor masked_mean(const Tensor& x, const Tensor& mask);
/// Mean over channels: (N, C, H, W) -> (N, 1, H, W).
Tensor channel_mean(const Tensor& x);
/// (N, C, H, W) -> (N, C, 1, 1).
Tensor global_avg_pool(const Tensor& x);

// Channel plumbing.
Tensor concat_channels(std::span<const Tensor> xs);
inline Tensor concat_channels(std::initializer_list<Tensor> xs) {
  return concat_channels(std::span<const Tensor>(xs.begin(), xs.size()));
}
Tensor slice_channels(const Tensor& x, int begin, int count);
/// x * gate with gate shaped (N, C, 1, 1).
Tensor scale_channels(const Tensor& x, const Tensor& gate);

/// x: (N, in, 1, 1); weight: (out, in, 1, 1); bias: (1, out, 1, 1) or undefined.
Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  ///< unbiased
};

/// Training mode normalizes with batch statistics (reported through `stats`);
/// inference mode uses the running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                  const Tensor& running_var, bool training, double eps = 1e-5, BatchStats* stats = nullptr);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding);

/// Half-pixel-centre bilinear resize (align_corners = false).
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
inline Tensor upsample2x(const Tensor& x) { return bilinear_resize(x, 2 * x.shape().h, 2 * x.shape().w); }

/// Samples `x` at normalised (u, v) locations, grid: (N, 2, Ho, Wo) with
/// u = grid channel 0 (horizontal). Pixel centres sit at u = (2i + 1) / W - 1.
/// With border_clamp, out-of-range coordinates clamp to the image edge;
/// otherwise they read zeros. Coordinates within 1e-9 px of a pixel centre
/// read that pixel exactly.
Tensor grid_sample_bilinear(const Tensor& x, const Tensor& grid, bool border_clamp = true);

/// Normalised coordinate of pixel centre `i` along an axis of length `size`.
inline double pixel_to_normalized(double i, int size) { return (2.0 * i + 1.0) / size - 1.0; }
inline double normalized_to_pixel(double u, int size) { return ((u + 1.0) * size - 1.0) / 2.0; }

}  // namespace hrdepth
