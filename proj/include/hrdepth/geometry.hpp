#pragma once

#include <array>
#include <string>
#include <vector>

#include "hrdepth/tensor.hpp"

namespace hrdepth {

/// Pinhole camera in pixel units for one image resolution.
struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;
  /// Same camera at another resolution (pixel-centre consistent).
  CameraIntrinsics resized(int new_width, int new_height) const;
  /// Principal point at the image centre, focal lengths given in pixels.
  static CameraIntrinsics centered(double fx, double fy, int width, int height);
};

struct DepthRange {
  double min_depth = 0.1;
  double max_depth = 100.0;
  void validate() const;
};

/// Translation then Euler angles (radians), rotation R = Rz * Ry * Rx.
struct PoseVec {
  std::array<double, 3> t{0, 0, 0};
  std::array<double, 3> euler{0, 0, 0};
};

/// Row-major rigid transform.
using Mat4 = std::array<double, 16>;
Mat4 identity4();
Mat4 matmul4(const Mat4& a, const Mat4& b);

Mat4 pose_to_matrix(const PoseVec& p, bool invert = false);
/// Inverse of pose_to_matrix for rotations with |pitch| < pi/2.
PoseVec matrix_to_pose(const Mat4& m);
/// Rigid-transform inverse.
Mat4 invert_rigid(const Mat4& m);
/// Pure horizontal translation (R = I, t = (tx, 0, 0)).
Mat4 stereo_transform(double tx);
/// PoseVec from a (N, 6, 1, 1) tensor row.
PoseVec pose_from_tensor(const Tensor& pose, int batch_index);
Tensor pose_to_tensor(const std::vector<PoseVec>& poses);

/// depth = 1 / (a * disp + b), a = 1/min - 1/max, b = 1/max. Differentiable.
Tensor disp_to_depth(const Tensor& disp, const DepthRange& range = {});
/// Inverse mapping, for building reference disparities from depth.
Tensor depth_to_disp(const Tensor& depth, const DepthRange& range = {});

std::array<double, 3> backproject(double x, double y, double depth, const CameraIntrinsics& K);
std::array<double, 3> transform_point(const Mat4& T, const std::array<double, 3>& p);
std::array<double, 2> project(const std::array<double, 3>& p, const CameraIntrinsics& K);

struct WarpResult {
  /// (N, 2, H, W) normalised sampling locations, channel 0 horizontal.
  Tensor grid;
  /// 1 where the point lands in front of the camera and inside the source frame.
  std::vector<unsigned char> valid;
  double valid_fraction() const;
};

/// Back-projects every target pixel with `depth` (N, 1, H, W), moves it by the
/// transform predicted in `pose` (N, 6, 1, 1; optionally inverted) and
/// re-projects it. Differentiable w.r.t. depth and pose. Points with
/// z <= 1e-6 after the transform get grid (2, 2) and zero gradient.
WarpResult warp_grid(const Tensor& depth, const CameraIntrinsics& K, const Tensor& pose, bool invert = false);
/// Fixed transform per batch item (or one for all); differentiable w.r.t. depth only.
WarpResult warp_grid(const Tensor& depth, const CameraIntrinsics& K, const std::vector<Mat4>& transforms);

/// Border-clamped bilinear resampling of `source` at `grid`.
Tensor synthesize_view(const Tensor& source, const Tensor& grid);

/// Four-line text file: "fx fy cx cy", "width height", "min_depth max_depth", "baseline".
struct CameraFile {
  CameraIntrinsics K;
  DepthRange range;
  double baseline = 0.0;
};
CameraFile read_camera_file(const std::string& path);
void write_camera_file(const std::string& path, const CameraFile& cam);

}  // namespace hrdepth
