#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hrdepth/geometry.hpp"
#include "hrdepth/tensor.hpp"

namespace hrdepth {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Target frame and its neighbours. Images are (1, 3, H, W) in [0, 1].
struct Sample {
  std::string id;
  Tensor target;
  std::vector<Tensor> sources;
  /// Target-to-source transform per source when known (synthetic frames, stereo pair).
  std::vector<std::optional<Mat4>> source_poses;
  CameraIntrinsics K;
  /// (1, 1, H, W) metric depth of the target; undefined for real data.
  Tensor depth;

  void validate() const;
};

/// Fronto-parallel textured rectangle at world depth `depth`, spanning
/// [x0, x1] x [y0, y1] in world units.
struct Plane {
  double depth = 10.0;
  double x0 = -1e3, x1 = 1e3, y0 = -1e3, y1 = 1e3;
  std::uint64_t texture_seed = 1;
  /// Texture lattice spacing in world units; 0 picks about 3 pixels at the plane's depth.
  double texture_cell = 0.0;
};

/// Plain-text key-value scene description:
///   width = 320          height = 96
///   fx = 185.6           fy = 184.32      (0 or absent: 0.58 W and 1.92 H)
///   noise = 0.0          min_depth = 0.1  max_depth = 100
///   plane = depth x0 x1 y0 y1 seed [cell]   (repeatable)
///   frame = tx ty tz rx ry rz               (repeatable; camera-to-world)
struct SceneSpec {
  int width = 320, height = 96;
  double fx = 0.0, fy = 0.0;
  double noise = 0.0;
  DepthRange range;
  std::vector<Plane> planes;
  std::vector<PoseVec> trajectory;

  CameraIntrinsics camera() const;
  void validate() const;
  std::string to_text() const;
};

SceneSpec parse_scene_spec(const std::string& text);
SceneSpec load_scene_spec(const std::string& path);

/// A near plane over the left part of the view in front of a far backdrop,
/// camera translating sideways. Used for toy training and the band analysis.
SceneSpec two_plane_scene(int width, int height, int frames, double near_depth = 5.0, double far_depth = 50.0);

struct RenderedFrame {
  Tensor image;  ///< (1, 3, H, W)
  Tensor depth;  ///< (1, 1, H, W)
};
/// Ray-casts frame `index` of the trajectory; nearest plane wins.
RenderedFrame render_frame(const SceneSpec& spec, int index, std::uint64_t seed);

/// One sample per interior frame k (target k, sources k-1 and k+1) with true
/// depth and poses. Deterministic in (spec, seed).
std::vector<Sample> gen_synthetic_sequence(const SceneSpec& spec, std::uint64_t seed);

/// KITTI raw layout: <root>/<folder>/image_0{2,3}/data/<frame:010d>.png.
struct KittiConfig {
  int width = 640, height = 192;
  /// Focal lengths as fractions of image width / height (dataset average).
  double fx_norm = 0.58, fy_norm = 1.92;
  bool stereo = false;
  double baseline = 0.54;
  std::string extension = ".png";
};

/// "folder frame [l|r]".
struct SplitEntry {
  std::string folder;
  int frame = 0;
  char side = 'l';
};
SplitEntry parse_split_line(const std::string& line);
std::vector<SplitEntry> read_split_file(const std::string& path);

using WarningSink = std::function<void(const std::string&)>;

/// Target plus frames t-1 and t+1 (and the other camera when stereo).
/// Returns nullopt, reporting through `warn`, when a neighbour is missing.
std::optional<Sample> load_kitti_sample(const std::string& root, const SplitEntry& entry, const KittiConfig& cfg,
                                        const WarningSink& warn = {});

/// Epoch-wise seeded shuffle; the last partial batch is dropped.
class Batcher {
 public:
  Batcher(std::size_t num_samples, int batch_size, std::uint64_t shuffle_seed);

  std::size_t batches_per_epoch() const { return num_samples_ / static_cast<std::size_t>(batch_size_); }
  /// Indices of every batch of `epoch`.
  std::vector<std::vector<std::size_t>> epoch(std::uint64_t epoch) const;
  /// Sequential iteration over epochs; returns the indices of the next batch.
  std::vector<std::size_t> next();
  std::uint64_t current_epoch() const { return epoch_; }

 private:
  std::size_t num_samples_;
  int batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::vector<std::size_t>> current_;
};

/// Batch tensors (N, ...) stacked from samples with identical shapes and camera.
struct Batch {
  Tensor target;
  std::vector<Tensor> sources;
  std::vector<std::optional<std::vector<Mat4>>> source_poses;
  CameraIntrinsics K;
  Tensor depth;  ///< undefined unless every sample has depth
};
Batch collate(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

/// Concatenates constant (1, C, H, W) tensors along the batch axis.
Tensor stack(const std::vector<Tensor>& items);

}  // namespace hrdepth
