#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "hrdepth/geometry.hpp"
#include "hrdepth/gradcheck.hpp"
#include "hrdepth/ops.hpp"

using namespace hrdepth;

namespace {
CameraIntrinsics small_camera(int w, int h) { return CameraIntrinsics::centered(0.58 * w, 1.92 * h, w, h); }

Tensor image_texture(int n, int h, int w, std::uint64_t seed) { return random_tensor(Shape{n, 3, h, w}, seed, 0.0, 1.0); }
}  // namespace

TEST_CASE("disp_to_depth limits and midpoint") {
  Tensor d(Shape{1, 1, 1, 3}, {1.0, 0.0, 0.5});
  Tensor z = disp_to_depth(d);
  CHECK(z.data()[0] == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(z.data()[1] == doctest::Approx(100.0).epsilon(1e-14));
  CHECK(z.data()[2] == doctest::Approx(1.0 / (9.99 * 0.5 + 0.01)).epsilon(1e-14));
  CHECK(z.data()[2] == doctest::Approx(0.19980).epsilon(1e-4));
}

TEST_CASE("disp_to_depth is strictly decreasing") {
  Tensor a = random_tensor(Shape{1, 1, 8, 8}, 1, 0.01, 0.98);
  std::vector<double> b = a.to_vector();
  for (double& v : b) v += 0.01;
  const auto za = disp_to_depth(a).to_vector(), zb = disp_to_depth(Tensor(a.shape(), b)).to_vector();
  for (std::size_t i = 0; i < za.size(); ++i) CHECK(za[i] > zb[i]);
  const auto back = depth_to_disp(disp_to_depth(a)).to_vector();
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == doctest::Approx(a.data()[i]).epsilon(1e-12));
}

TEST_CASE("pose_to_matrix identity, rotation and inverse") {
  CHECK(pose_to_matrix(PoseVec{}) == identity4());
  PoseVec rz;
  rz.euler = {0, 0, std::numbers::pi / 2};
  auto q = transform_point(pose_to_matrix(rz), {1, 0, 0});
  CHECK(std::abs(q[0]) <= 1e-15);
  CHECK(q[1] == doctest::Approx(1.0));
  CHECK(q[2] == 0.0);
  PoseVec p{{0.3, -0.2, 0.7}, {0.1, -0.4, 0.25}};
  Mat4 I = matmul4(pose_to_matrix(p, true), pose_to_matrix(p, false));
  Mat4 E = identity4();
  for (int i = 0; i < 16; ++i) CHECK(std::abs(I[i] - E[i]) <= 1e-12);
  // Orthonormal rotation block.
  Mat4 T = pose_to_matrix(p);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += T[k * 4 + i] * T[k * 4 + j];
      CHECK(std::abs(s - (i == j ? 1.0 : 0.0)) <= 1e-10);
    }
}

TEST_CASE("stereo transform is a pure horizontal translation") {
  Mat4 T = stereo_transform(-0.54);
  Mat4 E = identity4();
  E[3] = -0.54;
  CHECK(T == E);
}

TEST_CASE("identity warp reproduces the source exactly") {
  const int H = 12, W = 20;
  CameraIntrinsics K = small_camera(W, H);
  Tensor depth = random_tensor(Shape{2, 1, H, W}, 3, 0.5, 30.0);
  WarpResult w = warp_grid(depth, K, std::vector<Mat4>{identity4()});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      CHECK(w.grid.at(1, 0, i, j) == pixel_to_normalized(j, W));
      CHECK(w.grid.at(1, 1, i, j) == pixel_to_normalized(i, H));
    }
  Tensor src = image_texture(2, H, W, 4);
  CHECK(synthesize_view(src, w.grid).to_vector() == src.to_vector());
  WarpResult wp = warp_grid(depth, K, Tensor(Shape{2, 6, 1, 1}, 0.0));
  CHECK(wp.grid.to_vector() == w.grid.to_vector());
  CHECK(w.valid_fraction() == 1.0);
}

TEST_CASE("back-project / project round trip") {
  CameraIntrinsics K = small_camera(320, 96);
  for (double d : {0.1, 1.7, 55.0})
    for (double x : {0.0, 13.0, 319.0})
      for (double y : {0.0, 47.0, 95.0}) {
        auto uv = project(transform_point(identity4(), backproject(x, y, d, K)), K);
        CHECK(std::abs(uv[0] - x) <= 1e-12);
        CHECK(std::abs(uv[1] - y) <= 1e-12);
      }
}

TEST_CASE("horizontal translation shifts pixels by fx*tx/d") {
  const int H = 24, W = 64;
  CameraIntrinsics K = small_camera(W, H);
  const double d = 7.5, tx = 0.4;
  WarpResult w = warp_grid(Tensor(Shape{1, 1, H, W}, d), K, std::vector<Mat4>{stereo_transform(tx)});
  const double shift = K.fx * tx / d;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      CHECK(std::abs(normalized_to_pixel(w.grid.at(0, 0, i, j), W) - j - shift) <= 1e-9);
      CHECK(std::abs(normalized_to_pixel(w.grid.at(0, 1, i, j), H) - i) <= 1e-9);
    }
}

TEST_CASE("integer shift grid moves a texture exactly at interior pixels") {
  const int H = 10, W = 30;
  CameraIntrinsics K = small_camera(W, H);
  const double d = 2.0;
  const double tx = 3.0 * d / K.fx;  // three pixels
  Tensor src = image_texture(1, H, W, 5);
  WarpResult w = warp_grid(Tensor(Shape{1, 1, H, W}, d), K, std::vector<Mat4>{stereo_transform(tx)});
  Tensor out = synthesize_view(src, w.grid);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j + 3 < W; ++j) CHECK(out.at(0, c, i, j) == src.at(0, c, i, j + 3));
}

TEST_CASE("constant source stays constant under any grid") {
  Tensor src(Shape{1, 3, 8, 8}, 0.37);
  Tensor grid = random_tensor(Shape{1, 2, 8, 8}, 6, -1.5, 1.5);
  for (double v : synthesize_view(src, grid).to_vector()) CHECK(v == 0.37);
}

TEST_CASE("warp with T then inverse T recovers interior pixels") {
  const int H = 24, W = 48;
  CameraIntrinsics K = small_camera(W, H);
  const double d = 10.0;
  // Smooth source so two bilinear passes stay accurate.
  std::vector<double> v(3 * H * W);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) v[(c * H + i) * W + j] = 0.5 + 0.2 * c + 0.01 * i + 0.005 * j;
  Tensor src(Shape{1, 3, H, W}, v);
  Tensor depth(Shape{1, 1, H, W}, d);
  PoseVec p{{0.35, 0.0, 0.0}, {0, 0, 0}};
  Tensor once = synthesize_view(src, warp_grid(depth, K, std::vector<Mat4>{pose_to_matrix(p)}).grid);
  Tensor twice = synthesize_view(once, warp_grid(depth, K, std::vector<Mat4>{pose_to_matrix(p, true)}).grid);
  for (int c = 0; c < 3; ++c)
    for (int i = 2; i < H - 2; ++i)
      for (int j = 4; j < W - 4; ++j) CHECK(std::abs(twice.at(0, c, i, j) - src.at(0, c, i, j)) <= 1e-6);
}

TEST_CASE("points behind the camera are flagged and clamped") {
  const int H = 4, W = 6;
  CameraIntrinsics K = small_camera(W, H);
  Mat4 T = identity4();
  T[11] = -5.0;  // z -> z - 5
  WarpResult w = warp_grid(Tensor(Shape{1, 1, H, W}, 2.0), K, std::vector<Mat4>{T});
  CHECK(w.valid_fraction() == 0.0);
  for (double v : w.grid.to_vector()) CHECK(v == 2.0);
  CHECK_THROWS_AS(warp_grid(Tensor(Shape{1, 1, H, W}, 0.0), K, std::vector<Mat4>{T}), ContractViolation);
}

TEST_CASE("view-synthesis chain passes gradient checks") {
  const int H = 6, W = 8;
  CameraIntrinsics K = small_camera(W, H);
  const DepthRange range{0.1, 100.0};
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Tensor disp = random_tensor(Shape{2, 1, H, W}, seed, 0.02, 0.2);
    Tensor src = random_tensor(Shape{2, 3, H, W}, seed + 10, 0.0, 1.0);
    Tensor pose = random_tensor(Shape{2, 6, 1, 1}, seed + 20, -0.05, 0.05);
    for (bool invert : {false, true}) {
      auto fn = [&, invert](std::span<const Tensor> in) {
        return synthesize_view(in[1], warp_grid(disp_to_depth(in[0], range), K, in[2], invert).grid);
      };
      auto r = grad_check(fn, {disp, src, pose});
      INFO("seed " << seed << " invert " << invert << " worst input " << r.worst_input);
      CHECK(r.max_rel_error <= 1e-5);
    }
    auto grid_only = [&](std::span<const Tensor> in) { return warp_grid(in[0], K, in[1]).grid; };
    CHECK(grad_check(grid_only, {random_tensor(Shape{1, 1, H, W}, seed, 1.0, 5.0), random_tensor(Shape{1, 6, 1, 1}, seed, -0.1, 0.1)})
              .max_rel_error <= 1e-5);
  }
}

TEST_CASE("camera file round trip and validation") {
  const auto path = std::filesystem::temp_directory_path() / "hrdepth_camera_test.txt";
  CameraFile cam{small_camera(320, 96), DepthRange{0.1, 80.0}, 0.54};
  write_camera_file(path.string(), cam);
  CameraFile back = read_camera_file(path.string());
  CHECK(back.K.fx == cam.K.fx);
  CHECK(back.K.cy == cam.K.cy);
  CHECK(back.K.width == 320);
  CHECK(back.range.max_depth == 80.0);
  CHECK(back.baseline == 0.54);
  {
    std::FILE* f = std::fopen(path.c_str(), "w");
    std::fputs("100 100 400 10\n320 96\n0.1 100\n0.5\n", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(read_camera_file(path.string()), ContractViolation);
  std::filesystem::remove(path);
}
