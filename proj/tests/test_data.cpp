#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "hrdepth/data.hpp"
#include "hrdepth/gradcheck.hpp"
#include "hrdepth/image_io.hpp"
#include "hrdepth/losses.hpp"
#include "hrdepth/rng.hpp"

using namespace hrdepth;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("hrdepth_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SceneSpec single_plane(int frames, double tx_step, double depth = 4.0) {
  SceneSpec s;
  s.width = 64;
  s.height = 16;
  s.fx = 64.0;
  s.fy = 64.0;
  s.planes.push_back(Plane{depth, -1e3, 1e3, -1e3, 1e3, 5, 0.0});
  for (int k = 0; k < frames; ++k) {
    PoseVec p;
    p.t = {tx_step * k, 0, 0};
    s.trajectory.push_back(p);
  }
  return s;
}

Tensor pose_tensor(const Mat4& m) { return pose_to_tensor({matrix_to_pose(m)}); }

}  // namespace

TEST_CASE("scene spec text round trip and errors") {
  SceneSpec s = two_plane_scene(96, 32, 4);
  s.noise = 0.01;
  SceneSpec r = parse_scene_spec(s.to_text());
  CHECK(r.to_text() == s.to_text());
  CHECK(r.planes.size() == 2);
  CHECK(r.trajectory.size() == 4);
  CHECK_THROWS_AS(parse_scene_spec("width = 10\nbogus = 1\n"), ContractViolation);
  CHECK_THROWS_AS(parse_scene_spec("plane = 5 -1 1 -1 1 3\nframe = 0 0 0 0 0 0\nframe = 0 0 0 0 0 0\n"), ContractViolation);
  CHECK_THROWS_AS(parse_scene_spec("plane = 500 -1 1 -1 1 3\nframe = 0 0 0 0 0 0\nframe = 0 0 0 0 0 0\nframe = 0 0 0 0 0 0\n"),
                  ContractViolation);
  CHECK_THROWS_AS(parse_scene_spec("width = 10 11\n"), ContractViolation);
}

TEST_CASE("static camera: identical frames and zero loss at the true geometry") {
  SceneSpec s = single_plane(3, 0.0);
  auto seq = gen_synthetic_sequence(s, 7);
  REQUIRE(seq.size() == 1);
  const Sample& smp = seq[0];
  smp.validate();
  CHECK(smp.sources[0].to_vector() == smp.target.to_vector());
  CHECK(smp.sources[1].to_vector() == smp.target.to_vector());
  ViewBatch b{smp.target, smp.sources, {pose_tensor(*smp.source_poses[0]), pose_tensor(*smp.source_poses[1])}, smp.K};
  LossConfig cfg;
  cfg.num_scales = 1;
  cfg.lambda_smooth = 0.0;
  const Tensor d[] = {depth_to_disp(smp.depth)};
  CHECK(total_loss(d, b, cfg).total.item() == 0.0);
}

TEST_CASE("pure x-translation shifts a single plane by fx * tx / d") {
  // fx = 64, d = 4, tx = 0.125 -> 2 pixels per frame.
  SceneSpec s = single_plane(3, 0.125);
  const Tensor f0 = render_frame(s, 0, 3).image, f1 = render_frame(s, 1, 3).image;
  double worst = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x + 2 < 64; ++x) worst = std::max(worst, std::abs(f1.at(0, c, y, x) - f0.at(0, c, y, x + 2)));
  CHECK(worst <= 1e-12);
  CHECK(render_frame(s, 1, 3).depth.at(0, 0, 5, 5) == doctest::Approx(4.0).epsilon(1e-15));

  // The attached pose warps the source onto the target at the same offset.
  auto seq = gen_synthetic_sequence(s, 3);
  const Sample& smp = seq[0];
  WarpResult w = warp_grid(smp.depth, smp.K, std::vector<Mat4>{*smp.source_poses[1]});
  const double u = normalized_to_pixel(w.grid.at(0, 0, 4, 10), 64);
  CHECK(u == doctest::Approx(8.0).epsilon(1e-12));  // the next frame sees this point 2 px further left
}

TEST_CASE("generation is deterministic in the seed") {
  SceneSpec s = two_plane_scene(48, 16, 4);
  s.noise = 0.02;
  auto a = gen_synthetic_sequence(s, 9), b = gen_synthetic_sequence(s, 9), c = gen_synthetic_sequence(s, 10);
  REQUIRE(a.size() == 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].target.to_vector() == b[i].target.to_vector());
    CHECK(a[i].sources[1].to_vector() == b[i].sources[1].to_vector());
  }
  CHECK(a[0].target.to_vector() != c[0].target.to_vector());
}

TEST_CASE("a trajectory leaving the scene is a generation error") {
  SceneSpec s = single_plane(3, 10.0);
  s.planes[0].x0 = -3;
  s.planes[0].x1 = 3;
  CHECK_THROWS_AS(gen_synthetic_sequence(s, 1), GenerationError);
}

TEST_CASE("two-plane scene has both depths and matching true poses") {
  SceneSpec s = two_plane_scene(96, 32, 5);
  auto seq = gen_synthetic_sequence(s, 1);
  REQUIRE(seq.size() == 3);
  std::set<double> depths;
  for (double d : seq[1].depth.data()) depths.insert(d);
  CHECK(depths.count(5.0) == 1);
  CHECK(depths.count(50.0) == 1);
  CHECK(depths.size() == 2);
  // Middle frame: the left half is the near plane.
  CHECK(seq[1].depth.at(0, 0, 10, 10) == 5.0);
  CHECK(seq[1].depth.at(0, 0, 10, 90) == 50.0);
  const PoseVec p = matrix_to_pose(*seq[1].source_poses[0]);
  CHECK(p.t[0] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("true geometry beats perturbed disparity on the synthetic scene") {
  SceneSpec s = two_plane_scene(96, 32, 5);
  auto seq = gen_synthetic_sequence(s, 2);
  const Sample& smp = seq[1];
  ViewBatch b{smp.target, smp.sources, {pose_tensor(*smp.source_poses[0]), pose_tensor(*smp.source_poses[1])}, smp.K};
  LossConfig cfg;
  cfg.num_scales = 1;
  const Tensor truth = depth_to_disp(smp.depth);
  const Tensor td[] = {truth};
  const double best = total_loss(td, b, cfg).total.item();
  int wins = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    Rng rng(100 + t);
    std::vector<double> v = truth.to_vector();
    const double amp = rng.uniform(0.05, 0.5);
    for (double& x : v) x = std::clamp(x * (1.0 + amp * rng.uniform(-1, 1)), 1e-4, 1.0);
    const Tensor pd[] = {Tensor(truth.shape(), v)};
    if (best < total_loss(pd, b, cfg).total.item()) ++wins;
  }
  CHECK(wins >= 38);
}

TEST_CASE("png round trips") {
  fs::path dir = scratch("png");
  std::vector<double> v(3 * 4 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>((i * 37) % 256) / 255.0;
  const Tensor img(Shape{1, 3, 4, 5}, v);
  write_png_rgb((dir / "a.png").string(), img);
  CHECK(read_png_rgb((dir / "a.png").string()).to_vector() == v);
  Gray16 g{3, 2, {0, 1, 256, 4097, 65535, 1234}};
  write_png_gray16((dir / "g.png").string(), g);
  CHECK(read_png_gray16((dir / "g.png").string()).values == g.values);
  const Tensor depth(Shape{1, 1, 1, 3}, {0.0, 1.5, 80.0});
  write_depth_png((dir / "d.png").string(), depth, 256.0);
  CHECK(read_depth_png((dir / "d.png").string(), 256.0).to_vector() == depth.to_vector());
  CHECK_THROWS_AS(read_png_rgb((dir / "missing.png").string()), ImageError);
  std::ofstream((dir / "bad.png").string()) << "not a png";
  CHECK_THROWS_AS(read_png_rgb((dir / "bad.png").string()), ImageError);
}

TEST_CASE("KITTI-layout loader") {
  fs::path root = scratch("kitti");
  const std::string drive = "2011_09_26/2011_09_26_drive_0001_sync";
  for (const char* cam : {"image_02", "image_03"}) {
    fs::create_directories(root / drive / cam / "data");
    for (int f = 0; f < 4; ++f) {
      char name[32];
      std::snprintf(name, sizeof(name), "%010d.png", f);
      write_png_rgb((root / drive / cam / "data" / name).string(), random_tensor(Shape{1, 3, 12, 40}, 10 * f + cam[7], 0, 1));
    }
  }
  std::ofstream(root / "split.txt") << drive << " 0 l\n" << drive << " 2 l\n\n" << drive << " 3 r\n";
  auto entries = read_split_file((root / "split.txt").string());
  REQUIRE(entries.size() == 3);
  KittiConfig cfg;
  cfg.width = 32;
  cfg.height = 8;
  cfg.stereo = true;
  cfg.baseline = 0.54;
  std::vector<std::string> warnings;
  auto sink = [&](const std::string& w) { warnings.push_back(w); };

  CHECK_FALSE(load_kitti_sample(root.string(), entries[0], cfg, sink).has_value());
  CHECK_FALSE(load_kitti_sample(root.string(), entries[2], cfg, sink).has_value());  // no frame 4
  CHECK(warnings.size() == 2);

  auto s = load_kitti_sample(root.string(), entries[1], cfg, sink);
  REQUIRE(s.has_value());
  s->validate();
  CHECK(s->target.shape() == Shape{1, 3, 8, 32});
  CHECK(s->sources.size() == 3);
  CHECK(s->K.cx == doctest::Approx(15.5));
  CHECK(s->K.fx == doctest::Approx(0.58 * 32));
  REQUIRE(s->source_poses[2].has_value());
  const Mat4 expect = stereo_transform(-0.54);
  CHECK(*s->source_poses[2] == expect);
  CHECK((*s->source_poses[2])[3] == -0.54);
  auto again = load_kitti_sample(root.string(), entries[1], cfg, sink);
  CHECK(again->target.to_vector() == s->target.to_vector());
  CHECK_THROWS_AS(parse_split_line("only_folder"), ContractViolation);
  CHECK_THROWS_AS(parse_split_line("f 3 x"), ContractViolation);
}

TEST_CASE("batcher: floor division, seeded order, disjoint batches") {
  Batcher b(25, 12, 4);
  CHECK(b.batches_per_epoch() == 2);
  auto e0 = b.epoch(0);
  REQUIRE(e0.size() == 2);
  std::set<std::size_t> all(e0[0].begin(), e0[0].end());
  all.insert(e0[1].begin(), e0[1].end());
  CHECK(all.size() == 24);
  CHECK(Batcher(25, 12, 4).epoch(0) == e0);
  CHECK(b.epoch(1) != e0);
  CHECK(Batcher(25, 12, 5).epoch(0) != e0);
  CHECK(b.next() == e0[0]);
  CHECK(b.next() == e0[1]);
  CHECK(b.next() == b.epoch(1)[0]);
  CHECK(b.current_epoch() == 1);
  CHECK_THROWS_AS(Batcher(3, 0, 1), ContractViolation);
}

TEST_CASE("collate stacks samples") {
  auto seq = gen_synthetic_sequence(two_plane_scene(32, 16, 6), 3);
  Batch b = collate(seq, {2, 0});
  CHECK(b.target.shape() == Shape{2, 3, 16, 32});
  CHECK(b.sources.size() == 2);
  CHECK(b.depth.shape() == Shape{2, 1, 16, 32});
  REQUIRE(b.source_poses[0].has_value());
  CHECK(b.source_poses[0]->size() == 2);
  CHECK(b.target.at(1, 2, 3, 4) == seq[0].target.at(0, 2, 3, 4));
}
