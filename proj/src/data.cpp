#include "hrdepth/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "hrdepth/image_io.hpp"
#include "hrdepth/ops.hpp"
#include "hrdepth/rng.hpp"

namespace hrdepth {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lattice(std::uint64_t seed, std::int64_t i, std::int64_t j, int c) {
  std::uint64_t h = mix(seed ^ mix(static_cast<std::uint64_t>(i) ^ mix(static_cast<std::uint64_t>(j) ^ mix(static_cast<std::uint64_t>(c)))));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Bilinear value noise on a square lattice.
double value_noise(std::uint64_t seed, double u, double v, int c) {
  const double fu = std::floor(u), fv = std::floor(v);
  const auto i = static_cast<std::int64_t>(fu), j = static_cast<std::int64_t>(fv);
  const double a = u - fu, b = v - fv;
  return (1 - a) * (1 - b) * lattice(seed, i, j, c) + a * (1 - b) * lattice(seed, i + 1, j, c) +
         (1 - a) * b * lattice(seed, i, j + 1, c) + a * b * lattice(seed, i + 1, j + 1, c);
}

double texture(std::uint64_t seed, double cell, double X, double Y, int c) {
  const double coarse = value_noise(seed, X / cell, Y / cell, c);
  const double fine = value_noise(mix(seed + 17), 2.0 * X / cell, 2.0 * Y / cell, c);
  return 0.1 + 0.8 * (0.65 * coarse + 0.35 * fine);
}

[[noreturn]] void spec_error(int line, const std::string& msg) {
  throw ContractViolation("scene spec line " + std::to_string(line) + ": " + msg);
}

}  // namespace

void Sample::validate() const {
  if (!target.defined()) throw ContractViolation("sample " + id + ": no target image");
  if (sources.empty()) throw ContractViolation("sample " + id + ": no source images");
  if (source_poses.size() != sources.size()) throw ContractViolation("sample " + id + ": one pose slot per source required");
  const Shape s = target.shape();
  if (s.n != 1 || s.c != 3) throw ContractViolation("sample " + id + ": target must be (1, 3, H, W)");
  for (const Tensor& src : sources)
    if (!(src.shape() == s)) throw ContractViolation("sample " + id + ": source shape differs from target");
  auto in_range = [](const Tensor& t) {
    for (double v : t.data())
      if (!(v >= 0.0 && v <= 1.0)) return false;
    return true;
  };
  if (!in_range(target)) throw ContractViolation("sample " + id + ": target values outside [0, 1]");
  for (const Tensor& src : sources)
    if (!in_range(src)) throw ContractViolation("sample " + id + ": source values outside [0, 1]");
}

CameraIntrinsics SceneSpec::camera() const {
  return CameraIntrinsics::centered(fx > 0 ? fx : 0.58 * width, fy > 0 ? fy : 1.92 * height, width, height);
}

void SceneSpec::validate() const {
  if (width < 2 || height < 2) throw ContractViolation("scene: resolution must be at least 2x2");
  if (fx < 0 || fy < 0) throw ContractViolation("scene: focal lengths must be positive");
  if (!(noise >= 0.0)) throw ContractViolation("scene: noise must be non-negative");
  range.validate();
  if (planes.empty()) throw ContractViolation("scene: at least one plane required");
  for (std::size_t i = 0; i < planes.size(); ++i) {
    const Plane& p = planes[i];
    if (!(p.depth >= range.min_depth && p.depth <= range.max_depth))
      throw ContractViolation("scene: plane " + std::to_string(i) + " depth outside the depth range");
    if (!(p.x0 < p.x1 && p.y0 < p.y1)) throw ContractViolation("scene: plane " + std::to_string(i) + " has an empty extent");
    if (p.texture_cell < 0) throw ContractViolation("scene: plane " + std::to_string(i) + " texture cell must be >= 0");
  }
  if (trajectory.size() < 3) throw ContractViolation("scene: trajectory needs at least 3 frames");
}

std::string SceneSpec::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "width = " << width << "\nheight = " << height << "\nfx = " << fx << "\nfy = " << fy << "\nnoise = " << noise
     << "\nmin_depth = " << range.min_depth << "\nmax_depth = " << range.max_depth << "\n";
  for (const Plane& p : planes)
    os << "plane = " << p.depth << ' ' << p.x0 << ' ' << p.x1 << ' ' << p.y0 << ' ' << p.y1 << ' ' << p.texture_seed << ' '
       << p.texture_cell << "\n";
  for (const PoseVec& f : trajectory)
    os << "frame = " << f.t[0] << ' ' << f.t[1] << ' ' << f.t[2] << ' ' << f.euler[0] << ' ' << f.euler[1] << ' ' << f.euler[2]
       << "\n";
  return os.str();
}

SceneSpec parse_scene_spec(const std::string& text) {
  SceneSpec s;
  std::istringstream in(text);
  std::string line;
  int ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) spec_error(ln, "expected key = value");
    std::istringstream key_in(line.substr(0, eq));
    std::string key;
    key_in >> key;
    std::istringstream val(line.substr(eq + 1));
    auto need = [&](auto& x) {
      if (!(val >> x)) spec_error(ln, "bad value for " + key);
    };
    if (key == "width") need(s.width);
    else if (key == "height") need(s.height);
    else if (key == "fx") need(s.fx);
    else if (key == "fy") need(s.fy);
    else if (key == "noise") need(s.noise);
    else if (key == "min_depth") need(s.range.min_depth);
    else if (key == "max_depth") need(s.range.max_depth);
    else if (key == "plane") {
      Plane p;
      need(p.depth);
      need(p.x0);
      need(p.x1);
      need(p.y0);
      need(p.y1);
      need(p.texture_seed);
      if (!(val >> p.texture_cell)) p.texture_cell = 0.0;
      s.planes.push_back(p);
    } else if (key == "frame") {
      PoseVec f;
      for (double& v : f.t) need(v);
      for (double& v : f.euler) need(v);
      s.trajectory.push_back(f);
    } else {
      spec_error(ln, "unknown key '" + key + "'");
    }
    std::string rest;
    if (val >> rest) spec_error(ln, "trailing text '" + rest + "'");
  }
  s.validate();
  return s;
}

SceneSpec load_scene_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ContractViolation("cannot open scene spec " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_scene_spec(ss.str());
}

SceneSpec two_plane_scene(int width, int height, int frames, double near_depth, double far_depth) {
  SceneSpec s;
  s.width = width;
  s.height = height;
  s.planes.push_back(Plane{far_depth, -1e4, 1e4, -1e4, 1e4, 11, 0.0});
  // Left half of the view at the middle frame.
  s.planes.push_back(Plane{near_depth, -1e4, 0.0, -1e4, 1e4, 23, 0.0});
  const double step = 0.02 * near_depth;
  for (int k = 0; k < frames; ++k) {
    PoseVec p;
    p.t = {step * (k - 0.5 * (frames - 1)), 0.0, 0.0};
    s.trajectory.push_back(p);
  }
  return s;
}

RenderedFrame render_frame(const SceneSpec& spec, int index, std::uint64_t seed) {
  spec.validate();
  if (index < 0 || index >= static_cast<int>(spec.trajectory.size())) throw ContractViolation("render_frame: frame index out of range");
  const CameraIntrinsics K = spec.camera();
  const Mat4 M = pose_to_matrix(spec.trajectory[index]);
  const int H = spec.height, W = spec.width;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  std::vector<double> img(3 * P), depth(P);
  std::vector<double> cells(spec.planes.size());
  for (std::size_t i = 0; i < spec.planes.size(); ++i)
    cells[i] = spec.planes[i].texture_cell > 0 ? spec.planes[i].texture_cell : 3.0 * spec.planes[i].depth / K.fx;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double dc[3] = {(x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0};
      double dw[3];
      for (int r = 0; r < 3; ++r) dw[r] = M[r * 4] * dc[0] + M[r * 4 + 1] * dc[1] + M[r * 4 + 2] * dc[2];
      const double o[3] = {M[3], M[7], M[11]};
      double best = std::numeric_limits<double>::infinity();
      int hit = -1;
      double hx = 0, hy = 0;
      for (std::size_t i = 0; i < spec.planes.size(); ++i) {
        const Plane& p = spec.planes[i];
        if (dw[2] <= 0) continue;
        const double s = (p.depth - o[2]) / dw[2];
        if (!(s > 0) || s >= best) continue;
        const double X = o[0] + s * dw[0], Y = o[1] + s * dw[1];
        if (X < p.x0 || X > p.x1 || Y < p.y0 || Y > p.y1) continue;
        best = s;
        hit = static_cast<int>(i);
        hx = X;
        hy = Y;
      }
      if (hit < 0)
        throw GenerationError("frame " + std::to_string(index) + ": pixel (" + std::to_string(x) + ", " + std::to_string(y) +
                              ") sees no plane; the trajectory leaves the scene");
      if (best < spec.range.min_depth || best > spec.range.max_depth)
        throw GenerationError("frame " + std::to_string(index) + ": visible depth " + std::to_string(best) + " outside the depth range");
      const std::size_t pix = static_cast<std::size_t>(y) * W + x;
      depth[pix] = best;
      const std::uint64_t tseed = mix(seed ^ mix(spec.planes[hit].texture_seed));
      for (int c = 0; c < 3; ++c) img[c * P + pix] = texture(tseed, cells[hit], hx, hy, c);
    }
  if (spec.noise > 0) {
    Rng rng(mix(seed ^ mix(0x6e6f697365ULL + static_cast<std::uint64_t>(index))));
    for (double& v : img) v = std::clamp(v + spec.noise * rng.normal(), 0.0, 1.0);
  }
  return RenderedFrame{Tensor(Shape{1, 3, H, W}, std::move(img)), Tensor(Shape{1, 1, H, W}, std::move(depth))};
}

std::vector<Sample> gen_synthetic_sequence(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<RenderedFrame> frames;
  for (std::size_t k = 0; k < spec.trajectory.size(); ++k) frames.push_back(render_frame(spec, static_cast<int>(k), seed));
  std::vector<Mat4> cam_to_world;
  for (const PoseVec& p : spec.trajectory) cam_to_world.push_back(pose_to_matrix(p));
  std::vector<Sample> out;
  for (std::size_t k = 1; k + 1 < frames.size(); ++k) {
    Sample s;
    s.id = "synthetic/" + std::to_string(k);
    s.target = frames[k].image;
    s.depth = frames[k].depth;
    s.K = spec.camera();
    for (std::size_t j : {k - 1, k + 1}) {
      s.sources.push_back(frames[j].image);
      s.source_poses.push_back(matmul4(invert_rigid(cam_to_world[j]), cam_to_world[k]));
    }
    out.push_back(std::move(s));
  }
  return out;
}

SplitEntry parse_split_line(const std::string& line) {
  std::istringstream in(line);
  SplitEntry e;
  if (!(in >> e.folder >> e.frame)) throw ContractViolation("split line '" + line + "': expected 'folder frame [l|r]'");
  std::string side;
  if (in >> side) {
    if (side != "l" && side != "r") throw ContractViolation("split line '" + line + "': side must be l or r");
    e.side = side[0];
  }
  if (e.frame < 0) throw ContractViolation("split line '" + line + "': negative frame index");
  return e;
}

std::vector<SplitEntry> read_split_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ContractViolation("cannot open split file " + path);
  std::vector<SplitEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_split_line(line));
  }
  return out;
}

std::optional<Sample> load_kitti_sample(const std::string& root, const SplitEntry& entry, const KittiConfig& cfg,
                                        const WarningSink& warn) {
  namespace fs = std::filesystem;
  auto path_of = [&](char side, int frame) {
    char name[32];
    std::snprintf(name, sizeof(name), "%010d", frame);
    return (fs::path(root) / entry.folder / (side == 'l' ? "image_02" : "image_03") / "data" / (name + cfg.extension)).string();
  };
  auto skip = [&](const std::string& why) -> std::optional<Sample> {
    if (warn) warn("skipping " + entry.folder + " " + std::to_string(entry.frame) + ": " + why);
    return std::nullopt;
  };
  const std::string target = path_of(entry.side, entry.frame);
  if (!fs::exists(target)) return skip("missing target " + target);
  if (entry.frame == 0) return skip("no previous frame");
  const std::string prev = path_of(entry.side, entry.frame - 1), next = path_of(entry.side, entry.frame + 1);
  if (!fs::exists(prev)) return skip("missing previous frame " + prev);
  if (!fs::exists(next)) return skip("missing next frame " + next);
  const char other = entry.side == 'l' ? 'r' : 'l';
  const std::string stereo = path_of(other, entry.frame);
  if (cfg.stereo && !fs::exists(stereo)) return skip("missing stereo frame " + stereo);

  auto load = [&](const std::string& p) {
    Tensor img = read_png_rgb(p);
    if (img.shape().h != cfg.height || img.shape().w != cfg.width) img = bilinear_resize(img, cfg.height, cfg.width);
    return img;
  };
  Sample s;
  s.id = entry.folder + " " + std::to_string(entry.frame) + " " + entry.side;
  s.target = load(target);
  s.sources = {load(prev), load(next)};
  s.source_poses = {std::nullopt, std::nullopt};
  if (cfg.stereo) {
    s.sources.push_back(load(stereo));
    // The right camera sits `baseline` to the right of the left one.
    s.source_poses.push_back(stereo_transform(entry.side == 'l' ? -cfg.baseline : cfg.baseline));
  }
  s.K = CameraIntrinsics::centered(cfg.fx_norm * cfg.width, cfg.fy_norm * cfg.height, cfg.width, cfg.height);
  return s;
}

Batcher::Batcher(std::size_t num_samples, int batch_size, std::uint64_t shuffle_seed)
    : num_samples_(num_samples), batch_size_(batch_size), seed_(shuffle_seed) {
  if (batch_size < 1) throw ContractViolation("batch size must be at least 1");
}

std::vector<std::vector<std::size_t>> Batcher::epoch(std::uint64_t e) const {
  std::vector<std::size_t> order(num_samples_);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix(seed_ ^ mix(e)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  const auto b = static_cast<std::size_t>(batch_size_);
  for (std::size_t k = 0; k + b <= order.size(); k += b) out.emplace_back(order.begin() + k, order.begin() + k + b);
  return out;
}

std::vector<std::size_t> Batcher::next() {
  if (batches_per_epoch() == 0) throw ContractViolation("batcher: fewer samples than one batch");
  if (current_.empty()) current_ = epoch(epoch_);
  if (cursor_ == current_.size()) {
    ++epoch_;
    cursor_ = 0;
    current_ = epoch(epoch_);
  }
  return current_[cursor_++];
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw ContractViolation("stack: no tensors");
  const Shape s = items[0].shape();
  std::vector<double> v;
  v.reserve(s.numel() * items.size());
  int n = 0;
  for (const Tensor& t : items) {
    const Shape ts = t.shape();
    if (ts.c != s.c || ts.h != s.h || ts.w != s.w) throw ContractViolation("stack: shape " + ts.str() + " differs from " + s.str());
    v.insert(v.end(), t.data().begin(), t.data().end());
    n += ts.n;
  }
  return Tensor(Shape{n, s.c, s.h, s.w}, std::move(v));
}

Batch collate(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractViolation("collate: empty batch");
  const Sample& first = samples.at(indices[0]);
  Batch b;
  b.K = first.K;
  std::vector<Tensor> targets, depths;
  std::vector<std::vector<Tensor>> sources(first.sources.size());
  b.source_poses.assign(first.sources.size(), std::vector<Mat4>{});
  for (std::size_t i : indices) {
    const Sample& s = samples.at(i);
    if (s.sources.size() != first.sources.size()) throw ContractViolation("collate: samples have different source counts");
    if (s.K.fx != first.K.fx || s.K.fy != first.K.fy || s.K.cx != first.K.cx || s.K.cy != first.K.cy)
      throw ContractViolation("collate: samples have different intrinsics");
    targets.push_back(s.target);
    if (s.depth.defined()) depths.push_back(s.depth);
    for (std::size_t j = 0; j < s.sources.size(); ++j) {
      sources[j].push_back(s.sources[j]);
      if (!s.source_poses[j]) b.source_poses[j] = std::nullopt;
      else if (b.source_poses[j]) b.source_poses[j]->push_back(*s.source_poses[j]);
    }
  }
  b.target = stack(targets);
  for (auto& src : sources) b.sources.push_back(stack(src));
  if (depths.size() == indices.size()) b.depth = stack(depths);
  return b;
}

}  // namespace hrdepth
