#include "hrdepth/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "hrdepth/ops.hpp"

namespace hrdepth {

void CameraIntrinsics::validate() const {
  if (!(fx > 0 && fy > 0)) throw ContractViolation("focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ContractViolation("image size must be positive");
  if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
    throw ContractViolation("principal point lies outside the image");
}

CameraIntrinsics CameraIntrinsics::resized(int new_width, int new_height) const {
  const double sx = static_cast<double>(new_width) / width, sy = static_cast<double>(new_height) / height;
  CameraIntrinsics k;
  k.fx = fx * sx;
  k.fy = fy * sy;
  k.cx = (cx + 0.5) * sx - 0.5;
  k.cy = (cy + 0.5) * sy - 0.5;
  k.width = new_width;
  k.height = new_height;
  return k;
}

CameraIntrinsics CameraIntrinsics::centered(double fx, double fy, int width, int height) {
  CameraIntrinsics k{fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height};
  k.validate();
  return k;
}

void DepthRange::validate() const {
  if (!(min_depth > 0 && min_depth < max_depth)) throw ContractViolation("depth range needs 0 < min < max");
}

Mat4 identity4() { return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}; }

Mat4 matmul4(const Mat4& a, const Mat4& b) {
  Mat4 c{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 4 + j];
      c[i * 4 + j] = s;
    }
  return c;
}

namespace {

using Mat3 = std::array<double, 9>;

Mat3 mul3(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return c;
}

Mat3 rot_x(double a, bool deriv) {
  const double c = std::cos(a), s = std::sin(a);
  if (deriv) return {0, 0, 0, 0, -s, -c, 0, c, -s};
  return {1, 0, 0, 0, c, -s, 0, s, c};
}
Mat3 rot_y(double a, bool deriv) {
  const double c = std::cos(a), s = std::sin(a);
  if (deriv) return {-s, 0, c, 0, 0, 0, -c, 0, -s};
  return {c, 0, s, 0, 1, 0, -s, 0, c};
}
Mat3 rot_z(double a, bool deriv) {
  const double c = std::cos(a), s = std::sin(a);
  if (deriv) return {-s, -c, 0, c, -s, 0, 0, 0, 0};
  return {c, -s, 0, s, c, 0, 0, 0, 1};
}

/// R and dR/d(rx, ry, rz).
void rotation(const std::array<double, 3>& e, Mat3& R, std::array<Mat3, 3>& dR) {
  const Mat3 X = rot_x(e[0], false), Y = rot_y(e[1], false), Z = rot_z(e[2], false);
  R = mul3(Z, mul3(Y, X));
  dR[0] = mul3(Z, mul3(Y, rot_x(e[0], true)));
  dR[1] = mul3(Z, mul3(rot_y(e[1], true), X));
  dR[2] = mul3(rot_z(e[2], true), mul3(Y, X));
}

/// Top 3x4 block M of the transform (row-major, 12 entries) and dM/dp (12 x 6).
void transform_jacobian(const PoseVec& p, bool invert, std::array<double, 12>& M, std::array<double, 72>& J) {
  Mat3 R;
  std::array<Mat3, 3> dR;
  rotation(p.euler, R, dR);
  M.fill(0);
  J.fill(0);
  auto jac = [&](int r, int c, int k) -> double& { return J[(r * 4 + c) * 6 + k]; };
  if (!invert) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        M[r * 4 + c] = R[r * 3 + c];
        for (int k = 0; k < 3; ++k) jac(r, c, 3 + k) = dR[k][r * 3 + c];
      }
      M[r * 4 + 3] = p.t[r];
      jac(r, 3, r) = 1.0;
    }
    return;
  }
  // [R^T | -R^T t]
  for (int r = 0; r < 3; ++r) {
    double tr = 0;
    for (int c = 0; c < 3; ++c) {
      M[r * 4 + c] = R[c * 3 + r];
      for (int k = 0; k < 3; ++k) jac(r, c, 3 + k) = dR[k][c * 3 + r];
      tr -= R[c * 3 + r] * p.t[c];
      jac(r, 3, c) = -R[c * 3 + r];
    }
    M[r * 4 + 3] = tr;
    for (int k = 0; k < 3; ++k) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d -= dR[k][c * 3 + r] * p.t[c];
      jac(r, 3, 3 + k) = d;
    }
  }
}

constexpr double kMinZ = 1e-6;

struct WarpCore {
  Shape shape;
  std::vector<double> grid;
  std::vector<unsigned char> valid;
};

/// Forward warp with one 3x4 block per batch item.
WarpCore warp_forward(const Tensor& depth, const CameraIntrinsics& K, const std::vector<std::array<double, 12>>& Ms) {
  const Shape s = depth.shape();
  const int H = s.h, W = s.w;
  WarpCore out;
  out.shape = Shape{s.n, 2, H, W};
  out.grid.assign(out.shape.numel(), 0.0);
  out.valid.assign(static_cast<std::size_t>(s.n) * H * W, 0);
  const auto d = depth.data();
  for (int n = 0; n < s.n; ++n) {
    const auto& M = Ms[n];
    for (int y = 0; y < H; ++y) {
      const double b = (y - K.cy) / K.fy;
      for (int x = 0; x < W; ++x) {
        const std::size_t pix = (static_cast<std::size_t>(n) * H + y) * W + x;
        const double dv = d[pix];
        const double a = (x - K.cx) / K.fx;
        const double px = dv * a, py = dv * b, pz = dv;
        const double qx = M[0] * px + M[1] * py + M[2] * pz + M[3];
        const double qy = M[4] * px + M[5] * py + M[6] * pz + M[7];
        const double qz = M[8] * px + M[9] * py + M[10] * pz + M[11];
        double gu = 2.0, gv = 2.0;
        bool ok = false;
        if (qz > kMinZ) {
          // Offsets relative to the pixel's own ray keep the identity warp exact.
          const double u = x + K.fx * (qx / qz - px / pz);
          const double v = y + K.fy * (qy / qz - py / pz);
          gu = pixel_to_normalized(u, W);
          gv = pixel_to_normalized(v, H);
          ok = std::abs(gu) <= 1.0 && std::abs(gv) <= 1.0;
        }
        const std::size_t base = static_cast<std::size_t>(n) * 2 * H * W + static_cast<std::size_t>(y) * W + x;
        out.grid[base] = gu;
        out.grid[base + static_cast<std::size_t>(H) * W] = gv;
        out.valid[pix] = ok;
      }
    }
  }
  return out;
}

/// Accumulates dL/dDepth (if gd) and dL/dM (if gM) for upstream grid gradient g.
void warp_backward(const std::vector<double>& depth, Shape s, const CameraIntrinsics& K,
                   const std::vector<std::array<double, 12>>& Ms, std::span<const double> g, double* gd,
                   std::vector<std::array<double, 12>>* gM) {
  const int H = s.h, W = s.w;
  for (int n = 0; n < s.n; ++n) {
    const auto& M = Ms[n];
    for (int y = 0; y < H; ++y) {
      const double b = (y - K.cy) / K.fy;
      for (int x = 0; x < W; ++x) {
        const std::size_t pix = (static_cast<std::size_t>(n) * H + y) * W + x;
        const double dv = depth[pix];
        const double a = (x - K.cx) / K.fx;
        const double ph[4] = {dv * a, dv * b, dv, 1.0};
        const double qx = M[0] * ph[0] + M[1] * ph[1] + M[2] * ph[2] + M[3];
        const double qy = M[4] * ph[0] + M[5] * ph[1] + M[6] * ph[2] + M[7];
        const double qz = M[8] * ph[0] + M[9] * ph[1] + M[10] * ph[2] + M[11];
        if (!(qz > kMinZ)) continue;
        const std::size_t base = static_cast<std::size_t>(n) * 2 * H * W + static_cast<std::size_t>(y) * W + x;
        const double Gu = g[base] * 2.0 / W * K.fx;
        const double Gv = g[base + static_cast<std::size_t>(H) * W] * 2.0 / H * K.fy;
        // px/pz is the pixel ray slope, independent of depth and pose.
        const double gq[3] = {Gu / qz, Gv / qz, -(Gu * qx + Gv * qy) / (qz * qz)};
        if (gd) {
          const double ray[3] = {a, b, 1.0};
          double acc = 0;
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) acc += gq[r] * M[r * 4 + c] * ray[c];
          gd[pix] += acc;
        }
        if (gM) {
          auto& G = (*gM)[n];
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) G[r * 4 + c] += gq[r] * ph[c];
        }
      }
    }
  }
}

void check_depth(const Tensor& depth, const CameraIntrinsics& K) {
  K.validate();
  const Shape s = depth.shape();
  if (s.c != 1) throw ContractViolation("depth must have one channel");
  if (s.h != K.height || s.w != K.width)
    throw ContractViolation("depth is " + std::to_string(s.w) + "x" + std::to_string(s.h) + " but intrinsics are for " +
                            std::to_string(K.width) + "x" + std::to_string(K.height));
  for (double v : depth.data())
    if (!(v > 0.0) || !std::isfinite(v)) throw ContractViolation("depth must be positive and finite");
}

}  // namespace

Mat4 pose_to_matrix(const PoseVec& p, bool invert) {
  std::array<double, 12> M;
  std::array<double, 72> J;
  transform_jacobian(p, invert, M, J);
  Mat4 T = identity4();
  for (int i = 0; i < 12; ++i) T[i] = M[i];
  return T;
}

PoseVec matrix_to_pose(const Mat4& m) {
  PoseVec p;
  p.t = {m[3], m[7], m[11]};
  // R = Rz Ry Rx: R20 = -sin(ry), R21 = cos(ry) sin(rx), R22 = cos(ry) cos(rx), R10 = sin(rz) cos(ry), R00 = cos(rz) cos(ry).
  p.euler[1] = std::asin(std::clamp(-m[8], -1.0, 1.0));
  p.euler[0] = std::atan2(m[9], m[10]);
  p.euler[2] = std::atan2(m[4], m[0]);
  return p;
}

Mat4 invert_rigid(const Mat4& m) {
  Mat4 r = identity4();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i * 4 + j] = m[j * 4 + i];
  for (int i = 0; i < 3; ++i) r[i * 4 + 3] = -(r[i * 4] * m[3] + r[i * 4 + 1] * m[7] + r[i * 4 + 2] * m[11]);
  return r;
}

Mat4 stereo_transform(double tx) {
  Mat4 T = identity4();
  T[3] = tx;
  return T;
}

PoseVec pose_from_tensor(const Tensor& pose, int n) {
  if (pose.shape().c != 6 || pose.shape().h != 1 || pose.shape().w != 1)
    throw ContractViolation("pose tensor must be (N, 6, 1, 1)");
  PoseVec p;
  for (int k = 0; k < 3; ++k) {
    p.t[k] = pose.at(n, k, 0, 0);
    p.euler[k] = pose.at(n, 3 + k, 0, 0);
  }
  return p;
}

Tensor pose_to_tensor(const std::vector<PoseVec>& poses) {
  std::vector<double> v;
  for (const PoseVec& p : poses) {
    v.insert(v.end(), p.t.begin(), p.t.end());
    v.insert(v.end(), p.euler.begin(), p.euler.end());
  }
  return Tensor(Shape{static_cast<int>(poses.size()), 6, 1, 1}, std::move(v));
}

Tensor disp_to_depth(const Tensor& disp, const DepthRange& range) {
  range.validate();
  const double a = 1.0 / range.min_depth - 1.0 / range.max_depth, b = 1.0 / range.max_depth;
  const auto x = disp.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = 1.0 / (a * x[i] + b);
  Tensor y(disp.shape(), std::move(out));
  auto depth = std::make_shared<std::vector<double>>(y.to_vector());
  return maybe_record(y, {disp}, [depth, a](std::span<const double> g, GradSlots gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += -a * (*depth)[i] * (*depth)[i] * g[i];
  });
}

Tensor depth_to_disp(const Tensor& depth, const DepthRange& range) {
  range.validate();
  const double a = 1.0 / range.min_depth - 1.0 / range.max_depth, b = 1.0 / range.max_depth;
  std::vector<double> out = depth.to_vector();
  for (double& v : out) v = (1.0 / v - b) / a;
  return Tensor(depth.shape(), std::move(out));
}

std::array<double, 3> backproject(double x, double y, double depth, const CameraIntrinsics& K) {
  return {depth * (x - K.cx) / K.fx, depth * (y - K.cy) / K.fy, depth};
}

std::array<double, 3> transform_point(const Mat4& T, const std::array<double, 3>& p) {
  std::array<double, 3> q{};
  for (int r = 0; r < 3; ++r) q[r] = T[r * 4] * p[0] + T[r * 4 + 1] * p[1] + T[r * 4 + 2] * p[2] + T[r * 4 + 3];
  return q;
}

std::array<double, 2> project(const std::array<double, 3>& p, const CameraIntrinsics& K) {
  if (!(p[2] > kMinZ)) throw ContractViolation("cannot project a point behind the camera");
  return {K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy};
}

double WarpResult::valid_fraction() const {
  if (valid.empty()) return 0.0;
  std::size_t n = 0;
  for (unsigned char v : valid) n += v;
  return static_cast<double>(n) / valid.size();
}

WarpResult warp_grid(const Tensor& depth, const CameraIntrinsics& K, const Tensor& pose, bool invert) {
  check_depth(depth, K);
  const int N = depth.shape().n;
  if (!(pose.shape() == Shape{N, 6, 1, 1})) throw ContractViolation("pose must be (N, 6, 1, 1) matching the depth batch");
  std::vector<std::array<double, 12>> Ms(N);
  auto Js = std::make_shared<std::vector<std::array<double, 72>>>(N);
  for (int n = 0; n < N; ++n) transform_jacobian(pose_from_tensor(pose, n), invert, Ms[n], (*Js)[n]);
  WarpCore core = warp_forward(depth, K, Ms);
  WarpResult res;
  res.valid = std::move(core.valid);
  Tensor grid(core.shape, std::move(core.grid));
  auto d = std::make_shared<std::vector<double>>(depth.to_vector());
  const Shape s = depth.shape();
  res.grid = maybe_record(grid, {depth, pose}, [d, s, K, Ms, Js](std::span<const double> g, GradSlots gi) {
    std::vector<std::array<double, 12>> gM(Ms.size(), std::array<double, 12>{});
    warp_backward(*d, s, K, Ms, g, gi[0], gi[1] ? &gM : nullptr);
    if (!gi[1]) return;
    for (std::size_t n = 0; n < Ms.size(); ++n)
      for (int k = 0; k < 6; ++k) {
        double acc = 0;
        for (int e = 0; e < 12; ++e) acc += gM[n][e] * (*Js)[n][e * 6 + k];
        gi[1][n * 6 + k] += acc;
      }
  });
  return res;
}

WarpResult warp_grid(const Tensor& depth, const CameraIntrinsics& K, const std::vector<Mat4>& transforms) {
  check_depth(depth, K);
  const int N = depth.shape().n;
  if (transforms.size() != 1 && static_cast<int>(transforms.size()) != N)
    throw ContractViolation("need one transform or one per batch item");
  std::vector<std::array<double, 12>> Ms(N);
  for (int n = 0; n < N; ++n) {
    const Mat4& T = transforms.size() == 1 ? transforms[0] : transforms[n];
    for (int i = 0; i < 12; ++i) Ms[n][i] = T[i];
  }
  WarpCore core = warp_forward(depth, K, Ms);
  WarpResult res;
  res.valid = std::move(core.valid);
  Tensor grid(core.shape, std::move(core.grid));
  auto d = std::make_shared<std::vector<double>>(depth.to_vector());
  const Shape s = depth.shape();
  res.grid = maybe_record(grid, {depth}, [d, s, K, Ms](std::span<const double> g, GradSlots gi) {
    warp_backward(*d, s, K, Ms, g, gi[0], nullptr);
  });
  return res;
}

Tensor synthesize_view(const Tensor& source, const Tensor& grid) { return grid_sample_bilinear(source, grid, true); }

CameraFile read_camera_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractViolation("cannot open camera file " + path);
  CameraFile cam;
  std::string l1, l2, l3, l4;
  if (!std::getline(is, l1) || !std::getline(is, l2) || !std::getline(is, l3) || !std::getline(is, l4))
    throw ContractViolation("camera file " + path + " needs four lines");
  auto parse = [&](const std::string& line, auto&... vals) {
    std::istringstream ss(line);
    if (!((ss >> vals) && ...)) throw ContractViolation("malformed camera file line: '" + line + "'");
    std::string extra;
    if (ss >> extra) throw ContractViolation("trailing tokens in camera file line: '" + line + "'");
  };
  parse(l1, cam.K.fx, cam.K.fy, cam.K.cx, cam.K.cy);
  parse(l2, cam.K.width, cam.K.height);
  parse(l3, cam.range.min_depth, cam.range.max_depth);
  parse(l4, cam.baseline);
  cam.K.validate();
  cam.range.validate();
  return cam;
}

void write_camera_file(const std::string& path, const CameraFile& cam) {
  std::ofstream os(path);
  if (!os) throw ContractViolation("cannot write camera file " + path);
  os.precision(17);
  os << cam.K.fx << ' ' << cam.K.fy << ' ' << cam.K.cx << ' ' << cam.K.cy << '\n'
     << cam.K.width << ' ' << cam.K.height << '\n'
     << cam.range.min_depth << ' ' << cam.range.max_depth << '\n'
     << cam.baseline << '\n';
}

}  // namespace hrdepth
