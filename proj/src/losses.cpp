#include "hrdepth/losses.hpp"

#include <cmath>
#include <memory>

namespace hrdepth {

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractViolation("alpha must lie in [0, 1]");
  if (num_scales < 1) throw ContractViolation("num_scales must be at least 1");
  if (ssim_window < 1 || ssim_window % 2 == 0) throw ContractViolation("ssim_window must be odd and positive");
  if (!(lambda_smooth >= 0.0)) throw ContractViolation("lambda_smooth must be non-negative");
}

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

/// Box mean over a k x k window with reflect padding, per plane.
std::vector<int> reflect_table(int n, int r) {
  std::vector<int> t(static_cast<std::size_t>(n + 2 * r));
  for (int i = -r; i < n + r; ++i) t[static_cast<std::size_t>(i + r)] = reflect(i, n);
  return t;
}

/// Separable k x k mean with reflected borders: rows first, then columns.
void box_mean(const double* in, double* out, int H, int W, int k) {
  const int r = k / 2;
  const double inv = 1.0 / (k * k);
  const auto rx = reflect_table(W, r), ry = reflect_table(H, r);
  std::vector<double> rows(static_cast<std::size_t>(H) * W);
  for (int i = 0; i < H; ++i) {
    const double* src = in + static_cast<std::size_t>(i) * W;
    double* dst = rows.data() + static_cast<std::size_t>(i) * W;
    for (int j = 0; j < W; ++j) {
      double s = 0;
      for (int d = 0; d < k; ++d) s += src[rx[j + d]];
      dst[j] = s;
    }
  }
  for (int i = 0; i < H; ++i) {
    double* dst = out + static_cast<std::size_t>(i) * W;
    std::fill(dst, dst + W, 0.0);
    for (int d = 0; d < k; ++d) {
      const double* src = rows.data() + static_cast<std::size_t>(ry[i + d]) * W;
      for (int j = 0; j < W; ++j) dst[j] += src[j];
    }
    for (int j = 0; j < W; ++j) dst[j] *= inv;
  }
}

/// Adjoint of box_mean: scatters each output gradient to its window taps.
void box_mean_adjoint(const double* g, double* out, int H, int W, int k) {
  const int r = k / 2;
  const double inv = 1.0 / (k * k);
  const auto rx = reflect_table(W, r), ry = reflect_table(H, r);
  std::vector<double> rows(static_cast<std::size_t>(H) * W, 0.0);
  for (int i = 0; i < H; ++i) {
    const double* src = g + static_cast<std::size_t>(i) * W;
    for (int d = 0; d < k; ++d) {
      double* dst = rows.data() + static_cast<std::size_t>(ry[i + d]) * W;
      for (int j = 0; j < W; ++j) dst[j] += src[j] * inv;
    }
  }
  for (int i = 0; i < H; ++i) {
    const double* src = rows.data() + static_cast<std::size_t>(i) * W;
    double* dst = out + static_cast<std::size_t>(i) * W;
    for (int j = 0; j < W; ++j)
      for (int d = 0; d < k; ++d) dst[rx[j + d]] += src[j];
  }
}

}  // namespace

Tensor ssim(const Tensor& a, const Tensor& b, const LossConfig& cfg) {
  cfg.validate();
  if (!(a.shape() == b.shape())) throw ContractViolation("ssim: shapes differ");
  const Shape s = a.shape();
  const int H = s.h, W = s.w, k = cfg.ssim_window;
  if (k / 2 >= H || k / 2 >= W) throw ContractViolation("ssim: window larger than image");
  const std::size_t P = s.plane(), planes = static_cast<std::size_t>(s.n) * s.c;
  const double C1 = cfg.ssim_c1, C2 = cfg.ssim_c2;
  auto av = a.data(), bv = b.data();
  // Pooled statistics: A, B, AA, BB, AB.
  auto stats = std::make_shared<std::vector<double>>(5 * a.numel());
  std::vector<double> sq(P);
  std::vector<double> out(a.numel());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* x = av.data() + p * P;
    const double* y = bv.data() + p * P;
    double* A = stats->data() + p * P;
    double* B = A + a.numel();
    double* AA = B + a.numel();
    double* BB = AA + a.numel();
    double* AB = BB + a.numel();
    box_mean(x, A, H, W, k);
    box_mean(y, B, H, W, k);
    for (std::size_t i = 0; i < P; ++i) sq[i] = x[i] * x[i];
    box_mean(sq.data(), AA, H, W, k);
    for (std::size_t i = 0; i < P; ++i) sq[i] = y[i] * y[i];
    box_mean(sq.data(), BB, H, W, k);
    for (std::size_t i = 0; i < P; ++i) sq[i] = x[i] * y[i];
    box_mean(sq.data(), AB, H, W, k);
    for (std::size_t i = 0; i < P; ++i) {
      const double n1 = 2 * A[i] * B[i] + C1, n2 = 2 * (AB[i] - A[i] * B[i]) + C2;
      const double d1 = A[i] * A[i] + B[i] * B[i] + C1, d2 = (AA[i] - A[i] * A[i]) + (BB[i] - B[i] * B[i]) + C2;
      out[p * P + i] = (n1 * n2) / (d1 * d2);
    }
  }
  Tensor result(s, std::move(out));
  return maybe_record(result, {a, b}, [a, b, stats, s, k, C1, C2](std::span<const double> g, GradSlots gi) {
    const std::size_t P = s.plane(), total = s.numel(), planes = static_cast<std::size_t>(s.n) * s.c;
    std::vector<double> gA(P), gB(P), gAA(P), gBB(P), gAB(P);
    std::vector<double> tA(P), tB(P), tAA(P), tBB(P), tAB(P);
    auto av = a.data(), bv = b.data();
    for (std::size_t p = 0; p < planes; ++p) {
      const double* A = stats->data() + p * P;
      const double* B = A + total;
      const double* AA = B + total;
      const double* BB = AA + total;
      const double* AB = BB + total;
      for (std::size_t i = 0; i < P; ++i) {
        const double n1 = 2 * A[i] * B[i] + C1, n2 = 2 * (AB[i] - A[i] * B[i]) + C2;
        const double d1 = A[i] * A[i] + B[i] * B[i] + C1, d2 = (AA[i] - A[i] * A[i]) + (BB[i] - B[i] * B[i]) + C2;
        const double S = (n1 * n2) / (d1 * d2);
        const double go = g[p * P + i];
        const double Sn1 = n2 / (d1 * d2), Sn2 = n1 / (d1 * d2), Sd1 = -S / d1, Sd2 = -S / d2;
        gA[i] = go * (Sn1 * 2 * B[i] - Sn2 * 2 * B[i] + Sd1 * 2 * A[i] - Sd2 * 2 * A[i]);
        gB[i] = go * (Sn1 * 2 * A[i] - Sn2 * 2 * A[i] + Sd1 * 2 * B[i] - Sd2 * 2 * B[i]);
        gAA[i] = go * Sd2;
        gBB[i] = go * Sd2;
        gAB[i] = go * Sn2 * 2;
      }
      for (auto* v : {&tA, &tB, &tAA, &tBB, &tAB}) std::fill(v->begin(), v->end(), 0.0);
      box_mean_adjoint(gA.data(), tA.data(), s.h, s.w, k);
      box_mean_adjoint(gB.data(), tB.data(), s.h, s.w, k);
      box_mean_adjoint(gAA.data(), tAA.data(), s.h, s.w, k);
      box_mean_adjoint(gBB.data(), tBB.data(), s.h, s.w, k);
      box_mean_adjoint(gAB.data(), tAB.data(), s.h, s.w, k);
      const double* x = av.data() + p * P;
      const double* y = bv.data() + p * P;
      if (gi[0])
        for (std::size_t i = 0; i < P; ++i) gi[0][p * P + i] += tA[i] + 2 * x[i] * tAA[i] + y[i] * tAB[i];
      if (gi[1])
        for (std::size_t i = 0; i < P; ++i) gi[1][p * P + i] += tB[i] + 2 * y[i] * tBB[i] + x[i] * tAB[i];
    }
  });
}

Tensor photometric_error(const Tensor& target, const Tensor& warped, const LossConfig& cfg) {
  Tensor dssim = scale(add_scalar(scale(ssim(target, warped, cfg), -1.0), 1.0), cfg.alpha / 2.0);
  Tensor l1 = scale(abs(sub(target, warped)), 1.0 - cfg.alpha);
  return channel_mean(add(dssim, l1));
}

double photometric_blend(double ssim_value, double l1_value, double alpha) {
  return alpha / 2.0 * ssim_value + (1.0 - alpha) * l1_value;
}

Tensor min_reprojection(std::span<const Tensor> errors) {
  if (errors.empty()) throw ContractViolation("min_reprojection needs at least one error map");
  return minimum(errors);
}

Reprojection reprojection_loss(std::span<const Tensor> errors, std::span<const Tensor> identity_errors, bool automask) {
  Reprojection r;
  r.per_pixel = min_reprojection(errors);
  if (!automask) {
    r.mask = Tensor(r.per_pixel.shape(), 1.0);
    r.loss = mean(r.per_pixel);
    return r;
  }
  if (identity_errors.empty()) throw ContractViolation("automask needs identity reprojection errors");
  const Tensor id_min = min_reprojection(identity_errors).detach();
  std::vector<double> m(r.per_pixel.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = id_min.data()[i] < r.per_pixel.data()[i] ? 0.0 : 1.0;
  r.mask = Tensor(r.per_pixel.shape(), std::move(m));
  r.loss = masked_mean(r.per_pixel, r.mask);
  return r;
}

Tensor smoothness(const Tensor& disp, const Tensor& image) {
  const Shape ds = disp.shape(), is = image.shape();
  if (ds.c != 1) throw ContractViolation("smoothness: disparity must have one channel");
  if (is.n != ds.n || is.h != ds.h || is.w != ds.w) throw ContractViolation("smoothness: image/disparity size mismatch");
  if (ds.h < 2 || ds.w < 2) throw ContractViolation("smoothness: needs at least 2x2 pixels");
  const int N = ds.n, H = ds.h, W = ds.w, C = is.c;
  const std::size_t P = ds.plane();
  auto d = disp.data();
  auto im = image.data();
  // Mean-normalised disparity and channel-averaged image differences.
  auto norm = std::make_shared<std::vector<double>>(disp.numel());
  auto means = std::make_shared<std::vector<double>>(N);
  auto wx = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * H * (W - 1));
  auto wy = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * (H - 1) * W);
  for (int n = 0; n < N; ++n) {
    double m = 0;
    for (std::size_t i = 0; i < P; ++i) m += d[n * P + i];
    m /= static_cast<double>(P);
    if (!(m > 0.0)) throw ContractViolation("smoothness: disparity mean must be positive");
    (*means)[n] = m;
    for (std::size_t i = 0; i < P; ++i) (*norm)[n * P + i] = d[n * P + i] / m;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j + 1 < W; ++j) {
        double g = 0;
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * P + static_cast<std::size_t>(i) * W + j;
          g += std::abs(im[base] - im[base + 1]);
        }
        (*wx)[(static_cast<std::size_t>(n) * H + i) * (W - 1) + j] = g / C;
      }
    for (int i = 0; i + 1 < H; ++i)
      for (int j = 0; j < W; ++j) {
        double g = 0;
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * P + static_cast<std::size_t>(i) * W + j;
          g += std::abs(im[base] - im[base + W]);
        }
        (*wy)[(static_cast<std::size_t>(n) * (H - 1) + i) * W + j] = g / C;
      }
  }
  const double cx = static_cast<double>(wx->size()), cy = static_cast<double>(wy->size());
  long double sx = 0, sy = 0;
  for (int n = 0; n < N; ++n) {
    const double* z = norm->data() + n * P;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j + 1 < W; ++j)
        sx += std::abs(z[i * W + j] - z[i * W + j + 1]) * std::exp(-(*wx)[(static_cast<std::size_t>(n) * H + i) * (W - 1) + j]);
    for (int i = 0; i + 1 < H; ++i)
      for (int j = 0; j < W; ++j)
        sy += std::abs(z[i * W + j] - z[(i + 1) * W + j]) * std::exp(-(*wy)[(static_cast<std::size_t>(n) * (H - 1) + i) * W + j]);
  }
  const double value = static_cast<double>(sx / cx + sy / cy);
  return maybe_record(Tensor::scalar(value), {disp, image},
                      [norm, means, wx, wy, image, N, H, W, C, P, cx, cy](std::span<const double> g, GradSlots gi) {
    const double g0 = g[0];
    auto sgn = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
    auto im = image.data();
    std::vector<double> gz(P);
    for (int n = 0; n < N; ++n) {
      const double* z = norm->data() + n * P;
      std::fill(gz.begin(), gz.end(), 0.0);
      // x term
      for (int i = 0; i < H; ++i)
        for (int j = 0; j + 1 < W; ++j) {
          const std::size_t e = (static_cast<std::size_t>(n) * H + i) * (W - 1) + j;
          const double diff = z[i * W + j] - z[i * W + j + 1];
          const double w = std::exp(-(*wx)[e]);
          const double gd = g0 / cx * w * sgn(diff);
          gz[i * W + j] += gd;
          gz[i * W + j + 1] -= gd;
          if (gi[1]) {
            const double gw = -g0 / cx * std::abs(diff) * w / C;
            for (int c = 0; c < C; ++c) {
              const std::size_t base = (static_cast<std::size_t>(n) * C + c) * P + static_cast<std::size_t>(i) * W + j;
              const double s = sgn(im[base] - im[base + 1]);
              gi[1][base] += gw * s;
              gi[1][base + 1] -= gw * s;
            }
          }
        }
      // y term
      for (int i = 0; i + 1 < H; ++i)
        for (int j = 0; j < W; ++j) {
          const std::size_t e = (static_cast<std::size_t>(n) * (H - 1) + i) * W + j;
          const double diff = z[i * W + j] - z[(i + 1) * W + j];
          const double w = std::exp(-(*wy)[e]);
          const double gd = g0 / cy * w * sgn(diff);
          gz[i * W + j] += gd;
          gz[(i + 1) * W + j] -= gd;
          if (gi[1]) {
            const double gw = -g0 / cy * std::abs(diff) * w / C;
            for (int c = 0; c < C; ++c) {
              const std::size_t base = (static_cast<std::size_t>(n) * C + c) * P + static_cast<std::size_t>(i) * W + j;
              const double s = sgn(im[base] - im[base + W]);
              gi[1][base] += gw * s;
              gi[1][base + W] -= gw * s;
            }
          }
        }
      if (gi[0]) {
        // z = d / mean(d)
        const double m = (*means)[n];
        double dot = 0;
        for (std::size_t i = 0; i < P; ++i) dot += gz[i] * z[i];
        for (std::size_t i = 0; i < P; ++i) gi[0][n * P + i] += gz[i] / m - dot / (m * static_cast<double>(P));
      }
    }
  });
}

LossBreakdown total_loss(std::span<const Tensor> disparities, const ViewBatch& batch, const LossConfig& cfg,
                         const DepthRange& range) {
  cfg.validate();
  if (static_cast<int>(disparities.size()) < cfg.num_scales)
    throw ContractViolation("total_loss: " + std::to_string(cfg.num_scales) + " scales requested but " +
                            std::to_string(disparities.size()) + " disparity maps given");
  if (batch.sources.empty()) throw ContractViolation("total_loss: no source frames");
  if (batch.sources.size() != batch.poses.size()) throw ContractViolation("total_loss: one pose per source required");
  const Shape ts = batch.target.shape();
  std::vector<Tensor> identity;
  if (cfg.automask)
    for (const Tensor& src : batch.sources) identity.push_back(photometric_error(batch.target, src, cfg));
  LossBreakdown out;
  Tensor acc;
  for (int i = 0; i < cfg.num_scales; ++i) {
    const Tensor& disp = disparities[i];
    Tensor full = bilinear_resize(disp, ts.h, ts.w);
    Tensor depth = disp_to_depth(full, range);
    std::vector<Tensor> errs;
    for (std::size_t j = 0; j < batch.sources.size(); ++j) {
      WarpResult w = warp_grid(depth, batch.K, batch.poses[j]);
      errs.push_back(photometric_error(batch.target, synthesize_view(batch.sources[j], w.grid), cfg));
    }
    Reprojection re = reprojection_loss(errs, identity, cfg.automask);
    Tensor image = bilinear_resize(batch.target, disp.shape().h, disp.shape().w);
    Tensor sm = smoothness(disp, image);
    out.reprojection.push_back(re.loss.item());
    out.smooth.push_back(sm.item());
    Tensor term = add(re.loss, scale(sm, cfg.lambda_smooth));
    acc = acc.defined() ? add(acc, term) : term;
  }
  out.total = scale(acc, 1.0 / cfg.num_scales);
  return out;
}

Tensor distill_loss(std::span<const Tensor> teacher, std::span<const Tensor> student, const DistillConfig& cfg) {
  if (teacher.empty() || teacher.size() != student.size())
    throw ContractViolation("distill_loss: teacher and student must provide the same number of scales");
  if (!cfg.scale_weights.empty() && cfg.scale_weights.size() != student.size())
    throw ContractViolation("distill_loss: one weight per scale required");
  double wsum = 0;
  Tensor acc;
  for (std::size_t k = 0; k < student.size(); ++k) {
    Tensor t = teacher[k].detach();
    const Shape ss = student[k].shape(), tsh = t.shape();
    if (tsh.n != ss.n || tsh.c != ss.c) throw ContractViolation("distill_loss: teacher/student batch or channel mismatch");
    if (tsh.h != ss.h || tsh.w != ss.w) t = bilinear_resize(t, ss.h, ss.w);
    Tensor diff = sub(student[k], t);
    Tensor term = mean(cfg.norm == DistillNorm::kL1 ? abs(diff) : square(diff));
    const double w = cfg.scale_weights.empty() ? 1.0 : cfg.scale_weights[k];
    wsum += w;
    term = scale(term, w);
    acc = acc.defined() ? add(acc, term) : term;
  }
  if (!(wsum > 0)) throw ContractViolation("distill_loss: scale weights must sum to a positive value");
  return scale(acc, 1.0 / wsum);
}

}  // namespace hrdepth
