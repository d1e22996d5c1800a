#include "hrdepth/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace hrdepth {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractViolation(std::string(op) + ": undefined tensor");
}

// y = f(x) with dy/dx expressed through (x, y).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd f, Deriv dydx) {
  require_defined(x, "unary op");
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor y(x.shape(), std::move(out));
  if (!x.requires_grad()) return y;
  return maybe_record(y, {x}, [x, y, dydx](std::span<const double> g, GradSlots gin) {
    auto xd = x.data();
    auto yd = y.data();
    double* gx = gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dydx(xd[i], yd[i]);
  });
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

// Source index per (kernel tap, output position); -1 reads zero padding.
std::vector<int> tap_map(int in, int out, int k, int stride, int pad, PadMode mode) {
  std::vector<int> map(static_cast<std::size_t>(k) * out);
  for (int t = 0; t < k; ++t) {
    for (int o = 0; o < out; ++o) {
      int i = o * stride - pad + t;
      if (i < 0 || i >= in) i = (mode == PadMode::kReflect) ? reflect_index(i, in) : -1;
      map[static_cast<std::size_t>(t) * out + o] = i;
    }
  }
  return map;
}

struct ConvGeometry {
  int C, H, W, O, k, Ho, Wo;
  std::vector<int> ymap, xmap;
  bool direct = false;  // 1x1, stride 1, no padding: the image is its own column matrix
};

void im2col(const double* img, const ConvGeometry& g, double* col) {
  const std::size_t plane = static_cast<std::size_t>(g.Ho) * g.Wo;
  for (int c = 0; c < g.C; ++c) {
    const double* src = img + static_cast<std::size_t>(c) * g.H * g.W;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        double* dst = col + (static_cast<std::size_t>(c) * g.k * g.k + ki * g.k + kj) * plane;
        const int* xm = &g.xmap[static_cast<std::size_t>(kj) * g.Wo];
        for (int oy = 0; oy < g.Ho; ++oy) {
          const int iy = g.ymap[static_cast<std::size_t>(ki) * g.Ho + oy];
          double* drow = dst + static_cast<std::size_t>(oy) * g.Wo;
          if (iy < 0) {
            std::fill(drow, drow + g.Wo, 0.0);
            continue;
          }
          const double* srow = src + static_cast<std::size_t>(iy) * g.W;
          for (int ox = 0; ox < g.Wo; ++ox) {
            const int ix = xm[ox];
            drow[ox] = ix < 0 ? 0.0 : srow[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* img) {
  const std::size_t plane = static_cast<std::size_t>(g.Ho) * g.Wo;
  for (int c = 0; c < g.C; ++c) {
    double* dst = img + static_cast<std::size_t>(c) * g.H * g.W;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const double* src = col + (static_cast<std::size_t>(c) * g.k * g.k + ki * g.k + kj) * plane;
        const int* xm = &g.xmap[static_cast<std::size_t>(kj) * g.Wo];
        for (int oy = 0; oy < g.Ho; ++oy) {
          const int iy = g.ymap[static_cast<std::size_t>(ki) * g.Ho + oy];
          if (iy < 0) continue;
          const double* srow = src + static_cast<std::size_t>(oy) * g.Wo;
          double* drow = dst + static_cast<std::size_t>(iy) * g.W;
          for (int ox = 0; ox < g.Wo; ++ox) {
            const int ix = xm[ox];
            if (ix >= 0) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

Tensor conv2d_dense(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  auto geo = std::make_shared<ConvGeometry>();
  geo->C = xs.c;
  geo->H = xs.h;
  geo->W = xs.w;
  geo->O = ws.n;
  geo->k = ws.h;
  geo->Ho = conv_out_size(xs.h, ws.h, opt.stride, opt.padding);
  geo->Wo = conv_out_size(xs.w, ws.w, opt.stride, opt.padding);
  geo->ymap = tap_map(xs.h, geo->Ho, geo->k, opt.stride, opt.padding, opt.pad_mode);
  geo->xmap = tap_map(xs.w, geo->Wo, geo->k, opt.stride, opt.padding, opt.pad_mode);
  geo->direct = geo->k == 1 && opt.stride == 1 && opt.padding == 0;

  const int rows = geo->C * geo->k * geo->k;
  const int plane = geo->Ho * geo->Wo;
  const std::size_t in_plane = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
  const std::size_t out_plane = static_cast<std::size_t>(geo->O) * plane;
  Shape ys{xs.n, geo->O, geo->Ho, geo->Wo};
  std::vector<double> out(ys.numel());
  // Column buffers are kept for the weight gradient when one will be needed.
  const bool keep = !geo->direct && weight.requires_grad();
  const std::size_t col_size = geo->direct ? 0 : static_cast<std::size_t>(rows) * plane;
  auto cols = std::make_shared<std::vector<double>>(keep ? col_size * xs.n : col_size);
  for (int n = 0; n < xs.n; ++n) {
    const double* img = x.ptr() + n * in_plane;
    const double* cm = img;
    if (!geo->direct) {
      double* col = cols->data() + (keep ? n * col_size : 0);
      im2col(img, *geo, col);
      cm = col;
    }
    double* dst = out.data() + n * out_plane;
    if (bias.defined()) {
      for (int o = 0; o < geo->O; ++o) std::fill(dst + static_cast<std::size_t>(o) * plane, dst + static_cast<std::size_t>(o + 1) * plane, bias.data()[o]);
    }
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, geo->O, plane, rows, 1.0, weight.ptr(), rows, cm, plane,
                bias.defined() ? 1.0 : 0.0, dst, plane);
  }
  Tensor y(ys, std::move(out));
  if (!keep) cols.reset();
  return maybe_record(y, {x, weight, bias}, [x, weight, geo, cols, rows, plane, in_plane, out_plane, xs](std::span<const double> g, GradSlots gin) {
    double* gx = gin[0];
    double* gw = gin[1];
    double* gb = gin[2];
    const std::size_t col_size = static_cast<std::size_t>(rows) * plane;
    std::vector<double> col(geo->direct || cols ? 0 : col_size);
    std::vector<double> dcol(gx && !geo->direct ? static_cast<std::size_t>(rows) * plane : 0);
    for (int n = 0; n < xs.n; ++n) {
      const double* go = g.data() + n * out_plane;
      if (gb) {
        for (int o = 0; o < geo->O; ++o) {
          double s = 0.0;
          const double* row = go + static_cast<std::size_t>(o) * plane;
          for (int p = 0; p < plane; ++p) s += row[p];
          gb[o] += s;
        }
      }
      if (gw) {
        const double* img = x.ptr() + n * in_plane;
        const double* cm = img;
        if (cols) {
          cm = cols->data() + n * col_size;
        } else if (!geo->direct) {
          im2col(img, *geo, col.data());
          cm = col.data();
        }
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, geo->O, rows, plane, 1.0, go, plane, cm, plane, 1.0, gw, rows);
      }
      if (gx) {
        double* dx = gx + n * in_plane;
        if (geo->direct) {
          cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, rows, plane, geo->O, 1.0, weight.ptr(), rows, go, plane, 1.0, dx, plane);
        } else {
          cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, rows, plane, geo->O, 1.0, weight.ptr(), rows, go, plane, 0.0, dcol.data(), plane);
          col2im(dcol.data(), *geo, dx);
        }
      }
    }
  });
}

Tensor conv2d_depthwise(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt) {
  const Shape xs = x.shape();
  const int k = weight.shape().h;
  const int Ho = conv_out_size(xs.h, k, opt.stride, opt.padding);
  const int Wo = conv_out_size(xs.w, k, opt.stride, opt.padding);
  auto ymap = std::make_shared<std::vector<int>>(tap_map(xs.h, Ho, k, opt.stride, opt.padding, opt.pad_mode));
  auto xmap = std::make_shared<std::vector<int>>(tap_map(xs.w, Wo, k, opt.stride, opt.padding, opt.pad_mode));
  Shape ys{xs.n, xs.c, Ho, Wo};
  std::vector<double> out(ys.numel());
  const std::size_t ip = xs.plane();
  const std::size_t op = static_cast<std::size_t>(Ho) * Wo;
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const double* src = x.ptr() + (static_cast<std::size_t>(n) * xs.c + c) * ip;
      const double* w = weight.ptr() + static_cast<std::size_t>(c) * k * k;
      double* dst = out.data() + (static_cast<std::size_t>(n) * xs.c + c) * op;
      const double b = bias.defined() ? bias.data()[c] : 0.0;
      std::fill(dst, dst + op, b);
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          const double wv = w[ki * k + kj];
          const int* xm = &(*xmap)[static_cast<std::size_t>(kj) * Wo];
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = (*ymap)[static_cast<std::size_t>(ki) * Ho + oy];
            if (iy < 0) continue;
            const double* srow = src + static_cast<std::size_t>(iy) * xs.w;
            double* drow = dst + static_cast<std::size_t>(oy) * Wo;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = xm[ox];
              if (ix >= 0) drow[ox] += wv * srow[ix];
            }
          }
        }
      }
    }
  }
  Tensor y(ys, std::move(out));
  return maybe_record(y, {x, weight, bias}, [x, weight, ymap, xmap, xs, k, Ho, Wo, ip, op](std::span<const double> g, GradSlots gin) {
    double* gx = gin[0];
    double* gw = gin[1];
    double* gb = gin[2];
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        const double* src = x.ptr() + (static_cast<std::size_t>(n) * xs.c + c) * ip;
        const double* go = g.data() + (static_cast<std::size_t>(n) * xs.c + c) * op;
        const double* w = weight.ptr() + static_cast<std::size_t>(c) * k * k;
        double* dx = gx ? gx + (static_cast<std::size_t>(n) * xs.c + c) * ip : nullptr;
        if (gb) {
          double s = 0.0;
          for (std::size_t p = 0; p < op; ++p) s += go[p];
          gb[c] += s;
        }
        for (int ki = 0; ki < k; ++ki) {
          for (int kj = 0; kj < k; ++kj) {
            const double wv = w[ki * k + kj];
            const int* xm = &(*xmap)[static_cast<std::size_t>(kj) * Wo];
            double wacc = 0.0;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = (*ymap)[static_cast<std::size_t>(ki) * Ho + oy];
              if (iy < 0) continue;
              const double* srow = src + static_cast<std::size_t>(iy) * xs.w;
              const double* grow = go + static_cast<std::size_t>(oy) * Wo;
              double* drow = dx ? dx + static_cast<std::size_t>(iy) * xs.w : nullptr;
              for (int ox = 0; ox < Wo; ++ox) {
                const int ix = xm[ox];
                if (ix < 0) continue;
                wacc += grow[ox] * srow[ix];
                if (drow) drow[ix] += grow[ox] * wv;
              }
            }
            if (gw) gw[static_cast<std::size_t>(c) * k * k + ki * k + kj] += wacc;
          }
        }
      }
    }
  });
}

}  // namespace

int conv_out_size(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.h != ws.w || ws.h % 2 == 0) throw ContractViolation("conv2d: kernel must be square and odd, got " + ws.str());
  if (opt.stride < 1) throw ContractViolation("conv2d: stride must be positive");
  if (opt.groups != 1 && !(opt.groups == xs.c && ws.n == xs.c && ws.c == 1)) {
    throw ContractViolation("conv2d: only dense or depthwise grouping is supported");
  }
  if (ws.c * opt.groups != xs.c) {
    throw ContractViolation("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                            std::to_string(ws.c * opt.groups));
  }
  if (bias.defined() && bias.shape() != Shape{1, ws.n, 1, 1}) {
    throw ContractViolation("conv2d: bias shape " + bias.shape().str() + " does not match out channels");
  }
  if (opt.pad_mode == PadMode::kReflect && (opt.padding >= xs.h || opt.padding >= xs.w)) {
    throw ContractViolation("conv2d: reflect padding requires padding < spatial size");
  }
  if (xs.h + 2 * opt.padding < ws.h || xs.w + 2 * opt.padding < ws.w) {
    throw ContractViolation("conv2d: input " + xs.str() + " smaller than kernel");
  }
  return opt.groups == 1 ? conv2d_dense(x, weight, bias, opt) : conv2d_depthwise(x, weight, bias, opt);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return maybe_record(Tensor(a.shape(), std::move(out)), {a, b}, [](std::span<const double> g, GradSlots gin) {
    for (int k = 0; k < 2; ++k) {
      if (!gin[k]) continue;
      for (std::size_t i = 0; i < g.size(); ++i) gin[k][i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return maybe_record(Tensor(a.shape(), std::move(out)), {a, b}, [](std::span<const double> g, GradSlots gin) {
    if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return maybe_record(Tensor(a.shape(), std::move(out)), {a, b}, [a, b](std::span<const double> g, GradSlots gin) {
    if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * b.data()[i];
    if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * a.data()[i];
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor elu(const Tensor& x, double alpha) {
  return unary(
      x, [alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); },
      [alpha](double v, double y) { return v > 0.0 ? 1.0 : y + alpha; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor hardswish(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v <= -3.0) return 0.0;
        if (v >= 3.0) return v;
        return v * (v + 3.0) / 6.0;
      },
      [](double v, double) {
        if (v <= -3.0) return 0.0;
        if (v >= 3.0) return 1.0;
        return (2.0 * v + 3.0) / 6.0;
      });
}

Tensor minimum(std::span<const Tensor> xs) {
  if (xs.empty()) throw ContractViolation("minimum: empty input list");
  for (const Tensor& t : xs) require_same_shape(xs[0], t, "minimum");
  const std::size_t n = xs[0].numel();
  std::vector<double> out = xs[0].to_vector();
  auto arg = std::make_shared<std::vector<int>>(n, 0);
  for (std::size_t k = 1; k < xs.size(); ++k) {
    auto d = xs[k].data();
    for (std::size_t i = 0; i < n; ++i) {
      if (d[i] < out[i]) {
        out[i] = d[i];
        (*arg)[i] = static_cast<int>(k);
      }
    }
  }
  return maybe_record(Tensor(xs[0].shape(), std::move(out)), xs, [arg](std::span<const double> g, GradSlots gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      double* slot = gin[static_cast<std::size_t>((*arg)[i])];
      if (slot) slot[i] += g[i];
    }
  });
}


Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  long double s = 0.0L;
  for (double v : x.data()) s += v;
  const std::size_t n = x.numel();
  return maybe_record(Tensor::scalar(static_cast<double>(s)), {x}, [n](std::span<const double> g, GradSlots gin) {
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw ContractViolation("mean of empty tensor");
  long double s = 0.0L;
  for (double v : x.data()) s += v;
  const std::size_t n = x.numel();
  return maybe_record(Tensor::scalar(static_cast<double>(s / static_cast<long double>(n))), {x}, [n](std::span<const double> g, GradSlots gin) {
    const double gi = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += gi;
  });
}

Tensor masked_mean(const Tensor& x, const Tensor& mask) {
  require_same_shape(x, mask, "masked_mean");
  if (mask.requires_grad()) throw ContractViolation("masked_mean: mask must be a constant");
  long double s = 0.0L;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (mask.data()[i] != 0.0) {
      s += x.data()[i];
      ++count;
    }
  }
  const double denom = count == 0 ? 1.0 : static_cast<double>(count);
  return maybe_record(Tensor::scalar(static_cast<double>(s / denom)), {x}, [mask, denom](std::span<const double> g, GradSlots gin) {
    const double gi = g[0] / denom;
    auto m = mask.data();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i] != 0.0) gin[0][i] += gi;
    }
  });
}

Tensor channel_mean(const Tensor& x) {
  require_defined(x, "channel_mean");
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Shape os{s.n, 1, s.h, s.w};
  std::vector<double> out(os.numel(), 0.0);
  for (int n = 0; n < s.n; ++n) {
    double* dst = out.data() + n * plane;
    for (int c = 0; c < s.c; ++c) {
      const double* src = x.ptr() + (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += src[p];
    }
    for (std::size_t p = 0; p < plane; ++p) dst[p] /= s.c;
  }
  return maybe_record(Tensor(os, std::move(out)), {x}, [s, plane](std::span<const double> g, GradSlots gin) {
    for (int n = 0; n < s.n; ++n) {
      const double* go = g.data() + n * plane;
      for (int c = 0; c < s.c; ++c) {
        double* dst = gin[0] + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] += go[p] / s.c;
      }
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_defined(x, "global_avg_pool");
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  if (plane == 0) throw ContractViolation("global_avg_pool: empty spatial extent");
  std::vector<double> out(static_cast<std::size_t>(s.n) * s.c);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    const double* src = x.ptr() + i * plane;
    for (std::size_t p = 0; p < plane; ++p) acc += src[p];
    out[i] = acc / static_cast<double>(plane);
  }
  return maybe_record(Tensor(Shape{s.n, s.c, 1, 1}, std::move(out)), {x}, [plane](std::span<const double> g, GradSlots gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i] / static_cast<double>(plane);
      double* dst = gin[0] + i * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += gi;
    }
  });
}

Tensor concat_channels(std::span<const Tensor> xs) {
  if (xs.empty()) throw ContractViolation("concat_channels: empty input list");
  const Shape s0 = xs[0].shape();
  int total = 0;
  for (const Tensor& t : xs) {
    require_defined(t, "concat_channels");
    const Shape s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ContractViolation("concat_channels: incompatible shapes " + s0.str() + " and " + s.str());
    }
    total += s.c;
  }
  const std::size_t plane = s0.plane();
  Shape os{s0.n, total, s0.h, s0.w};
  std::vector<double> out(os.numel());
  std::vector<int> offsets;
  int off = 0;
  for (const Tensor& t : xs) {
    offsets.push_back(off);
    const int c = t.shape().c;
    for (int n = 0; n < s0.n; ++n) {
      const double* src = t.ptr() + static_cast<std::size_t>(n) * c * plane;
      std::copy(src, src + c * plane, out.data() + (static_cast<std::size_t>(n) * total + off) * plane);
    }
    off += c;
  }
  std::vector<int> chans;
  for (const Tensor& t : xs) chans.push_back(t.shape().c);
  return maybe_record(Tensor(os, std::move(out)), xs, [offsets, chans, total, plane, batch = s0.n](std::span<const double> g, GradSlots gin) {
    for (std::size_t k = 0; k < chans.size(); ++k) {
      if (!gin[k]) continue;
      for (int n = 0; n < batch; ++n) {
        const double* src = g.data() + (static_cast<std::size_t>(n) * total + offsets[k]) * plane;
        double* dst = gin[k] + static_cast<std::size_t>(n) * chans[k] * plane;
        for (std::size_t i = 0; i < chans[k] * plane; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor slice_channels(const Tensor& x, int begin, int count) {
  require_defined(x, "slice_channels");
  const Shape s = x.shape();
  if (begin < 0 || count < 0 || begin + count > s.c) throw ContractViolation("slice_channels: range out of bounds");
  const std::size_t plane = s.plane();
  Shape os{s.n, count, s.h, s.w};
  std::vector<double> out(os.numel());
  for (int n = 0; n < s.n; ++n) {
    const double* src = x.ptr() + (static_cast<std::size_t>(n) * s.c + begin) * plane;
    std::copy(src, src + count * plane, out.data() + static_cast<std::size_t>(n) * count * plane);
  }
  return maybe_record(Tensor(os, std::move(out)), {x}, [s, begin, count, plane](std::span<const double> g, GradSlots gin) {
    for (int n = 0; n < s.n; ++n) {
      const double* src = g.data() + static_cast<std::size_t>(n) * count * plane;
      double* dst = gin[0] + (static_cast<std::size_t>(n) * s.c + begin) * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
}

Tensor scale_channels(const Tensor& x, const Tensor& gate) {
  require_defined(x, "scale_channels");
  const Shape s = x.shape();
  if (gate.shape() != Shape{s.n, s.c, 1, 1}) {
    throw ContractViolation("scale_channels: gate shape " + gate.shape().str() + " incompatible with " + s.str());
  }
  const std::size_t plane = s.plane();
  std::vector<double> out(s.numel());
  for (std::size_t i = 0; i < static_cast<std::size_t>(s.n) * s.c; ++i) {
    const double gv = gate.data()[i];
    for (std::size_t p = 0; p < plane; ++p) out[i * plane + p] = x.data()[i * plane + p] * gv;
  }
  return maybe_record(Tensor(s, std::move(out)), {x, gate}, [x, gate, plane](std::span<const double> g, GradSlots gin) {
    const std::size_t nc = gate.numel();
    for (std::size_t i = 0; i < nc; ++i) {
      const double gv = gate.data()[i];
      double acc = 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = i * plane + p;
        if (gin[0]) gin[0][idx] += g[idx] * gv;
        acc += g[idx] * x.data()[idx];
      }
      if (gin[1]) gin[1][i] += acc;
    }
  });
}

Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "fully_connected");
  require_defined(weight, "fully_connected");
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.h != 1 || xs.w != 1 || ws.h != 1 || ws.w != 1 || ws.c != xs.c) {
    throw ContractViolation("fully_connected: incompatible shapes " + xs.str() + " and " + ws.str());
  }
  if (bias.defined() && bias.shape() != Shape{1, ws.n, 1, 1}) throw ContractViolation("fully_connected: bad bias shape");
  const int in = xs.c;
  const int outc = ws.n;
  std::vector<double> out(static_cast<std::size_t>(xs.n) * outc);
  for (int n = 0; n < xs.n; ++n) {
    for (int o = 0; o < outc; ++o) {
      double acc = bias.defined() ? bias.data()[o] : 0.0;
      for (int i = 0; i < in; ++i) acc += weight.data()[static_cast<std::size_t>(o) * in + i] * x.data()[static_cast<std::size_t>(n) * in + i];
      out[static_cast<std::size_t>(n) * outc + o] = acc;
    }
  }
  return maybe_record(Tensor(Shape{xs.n, outc, 1, 1}, std::move(out)), {x, weight, bias},
                      [x, weight, in, outc, batch = xs.n](std::span<const double> g, GradSlots gin) {
                        for (int n = 0; n < batch; ++n) {
                          for (int o = 0; o < outc; ++o) {
                            const double go = g[static_cast<std::size_t>(n) * outc + o];
                            if (gin[2]) gin[2][o] += go;
                            for (int i = 0; i < in; ++i) {
                              const std::size_t wi = static_cast<std::size_t>(o) * in + i;
                              const std::size_t xi = static_cast<std::size_t>(n) * in + i;
                              if (gin[0]) gin[0][xi] += go * weight.data()[wi];
                              if (gin[1]) gin[1][wi] += go * x.data()[xi];
                            }
                          }
                        }
                      });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                  const Tensor& running_var, bool training, double eps, BatchStats* stats) {
  require_defined(x, "batch_norm");
  const Shape s = x.shape();
  const Shape ps{1, s.c, 1, 1};
  if (gamma.shape() != ps || beta.shape() != ps || running_mean.shape() != ps || running_var.shape() != ps) {
    throw ContractViolation("batch_norm: parameter shapes must be " + ps.str());
  }
  const std::size_t plane = s.plane();
  const std::size_t count = static_cast<std::size_t>(s.n) * plane;
  if (training && count < 2) throw ContractViolation("batch_norm: training mode needs more than one value per channel");
  auto mean_v = std::make_shared<std::vector<double>>(s.c);
  auto invstd = std::make_shared<std::vector<double>>(s.c);
  if (stats) {
    stats->mean.assign(s.c, 0.0);
    stats->var.assign(s.c, 0.0);
  }
  for (int c = 0; c < s.c; ++c) {
    double m, v;
    if (training) {
      double acc = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* src = x.ptr() + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) acc += src[p];
      }
      m = acc / static_cast<double>(count);
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* src = x.ptr() + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) sq += (src[p] - m) * (src[p] - m);
      }
      v = sq / static_cast<double>(count);
      if (stats) {
        stats->mean[c] = m;
        stats->var[c] = sq / static_cast<double>(count - 1);
      }
    } else {
      m = running_mean.data()[c];
      v = running_var.data()[c];
    }
    (*mean_v)[c] = m;
    (*invstd)[c] = 1.0 / std::sqrt(v + eps);
  }
  std::vector<double> out(s.numel());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
      const double m = (*mean_v)[c], is = (*invstd)[c], gm = gamma.data()[c], bt = beta.data()[c];
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = gm * (x.data()[base + p] - m) * is + bt;
    }
  }
  return maybe_record(Tensor(s, std::move(out)), {x, gamma, beta},
                      [x, gamma, mean_v, invstd, training, s, plane, count](std::span<const double> g, GradSlots gin) {
                        for (int c = 0; c < s.c; ++c) {
                          const double m = (*mean_v)[c], is = (*invstd)[c], gm = gamma.data()[c];
                          double sum_g = 0.0, sum_gx = 0.0;
                          for (int n = 0; n < s.n; ++n) {
                            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
                            for (std::size_t p = 0; p < plane; ++p) {
                              const double xhat = (x.data()[base + p] - m) * is;
                              sum_g += g[base + p];
                              sum_gx += g[base + p] * xhat;
                            }
                          }
                          if (gin[1]) gin[1][c] += sum_gx;
                          if (gin[2]) gin[2][c] += sum_g;
                          if (!gin[0]) continue;
                          const double inv_n = 1.0 / static_cast<double>(count);
                          for (int n = 0; n < s.n; ++n) {
                            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
                            for (std::size_t p = 0; p < plane; ++p) {
                              const double gi = g[base + p];
                              if (training) {
                                const double xhat = (x.data()[base + p] - m) * is;
                                gin[0][base + p] += gm * is * (gi - inv_n * sum_g - xhat * inv_n * sum_gx);
                              } else {
                                gin[0][base + p] += gm * is * gi;
                              }
                            }
                          }
                        }
                      });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
  require_defined(x, "max_pool2d");
  const Shape s = x.shape();
  const int Ho = conv_out_size(s.h, kernel, stride, padding);
  const int Wo = conv_out_size(s.w, kernel, stride, padding);
  if (Ho < 1 || Wo < 1) throw ContractViolation("max_pool2d: input too small");
  Shape os{s.n, s.c, Ho, Wo};
  std::vector<double> out(os.numel());
  auto arg = std::make_shared<std::vector<std::size_t>>(os.numel());
  const std::size_t plane = s.plane();
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc) {
    const double* src = x.ptr() + nc * plane;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= s.w) continue;
            const double v = src[static_cast<std::size_t>(iy) * s.w + ix];
            if (v > best) {
              best = v;
              best_i = static_cast<std::size_t>(iy) * s.w + ix;
            }
          }
        }
        const std::size_t o = nc * Ho * Wo + static_cast<std::size_t>(oy) * Wo + ox;
        out[o] = best;
        (*arg)[o] = nc * plane + best_i;
      }
    }
  }
  return maybe_record(Tensor(os, std::move(out)), {x}, [arg](std::span<const double> g, GradSlots gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][(*arg)[i]] += g[i];
  });
}

namespace {

struct Tap {
  int i0, i1;
  double frac;
};

// Half-pixel source taps for resizing `in` samples to `out` samples.
std::vector<Tap> resize_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  require_defined(x, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ContractViolation("bilinear_resize: output size must be positive");
  const Shape s = x.shape();
  if (s.h == out_h && s.w == out_w) {
    return maybe_record(x.detach(), {x}, [](std::span<const double> g, GradSlots gin) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    });
  }
  auto ty = std::make_shared<std::vector<Tap>>(resize_taps(s.h, out_h));
  auto tx = std::make_shared<std::vector<Tap>>(resize_taps(s.w, out_w));
  Shape os{s.n, s.c, out_h, out_w};
  std::vector<double> out(os.numel());
  const std::size_t ip = s.plane();
  const std::size_t op = os.plane();
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc) {
    const double* src = x.ptr() + nc * ip;
    double* dst = out.data() + nc * op;
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& a = (*ty)[oy];
      const double* r0 = src + static_cast<std::size_t>(a.i0) * s.w;
      const double* r1 = src + static_cast<std::size_t>(a.i1) * s.w;
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& b = (*tx)[ox];
        const double top = r0[b.i0] + b.frac * (r0[b.i1] - r0[b.i0]);
        const double bot = r1[b.i0] + b.frac * (r1[b.i1] - r1[b.i0]);
        dst[static_cast<std::size_t>(oy) * out_w + ox] = top + a.frac * (bot - top);
      }
    }
  }
  return maybe_record(Tensor(os, std::move(out)), {x}, [ty, tx, s, ip, op, out_h, out_w](std::span<const double> g, GradSlots gin) {
    for (std::size_t nc = 0; nc < static_cast<std::size_t>(s.n) * s.c; ++nc) {
      double* dst = gin[0] + nc * ip;
      const double* go = g.data() + nc * op;
      for (int oy = 0; oy < out_h; ++oy) {
        const Tap& a = (*ty)[oy];
        double* r0 = dst + static_cast<std::size_t>(a.i0) * s.w;
        double* r1 = dst + static_cast<std::size_t>(a.i1) * s.w;
        for (int ox = 0; ox < out_w; ++ox) {
          const Tap& b = (*tx)[ox];
          const double gv = go[static_cast<std::size_t>(oy) * out_w + ox];
          const double gt = gv * (1.0 - a.frac);
          const double gbm = gv * a.frac;
          r0[b.i0] += gt * (1.0 - b.frac);
          r0[b.i1] += gt * b.frac;
          r1[b.i0] += gbm * (1.0 - b.frac);
          r1[b.i1] += gbm * b.frac;
        }
      }
    }
  });
}

namespace {

struct SamplePoint {
  int x0, x1, y0, y1;
  double fx, fy;
  // Validity of each corner for zero padding.
  bool vx0, vx1, vy0, vy1;
  // d(pixel coordinate)/d(normalised coordinate); zero where clamped.
  double dxdu, dydv;
};

constexpr double kSnap = 1e-9;

double snap(double p) {
  const double r = std::round(p);
  return std::abs(p - r) <= kSnap ? r : p;
}

SamplePoint locate(double u, double v, int W, int H, bool border) {
  SamplePoint sp{};
  double px = snap(normalized_to_pixel(u, W));
  double py = snap(normalized_to_pixel(v, H));
  sp.dxdu = W / 2.0;
  sp.dydv = H / 2.0;
  if (border) {
    if (px <= 0.0) {
      if (px < 0.0) sp.dxdu = 0.0;
      px = 0.0;
    } else if (px >= W - 1) {
      if (px > W - 1) sp.dxdu = 0.0;
      px = W - 1;
    }
    if (py <= 0.0) {
      if (py < 0.0) sp.dydv = 0.0;
      py = 0.0;
    } else if (py >= H - 1) {
      if (py > H - 1) sp.dydv = 0.0;
      py = H - 1;
    }
    sp.x0 = std::min(static_cast<int>(std::floor(px)), W - 1);
    sp.y0 = std::min(static_cast<int>(std::floor(py)), H - 1);
    sp.x1 = std::min(sp.x0 + 1, W - 1);
    sp.y1 = std::min(sp.y0 + 1, H - 1);
    sp.fx = px - sp.x0;
    sp.fy = py - sp.y0;
    sp.vx0 = sp.vx1 = sp.vy0 = sp.vy1 = true;
  } else {
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    sp.fx = px - fx0;
    sp.fy = py - fy0;
    // Coordinates far outside the image read zeros; keep indices in int range.
    const double cx0 = std::clamp(fx0, -2.0, static_cast<double>(W) + 1.0);
    const double cy0 = std::clamp(fy0, -2.0, static_cast<double>(H) + 1.0);
    sp.x0 = static_cast<int>(cx0);
    sp.y0 = static_cast<int>(cy0);
    sp.x1 = sp.x0 + 1;
    sp.y1 = sp.y0 + 1;
    sp.vx0 = sp.x0 >= 0 && sp.x0 < W;
    sp.vx1 = sp.x1 >= 0 && sp.x1 < W;
    sp.vy0 = sp.y0 >= 0 && sp.y0 < H;
    sp.vy1 = sp.y1 >= 0 && sp.y1 < H;
  }
  return sp;
}

}  // namespace

Tensor grid_sample_bilinear(const Tensor& x, const Tensor& grid, bool border_clamp) {
  require_defined(x, "grid_sample_bilinear");
  require_defined(grid, "grid_sample_bilinear");
  const Shape s = x.shape();
  const Shape gs = grid.shape();
  if (gs.c != 2 || gs.n != s.n) throw ContractViolation("grid_sample_bilinear: grid must be (N, 2, H, W), got " + gs.str());
  for (double v : grid.data()) {
    if (!std::isfinite(v)) throw ContractViolation("grid_sample_bilinear: non-finite grid entry");
  }
  const int H = s.h, W = s.w;
  const std::size_t gp = gs.plane();
  const std::size_t ip = s.plane();
  auto pts = std::make_shared<std::vector<SamplePoint>>(static_cast<std::size_t>(gs.n) * gp);
  for (int n = 0; n < gs.n; ++n) {
    const double* gu = grid.ptr() + static_cast<std::size_t>(n) * 2 * gp;
    const double* gv = gu + gp;
    for (std::size_t p = 0; p < gp; ++p) (*pts)[n * gp + p] = locate(gu[p], gv[p], W, H, border_clamp);
  }
  Shape os{s.n, s.c, gs.h, gs.w};
  std::vector<double> out(os.numel());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = x.ptr() + (static_cast<std::size_t>(n) * s.c + c) * ip;
      double* dst = out.data() + (static_cast<std::size_t>(n) * s.c + c) * gp;
      for (std::size_t p = 0; p < gp; ++p) {
        const SamplePoint& sp = (*pts)[n * gp + p];
        auto at = [&](int yy, int xx, bool vy, bool vx) { return (vy && vx) ? src[static_cast<std::size_t>(yy) * W + xx] : 0.0; };
        const double v00 = at(sp.y0, sp.x0, sp.vy0, sp.vx0), v01 = at(sp.y0, sp.x1, sp.vy0, sp.vx1);
        const double v10 = at(sp.y1, sp.x0, sp.vy1, sp.vx0), v11 = at(sp.y1, sp.x1, sp.vy1, sp.vx1);
        const double top = v00 + sp.fx * (v01 - v00);
        const double bot = v10 + sp.fx * (v11 - v10);
        dst[p] = top + sp.fy * (bot - top);
      }
    }
  }
  return maybe_record(Tensor(os, std::move(out)), {x, grid}, [x, pts, s, gp, ip, W](std::span<const double> g, GradSlots gin) {
    double* gx = gin[0];
    double* gg = gin[1];
    for (int n = 0; n < s.n; ++n) {
      double* gu = gg ? gg + static_cast<std::size_t>(n) * 2 * gp : nullptr;
      double* gvv = gg ? gu + gp : nullptr;
      for (int c = 0; c < s.c; ++c) {
        const double* src = x.ptr() + (static_cast<std::size_t>(n) * s.c + c) * ip;
        double* dsrc = gx ? gx + (static_cast<std::size_t>(n) * s.c + c) * ip : nullptr;
        const double* go = g.data() + (static_cast<std::size_t>(n) * s.c + c) * gp;
        for (std::size_t p = 0; p < gp; ++p) {
          const SamplePoint& sp = (*pts)[n * gp + p];
          const double gv = go[p];
          if (gv == 0.0) continue;
          auto idx = [&](int yy, int xx) { return static_cast<std::size_t>(yy) * W + xx; };
          const bool c00 = sp.vy0 && sp.vx0, c01 = sp.vy0 && sp.vx1, c10 = sp.vy1 && sp.vx0, c11 = sp.vy1 && sp.vx1;
          if (dsrc) {
            if (c00) dsrc[idx(sp.y0, sp.x0)] += gv * (1.0 - sp.fy) * (1.0 - sp.fx);
            if (c01) dsrc[idx(sp.y0, sp.x1)] += gv * (1.0 - sp.fy) * sp.fx;
            if (c10) dsrc[idx(sp.y1, sp.x0)] += gv * sp.fy * (1.0 - sp.fx);
            if (c11) dsrc[idx(sp.y1, sp.x1)] += gv * sp.fy * sp.fx;
          }
          if (gu) {
            const double v00 = c00 ? src[idx(sp.y0, sp.x0)] : 0.0, v01 = c01 ? src[idx(sp.y0, sp.x1)] : 0.0;
            const double v10 = c10 ? src[idx(sp.y1, sp.x0)] : 0.0, v11 = c11 ? src[idx(sp.y1, sp.x1)] : 0.0;
            const double ddx = (1.0 - sp.fy) * (v01 - v00) + sp.fy * (v11 - v10);
            const double top = v00 + sp.fx * (v01 - v00);
            const double bot = v10 + sp.fx * (v11 - v10);
            const double ddy = bot - top;
            gu[p] += gv * ddx * sp.dxdu;
            gvv[p] += gv * ddy * sp.dydv;
          }
        }
      }
    }
  });
}

}  // namespace hrdepth
