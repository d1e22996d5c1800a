#include "hrdepth/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "hrdepth/ops.hpp"

namespace hrdepth {

double median(std::vector<double> v) {
  if (v.empty()) throw ContractViolation("median of an empty sample");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

std::vector<char> valid_mask(const Tensor& gt, bool eigen_crop) {
  const Shape s = gt.shape();
  auto g = gt.data();
  std::vector<char> m(g.size());
  const int y0 = eigen_crop ? static_cast<int>(0.40810811 * s.h) : 0;
  const int y1 = eigen_crop ? static_cast<int>(0.99189189 * s.h) : s.h;
  const int x0 = eigen_crop ? static_cast<int>(0.03594771 * s.w) : 0;
  const int x1 = eigen_crop ? static_cast<int>(0.96405229 * s.w) : s.w;
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const std::size_t i = (static_cast<std::size_t>(n) * s.h + y) * s.w + x;
        m[i] = g[i] > 0 && y >= y0 && y < y1 && x >= x0 && x < x1;
      }
  return m;
}

DepthMetrics depth_metrics(const Tensor& pred, const Tensor& gt, const MetricOptions& opt) {
  if (pred.shape() != gt.shape()) throw ContractViolation("depth_metrics: shape mismatch " + pred.shape().str() + " vs " + gt.shape().str());
  if (gt.shape().c != 1) throw ContractViolation("depth_metrics: expected single-channel depth");
  if (!(opt.cap > 0) || !(opt.min_pred > 0) || opt.min_pred >= opt.cap) throw ContractViolation("depth_metrics: bad clamp range");
  auto mask = valid_mask(gt, opt.eigen_crop);
  if (opt.gt_within_cap) {
    auto g = gt.data();
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] && g[i] <= opt.cap;
  }
  std::vector<double> p, g;
  auto pd = pred.data(), gd = gt.data();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      p.push_back(pd[i]);
      g.push_back(gd[i]);
    }
  if (g.empty()) throw ContractViolation("depth_metrics: no valid ground-truth pixels");

  if (opt.median_scale) {
    const double mp = median(p), mg = median(g);
    if (!(mp > 0)) throw ContractViolation("depth_metrics: non-positive median prediction");
    const double ratio = mg / mp;
    for (double& v : p) v *= ratio;
  }
  for (double& v : p) v = std::clamp(v, opt.min_pred, opt.cap);

  const std::size_t n = g.size();
  std::vector<double> diff(n);
  std::transform(p.begin(), p.end(), g.begin(), diff.begin(), [](double a, double b) { return a - b; });
  auto mean_of = [n](auto begin, auto end, auto f) {
    double s = 0;
    for (auto it = begin; it != end; ++it) s += f(*it);
    return s / static_cast<double>(n);
  };
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  DepthMetrics m;
  m.count = n;
  m.abs_rel = mean_of(idx.begin(), idx.end(), [&](std::size_t i) { return std::abs(diff[i]) / g[i]; });
  m.sq_rel = mean_of(idx.begin(), idx.end(), [&](std::size_t i) { return diff[i] * diff[i] / g[i]; });
  m.rmse = std::sqrt(mean_of(idx.begin(), idx.end(), [&](std::size_t i) { return diff[i] * diff[i]; }));
  m.rmse_log = std::sqrt(mean_of(idx.begin(), idx.end(), [&](std::size_t i) {
    const double d = std::log(p[i]) - std::log(g[i]);
    return d * d;
  }));
  const double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
  std::size_t c1 = 0, c2 = 0, c3 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::max(p[i] / g[i], g[i] / p[i]);
    c1 += r < t1;
    c2 += r < t2;
    c3 += r < t3;
  }
  m.delta1 = static_cast<double>(c1) / static_cast<double>(n);
  m.delta2 = static_cast<double>(c2) / static_cast<double>(n);
  m.delta3 = static_cast<double>(c3) / static_cast<double>(n);
  return m;
}

// ---------------------------------------------------------------- bands

std::vector<const GradientBand*> GradientBandReport::populated() const {
  std::vector<const GradientBand*> out;
  for (const GradientBand& b : bands)
    if (b.count > 0) out.push_back(&b);
  return out;
}

std::vector<double> gradient_magnitude(const Tensor& gt) {
  const Shape s = gt.shape();
  if (s.n != 1 || s.c != 1) throw ContractViolation("gradient_magnitude expects (1, 1, H, W), got " + s.str());
  auto g = gt.data();
  std::vector<double> mag(g.size(), 0.0);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * s.w + x;
      if (!(g[i] > 0)) continue;
      double gx = 0, gy = 0;
      if (x + 1 < s.w && g[i + 1] > 0) gx = g[i + 1] - g[i];
      if (y + 1 < s.h && g[i + s.w] > 0) gy = g[i + s.w] - g[i];
      mag[i] = std::sqrt(gx * gx + gy * gy);
    }
  return mag;
}

GradientBandReport interp_gap_analysis(const Tensor& hr_depth, const Tensor& gt, int downscale, int num_bands) {
  const Shape s = gt.shape();
  if (hr_depth.shape() != s) throw ContractViolation("interp_gap_analysis: shape mismatch");
  if (s.n != 1 || s.c != 1) throw ContractViolation("interp_gap_analysis expects (1, 1, H, W)");
  if (downscale != 2 && downscale != 4 && downscale != 8) throw ContractViolation("downscale must be 2, 4 or 8");
  if (s.h % downscale != 0 || s.w % downscale != 0) throw ContractViolation("downscale must divide the image size");
  if (num_bands < 1) throw ContractViolation("num_bands must be >= 1");

  const int lh = s.h / downscale, lw = s.w / downscale;
  const Tensor lr = bilinear_resize(hr_depth, lh, lw);
  const Tensor up = bilinear_resize(lr, s.h, s.w);
  const auto mag = gradient_magnitude(gt);
  auto g = gt.data(), hr = hr_depth.data(), lv = lr.data(), uv = up.data();

  GradientBandReport r;
  r.downscale = downscale;
  r.width = s.w;
  r.height = s.h;
  r.up_error.assign(g.size(), 0.0);
  r.band_of.assign(g.size(), -1);

  std::vector<double> sorted;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] > 0) sorted.push_back(mag[i]);
  r.valid = sorted.size();
  if (sorted.empty()) throw ContractViolation("interp_gap_analysis: no valid ground-truth pixels");
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  // Thresholds at the k/B lower quantiles; band b holds t_b < |grad| <= t_{b+1}.
  std::vector<double> cut(static_cast<std::size_t>(num_bands) + 1);
  cut.front() = sorted.front();
  cut.back() = sorted.back();
  for (int k = 1; k < num_bands; ++k) {
    const std::size_t pos = (static_cast<std::size_t>(k) * n + num_bands - 1) / static_cast<std::size_t>(num_bands);
    cut[k] = sorted[std::max<std::size_t>(pos, 1) - 1];
  }
  r.bands.resize(static_cast<std::size_t>(num_bands));
  for (int b = 0; b < num_bands; ++b) {
    r.bands[b].lo = cut[b];
    r.bands[b].hi = cut[b + 1];
  }
  std::vector<double> hr_sum(num_bands, 0.0), lr_sum(num_bands, 0.0), up_sum(num_bands, 0.0);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * s.w + x;
      if (!(g[i] > 0)) continue;
      int b = 0;
      while (b + 1 < num_bands && mag[i] > cut[b + 1]) ++b;
      const std::size_t li = static_cast<std::size_t>(std::min(y / downscale, lh - 1)) * lw + std::min(x / downscale, lw - 1);
      const double e_hr = std::abs(hr[i] - g[i]) / g[i];
      const double e_lr = std::abs(lv[li] - g[i]) / g[i];
      const double e_up = std::abs(uv[i] - g[i]) / g[i];
      r.band_of[i] = b;
      r.up_error[i] = e_up;
      ++r.bands[b].count;
      hr_sum[b] += e_hr;
      lr_sum[b] += e_lr;
      up_sum[b] += e_up;
    }
  for (int b = 0; b < num_bands; ++b) {
    GradientBand& band = r.bands[b];
    if (band.count == 0) continue;
    const double c = static_cast<double>(band.count);
    band.hr_abs_rel = hr_sum[b] / c;
    band.lr_abs_rel = lr_sum[b] / c;
    band.up_abs_rel = up_sum[b] / c;
  }
  return r;
}

// ---------------------------------------------------------------- reports

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::map<std::string, std::string> split_pairs(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) throw ContractViolation("malformed report token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

const std::string& field(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ContractViolation("report line lacks " + key);
  return it->second;
}

double num(const std::map<std::string, std::string>& kv, const std::string& key) {
  const std::string& v = field(kv, key);
  std::size_t used = 0;
  const double d = std::stod(v, &used);
  if (used != v.size()) throw ContractViolation("bad number for " + key + ": " + v);
  return d;
}

}  // namespace

std::string metrics_table(const std::vector<MetricsRow>& rows) {
  std::size_t wm = 6;
  for (const auto& r : rows) wm = std::max(wm, r.method.size());
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %10s %8s %8s %8s %8s %8s %8s %8s\n", static_cast<int>(wm), "method", "resolution",
                "abs_rel", "sq_rel", "rmse", "rmse_log", "d<1.25", "d<1.25^2", "d<1.25^3");
  os << buf;
  for (const auto& r : rows) {
    const std::string res = std::to_string(r.width) + "x" + std::to_string(r.height);
    const DepthMetrics& m = r.metrics;
    std::snprintf(buf, sizeof buf, "%-*s %10s %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f\n", static_cast<int>(wm),
                  r.method.c_str(), res.c_str(), m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3);
    os << buf;
  }
  return os.str();
}

std::string metrics_key_values(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  for (const auto& r : rows) {
    if (r.method.empty() || r.method.find_first_of(" \t\n=") != std::string::npos)
      throw ContractViolation("method names must be non-empty and free of whitespace and '='");
    const DepthMetrics& m = r.metrics;
    os << "method=" << r.method << " width=" << r.width << " height=" << r.height << " count=" << m.count
       << " abs_rel=" << fmt(m.abs_rel) << " sq_rel=" << fmt(m.sq_rel) << " rmse=" << fmt(m.rmse)
       << " rmse_log=" << fmt(m.rmse_log) << " delta1=" << fmt(m.delta1) << " delta2=" << fmt(m.delta2)
       << " delta3=" << fmt(m.delta3) << "\n";
  }
  return os.str();
}

std::vector<MetricsRow> parse_metrics_key_values(const std::string& text) {
  std::vector<MetricsRow> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto kv = split_pairs(line);
    MetricsRow r;
    r.method = field(kv, "method");
    r.width = std::stoi(field(kv, "width"));
    r.height = std::stoi(field(kv, "height"));
    r.metrics.count = std::stoull(field(kv, "count"));
    r.metrics.abs_rel = num(kv, "abs_rel");
    r.metrics.sq_rel = num(kv, "sq_rel");
    r.metrics.rmse = num(kv, "rmse");
    r.metrics.rmse_log = num(kv, "rmse_log");
    r.metrics.delta1 = num(kv, "delta1");
    r.metrics.delta2 = num(kv, "delta2");
    r.metrics.delta3 = num(kv, "delta3");
    rows.push_back(r);
  }
  return rows;
}

std::string band_table(const GradientBandReport& r) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "downscale %d, %zu valid pixels\n%4s %12s %12s %9s %10s %10s %10s\n", r.downscale,
                r.valid, "band", "grad_lo", "grad_hi", "pixels", "hr", "lr", "lr_up");
  os << buf;
  for (std::size_t b = 0; b < r.bands.size(); ++b) {
    const GradientBand& g = r.bands[b];
    std::snprintf(buf, sizeof buf, "%4zu %12.5g %12.5g %9zu %10.5f %10.5f %10.5f\n", b, g.lo, g.hi, g.count, g.hr_abs_rel,
                  g.lr_abs_rel, g.up_abs_rel);
    os << buf;
  }
  return os.str();
}

std::string band_key_values(const GradientBandReport& r) {
  std::ostringstream os;
  os << "downscale=" << r.downscale << " valid=" << r.valid << " bands=" << r.bands.size() << "\n";
  for (std::size_t b = 0; b < r.bands.size(); ++b) {
    const GradientBand& g = r.bands[b];
    os << "band=" << b << " lo=" << fmt(g.lo) << " hi=" << fmt(g.hi) << " count=" << g.count
       << " hr_abs_rel=" << fmt(g.hr_abs_rel) << " lr_abs_rel=" << fmt(g.lr_abs_rel)
       << " up_abs_rel=" << fmt(g.up_abs_rel) << "\n";
  }
  return os.str();
}

GradientBandReport parse_band_key_values(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  GradientBandReport r;
  if (!std::getline(is, line)) throw ContractViolation("empty band report");
  const auto head = split_pairs(line);
  r.downscale = std::stoi(field(head, "downscale"));
  r.valid = std::stoull(field(head, "valid"));
  const std::size_t count = std::stoull(field(head, "bands"));
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto kv = split_pairs(line);
    GradientBand g;
    g.lo = num(kv, "lo");
    g.hi = num(kv, "hi");
    g.count = std::stoull(field(kv, "count"));
    g.hr_abs_rel = num(kv, "hr_abs_rel");
    g.lr_abs_rel = num(kv, "lr_abs_rel");
    g.up_abs_rel = num(kv, "up_abs_rel");
    r.bands.push_back(g);
  }
  if (r.bands.size() != count) throw ContractViolation("band report lists a different number of bands");
  return r;
}

Tensor band_image(const GradientBandReport& r) {
  const std::size_t P = static_cast<std::size_t>(r.width) * r.height;
  if (r.up_error.size() != P || r.band_of.size() != P) throw ContractViolation("band_image: report lacks per-pixel data");
  double mx = 0;
  for (double e : r.up_error) mx = std::max(mx, e);
  const double nb = std::max<double>(1.0, static_cast<double>(r.bands.size()) - 1.0);
  std::vector<double> v(3 * P, 0.0);
  for (std::size_t i = 0; i < P; ++i) {
    if (r.band_of[i] < 0) continue;
    v[i] = mx > 0 ? r.up_error[i] / mx : 0.0;
    v[P + i] = r.band_of[i] / nb;
    v[2 * P + i] = 0.25;
  }
  return Tensor(Shape{1, 3, r.height, r.width}, std::move(v));
}

}  // namespace hrdepth
