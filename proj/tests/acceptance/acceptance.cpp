// Acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hrdepth/arch.hpp"
#include "hrdepth/data.hpp"
#include "hrdepth/evaluation.hpp"
#include "hrdepth/geometry.hpp"
#include "hrdepth/grad_suite.hpp"
#include "hrdepth/gradcheck.hpp"
#include "hrdepth/losses.hpp"
#include "hrdepth/ops.hpp"
#include "hrdepth/rng.hpp"
#include "hrdepth/training.hpp"

using namespace hrdepth;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Outcome fusion_exactness() {
  Outcome o;
  Rng rng(2024);
  int checked = 0;
  for (int k = 0; k < 10; ++k) {
    const int c_in = 4 * static_cast<int>(1 + rng.below(128));
    const int c_out = static_cast<int>(1 + rng.below(256));
    const std::size_t fse_expect = static_cast<std::size_t>(2 * c_in * c_in / 4 + (c_in + 1) * c_out);
    const std::size_t conv_expect = static_cast<std::size_t>(c_in * c_out * 9 + c_out);
    for (auto [kind, expect] : {std::pair{FusionKind::kFse, fse_expect}, std::pair{FusionKind::kConv3x3, conv_expect}}) {
      ParamStore store;
      Rng init(k);
      const FuseBlockSpec spec{.c_in = c_in, .c_out = c_out, .kind = kind, .r = 4};
      FuseBlock block(store, "f", spec, init);
      const std::string tag = to_string(kind) + " " + std::to_string(c_in) + "->" + std::to_string(c_out);
      o.require(store.count() == expect, tag + " counted " + std::to_string(store.count()) + " expected " + std::to_string(expect));
      o.require(fuse_params_closed_form(spec) == expect, tag + " closed form");
      ++checked;
    }
  }
  o.note(std::to_string(checked) + " blocks exact");
  return o;
}

// ---------------------------------------------------------------- 2

Outcome parameter_budgets() {
  Outcome o;
  auto within = [&](const std::string& name, std::size_t got, double target, double tol) {
    const double rel = (static_cast<double>(got) - target) / target;
    o.require(std::abs(rel) <= tol, name);
    o.note(name + " " + fmt("%.3fM", got / 1e6) + " (" + fmt("%+.1f%%", 100 * rel) + ")");
  };
  const std::size_t fse = count_params(DepthNet(hr_depth_res18(FusionKind::kFse), 1)).total;
  const std::size_t conv = count_params(DepthNet(hr_depth_res18(FusionKind::kConv3x3), 1)).total;
  const std::size_t base = count_params(DepthNet(baseline_unet(), 1)).total;
  AuditTable lite = count_params(DepthNet(hr_depth_lite(), 1));
  within("fse-dense", fse, 14.62e6, 0.05);
  within("conv3x3-dense", conv, 16.06e6, 0.05);
  within("baseline", base, 14.84e6, 0.05);
  within("lite", lite.total, 3.1e6, 0.10);
  within("lite encoder", lite.subtotals["encoder"], 2.82e6, 0.10);
  o.require(conv > base && base > fse && fse > lite.total, "ordering conv3x3 > baseline > fse > lite");
  return o;
}

// ---------------------------------------------------------------- 3

Outcome gradient_suite() {
  Outcome o;
  const auto results = run_grad_suite(10);
  double worst = 0;
  std::set<std::string> groups;
  for (const auto& r : results) {
    groups.insert(r.group);
    o.require(r.error.empty(), r.name + ": " + r.error);
    o.require(r.worst <= 1e-5, r.name + " max rel " + fmt("%.2e", r.worst));
    worst = std::max(worst, r.worst);
  }
  for (const char* g : {"op", "geometry", "loss", "network"}) o.require(groups.count(g) == 1, std::string("group ") + g + " covered");
  o.note(std::to_string(results.size()) + " checks x 10 seeds, worst " + fmt("%.2e", worst));
  return o;
}

// ---------------------------------------------------------------- 4

Outcome loss_identities() {
  Outcome o;
  const Tensor img = random_tensor(Shape{2, 3, 16, 24}, 11, 0, 1);
  double r_max = 0;
  for (double v : photometric_error(img, img).to_vector()) r_max = std::max(r_max, std::abs(v));
  o.require(r_max == 0.0, "r(I,I) = 0");
  o.require(smoothness(Tensor(Shape{2, 1, 16, 24}, 0.37), img).item() == 0.0, "smoothness(constant) = 0");

  // Two-scale total loss against a hand composition from the primitives.
  ViewBatch b;
  b.target = random_tensor(Shape{1, 3, 16, 24}, 12, 0, 1);
  for (int j = 0; j < 2; ++j) {
    b.sources.push_back(random_tensor(Shape{1, 3, 16, 24}, 13 + j, 0, 1));
    b.poses.push_back(random_tensor(Shape{1, 6, 1, 1}, 15 + j, -0.05, 0.05));
  }
  b.K = CameraIntrinsics::centered(0.58 * 24, 1.92 * 16, 24, 16);
  const Tensor d[] = {random_tensor(Shape{1, 1, 16, 24}, 17, 0.05, 0.5), random_tensor(Shape{1, 1, 8, 12}, 18, 0.05, 0.5)};
  LossConfig cfg;
  cfg.num_scales = 2;
  const double lambda = cfg.lambda_smooth;
  double hand = 0;
  bool min_ok = true;
  for (int s = 0; s < 2; ++s) {
    const Tensor full = bilinear_resize(d[s], 16, 24);
    std::vector<Tensor> errs;
    for (int j = 0; j < 2; ++j)
      errs.push_back(photometric_error(b.target, synthesize_view(b.sources[j], warp_grid(disp_to_depth(full), b.K, b.poses[j]).grid)));
    const double re = mean(min_reprojection(errs)).item();
    for (const Tensor& e : errs) min_ok = min_ok && re <= mean(e).item();
    const Tensor small = bilinear_resize(b.target, d[s].shape().h, d[s].shape().w);
    hand += re + lambda * smoothness(d[s], small).item();
  }
  hand /= 2;
  const double got = total_loss(d, b, cfg).total.item();
  o.require(std::abs(got - hand) <= 1e-12, "two-scale total vs hand composition");
  o.require(min_ok, "min reprojection <= each source mean");
  o.note("|total - hand| = " + fmt("%.1e", std::abs(got - hand)));
  return o;
}

// ---------------------------------------------------------------- 5

Outcome geometry_checks() {
  Outcome o;
  const int H = 96, W = 320;
  const CameraIntrinsics K = CameraIntrinsics::centered(0.58 * W, 1.92 * H, W, H);

  const Tensor depth = random_tensor(Shape{1, 1, H, W}, 21, 0.5, 80.0);
  const Tensor src = random_tensor(Shape{1, 3, H, W}, 22, 0, 1);
  const WarpResult id = warp_grid(depth, K, Tensor(Shape{1, 6, 1, 1}, 0.0));
  o.require(synthesize_view(src, id.grid).to_vector() == src.to_vector(), "identity warp bit-exact");

  double round = 0;
  Rng rng(23);
  for (int k = 0; k < 1000; ++k) {
    const double x = rng.uniform(0, W - 1), y = rng.uniform(0, H - 1), dd = rng.uniform(0.1, 100);
    const auto uv = project(backproject(x, y, dd, K), K);
    round = std::max({round, std::abs(uv[0] - x), std::abs(uv[1] - y)});
  }
  o.require(round <= 1e-12, "back-project/project round trip");

  double shift_err = 0;
  for (double dd : {2.0, 7.5, 40.0})
    for (double tx : {-0.3, 0.1, 0.54}) {
      const WarpResult w = warp_grid(Tensor(Shape{1, 1, H, W}, dd), K, std::vector<Mat4>{stereo_transform(tx)});
      const double shift = K.fx * tx / dd;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          shift_err = std::max(shift_err, std::abs(normalized_to_pixel(w.grid.at(0, 0, i, j), W) - j - shift));
          shift_err = std::max(shift_err, std::abs(normalized_to_pixel(w.grid.at(0, 1, i, j), H) - i));
        }
    }
  o.require(shift_err <= 1e-9, "horizontal shift fx*tx/d");
  o.note("round trip " + fmt("%.1e", round) + ", shift " + fmt("%.1e", shift_err));
  return o;
}

// ---------------------------------------------------------------- 6, 7

TrainConfig toy_config() {
  TrainConfig c;
  c.arch = "toy-res18";
  c.width = 320;
  c.height = 96;
  c.frames = 27;
  c.epochs = 20;
  c.decay_epoch = 15;
  c.max_steps = 500;
  c.seed = 1;
  return c;
}

std::optional<Checkpoint> g_teacher;  // produced by criterion 6, reused by 7

/// Fraction of pixels whose disparity sits on the correct side of the
/// midpoint between the near and far plane medians.
double plane_order_fraction(const DepthNet& net, const std::vector<Sample>& data, double split_depth) {
  std::size_t ok = 0, total = 0;
  for (const Sample& s : data) {
    const auto d = net.forward(s.target, Mode{false})[0].to_vector();
    const auto g = s.depth.to_vector();
    std::vector<double> nears, fars;
    for (std::size_t i = 0; i < d.size(); ++i) (g[i] < split_depth ? nears : fars).push_back(d[i]);
    total += d.size();
    if (nears.empty() || fars.empty()) continue;
    const double mn = median(nears), mf = median(fars);
    if (!(mn > mf)) continue;
    const double tau = 0.5 * (mn + mf);
    for (double v : nears) ok += v > tau;
    for (double v : fars) ok += v < tau;
  }
  return static_cast<double>(ok) / static_cast<double>(total);
}

Outcome toy_training() {
  Outcome o;
  const TrainConfig cfg = toy_config();
  const auto data = load_training_data(cfg);
  const TrainResult r = train_selfsup(cfg, data);
  o.require(!r.aborted, "training aborted: " + r.message);
  o.require(!r.log.empty() && r.log.size() <= 500, "at most 500 steps");
  if (r.log.empty()) return o;
  const double first = r.log.front().reprojection;
  // Final value: mean over the last epoch, which damps single-batch noise.
  const int last_epoch = r.log.back().epoch;
  double final_sum = 0;
  int final_n = 0;
  for (const StepRecord& s : r.log)
    if (s.epoch == last_epoch) {
      final_sum += s.reprojection;
      ++final_n;
    }
  const double final_re = final_sum / final_n;
  o.require(final_re <= 0.5 * first, "final L_re <= 50% of step 1");
  const DepthNet net = depth_net_from_checkpoint(r.checkpoint);
  const double order = plane_order_fraction(net, data, 0.5 * (5.0 + 50.0));
  o.require(order >= 0.9, "plane order >= 90%");
  o.note(std::to_string(r.log.size()) + " steps, L_re " + fmt("%.4f", first) + " -> " + fmt("%.4f", final_re) + " (" +
         fmt("%.1f%%", 100 * final_re / first) + "), last step " + fmt("%.4f", r.log.back().reprojection) +
         ", plane order " + fmt("%.2f%%", 100 * order));
  g_teacher = r.checkpoint;
  return o;
}

Outcome distillation() {
  Outcome o;
  if (!g_teacher) {
    o.require(false, "needs the toy teacher from criterion 6 (run 6 and 7 together)");
    return o;
  }
  const DepthNet teacher = depth_net_from_checkpoint(*g_teacher);
  const std::uint64_t before = params_hash(teacher.params());
  TrainConfig cfg = toy_config();
  cfg.mode = TrainMode::kDistill;
  cfg.arch = "hr-depth-lite";
  cfg.teacher = "in-memory";
  const auto data = load_training_data(cfg);
  const TrainResult r = train_distill(cfg, teacher, data);
  o.require(!r.aborted, "distillation aborted: " + r.message);
  o.require(r.log.size() <= 500, "at most 500 steps");
  o.require(params_hash(teacher.params()) == before, "teacher unchanged");

  const DepthNet student = depth_net_from_checkpoint(r.checkpoint);
  double abs_sum = 0, lo = 1e300, hi = -1e300;
  std::size_t n = 0;
  for (const Sample& s : data) {
    const auto t = teacher.forward(s.target, Mode{false})[0].to_vector();
    const auto st = student.forward(s.target, Mode{false})[0].to_vector();
    for (std::size_t i = 0; i < t.size(); ++i) {
      abs_sum += std::abs(t[i] - st[i]);
      lo = std::min(lo, t[i]);
      hi = std::max(hi, t[i]);
    }
    n += t.size();
  }
  const double gap = abs_sum / static_cast<double>(n), range = hi - lo;
  o.require(gap <= 0.1 * range, "mean |d_T - d_S| <= 10% of teacher range");
  o.note(std::to_string(r.log.size()) + " steps, mean |d_T - d_S| " + fmt("%.5f", gap) + " = " +
         fmt("%.2f%%", 100 * gap / range) + " of range " + fmt("%.4f", range));
  return o;
}

// ---------------------------------------------------------------- 8

Outcome interpolation_gap() {
  Outcome o;
  const Tensor gt = render_frame(two_plane_scene(320, 96, 3), 1, 1).depth;
  const GradientBandReport r = interp_gap_analysis(gt, gt, 4);
  const auto pop = r.populated();
  o.require(pop.size() >= 2, "at least two populated bands");
  if (pop.size() < 2) return o;
  const GradientBand &bottom = r.bands.front(), &top = r.bands.back();
  o.require(top.count > 0 && bottom.count > 0, "top and bottom quartiles populated");
  o.require(top.up_abs_rel >= 5.0 * bottom.up_abs_rel, "top >= 5x bottom (up-sampled LR)");
  o.require(top.up_abs_rel > top.hr_abs_rel, "up-sampled LR top > HR top");
  o.note("up-LR abs_rel bottom " + fmt("%.5f", bottom.up_abs_rel) + ", top " + fmt("%.4f", top.up_abs_rel) + ", HR top " +
         fmt("%.4f", top.hr_abs_rel));
  return o;
}

// ---------------------------------------------------------------- 9

DepthMetrics loop_metrics(const std::vector<double>& pred, const std::vector<double>& gt, bool scale) {
  std::vector<double> ps, gs;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] > 0) {
      ps.push_back(pred[i]);
      gs.push_back(gt[i]);
    }
  auto med = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const double ratio = med(gs) / med(ps);
  double a = 0, b = 0, c = 0, d = 0;
  std::size_t d1 = 0, d2 = 0, d3 = 0;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const double p = std::clamp(scale ? ps[i] * ratio : ps[i], 1e-3, 80.0), g = gs[i];
    a += std::abs(p - g) / g;
    b += (p - g) * (p - g) / g;
    c += (p - g) * (p - g);
    d += (std::log(p) - std::log(g)) * (std::log(p) - std::log(g));
    const double t = std::max(p / g, g / p);
    d1 += t < 1.25;
    d2 += t < 1.25 * 1.25;
    d3 += t < 1.25 * 1.25 * 1.25;
  }
  const double n = static_cast<double>(gs.size());
  DepthMetrics m;
  m.count = gs.size();
  m.abs_rel = a / n;
  m.sq_rel = b / n;
  m.rmse = std::sqrt(c / n);
  m.rmse_log = std::sqrt(d / n);
  m.delta1 = d1 / n;
  m.delta2 = d2 / n;
  m.delta3 = d3 / n;
  return m;
}

double metric_distance(const DepthMetrics& a, const DepthMetrics& b) {
  auto rel = [](double x, double y) { return std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-300}); };
  if (a.count != b.count) return INFINITY;
  return std::max({rel(a.abs_rel, b.abs_rel), rel(a.sq_rel, b.sq_rel), rel(a.rmse, b.rmse), rel(a.rmse_log, b.rmse_log),
                   rel(a.delta1, b.delta1), rel(a.delta2, b.delta2), rel(a.delta3, b.delta3)});
}

Outcome metric_oracle() {
  Outcome o;
  double worst = 0;
  for (std::uint64_t k = 0; k < 50; ++k) {
    Rng rng(900 + k);
    std::vector<double> g(96 * 128), p(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = rng.uniform01() < 0.3 ? 0.0 : rng.uniform(0.5, 90.0);
      p[i] = rng.uniform(1e-4, 100.0);
    }
    const Shape s{1, 1, 96, 128};
    const bool scale = k % 2 == 0;
    worst = std::max(worst, metric_distance(depth_metrics(Tensor(s, p), Tensor(s, g), {scale}), loop_metrics(p, g, scale)));
  }
  o.require(worst <= 1e-12, "vectorized vs loop oracle");

  // Scale invariance: exact wherever the global factor itself is exact in
  // binary floating point; other factors are reported.
  const Tensor gt = random_tensor(Shape{1, 1, 64, 64}, 31, 1.0, 60.0);
  const Tensor pred = random_tensor(Shape{1, 1, 64, 64}, 32, 0.5, 40.0);
  const DepthMetrics base = depth_metrics(pred, gt);
  bool exact = true;
  for (double c : {1.0 / 64, 0.5, 2.0, 8.0, 4096.0}) exact = exact && depth_metrics(scale(pred, c), gt) == base;
  o.require(exact, "median-scaling invariance exact");
  double other = 0;
  for (double c : {0.37, 3.0, 17.9}) other = std::max(other, metric_distance(depth_metrics(scale(pred, c), gt), base));
  o.note("50 pairs, worst rel " + fmt("%.1e", worst) + "; non-dyadic factors within " + fmt("%.1e", other));
  return o;
}

// ---------------------------------------------------------------- 10

struct RunBytes {
  std::string log;
  std::vector<std::string> checkpoints;
};

RunBytes record_run(const TrainConfig& cfg, const DepthNet* teacher) {
  RunBytes out;
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) { out.log += r.line() + "\n"; };
  hooks.on_checkpoint = [&](int, const Checkpoint& ck) {
    std::ostringstream os;
    write_checkpoint(os, ck);
    out.checkpoints.push_back(os.str());
  };
  const auto data = load_training_data(cfg);
  const TrainResult r = teacher ? train_distill(cfg, *teacher, data, hooks) : train_selfsup(cfg, data, hooks);
  std::ostringstream os;
  write_checkpoint(os, r.checkpoint);
  out.checkpoints.push_back(os.str());
  return out;
}

Outcome determinism() {
  Outcome o;
  TrainConfig cfg;
  cfg.arch = "toy-res18";
  cfg.width = 320;
  cfg.height = 96;
  cfg.frames = 6;
  cfg.epochs = 3;
  cfg.decay_epoch = 2;
  cfg.batch_size = 2;
  cfg.seed = 7;
  const RunBytes a = record_run(cfg, nullptr), b = record_run(cfg, nullptr);
  o.require(!a.log.empty() && a.log == b.log, "self-supervised loss logs identical");
  o.require(a.checkpoints.size() == 4 && a.checkpoints == b.checkpoints, "self-supervised checkpoints identical");

  std::istringstream final_bytes(a.checkpoints.back());
  const DepthNet teacher = depth_net_from_checkpoint(read_checkpoint(final_bytes));
  TrainConfig dc = cfg;
  dc.mode = TrainMode::kDistill;
  dc.arch = "hr-depth-lite";
  dc.teacher = "in-memory";
  const RunBytes c = record_run(dc, &teacher), d = record_run(dc, &teacher);
  o.require(!c.log.empty() && c.log == d.log && c.checkpoints == d.checkpoints, "distillation logs and checkpoints identical");
  std::size_t bytes = 0;
  for (const auto& s : a.checkpoints) bytes += s.size();
  o.note(std::to_string(std::count(a.log.begin(), a.log.end(), '\n')) + " steps, " + std::to_string(a.checkpoints.size()) +
         " checkpoints (" + std::to_string(bytes) + " bytes) compared per run");
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;  ///< 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "fusion-block parameter exactness", 1.0, fusion_exactness},
      {2, "model parameter budgets", 5.0, parameter_budgets},
      {3, "gradient suite", 120.0, gradient_suite},
      {4, "loss identities", 0.0, loss_identities},
      {5, "geometry", 0.0, geometry_checks},
      {6, "toy self-supervised training", 600.0, toy_training},
      {7, "distillation", 0.0, distillation},
      {8, "interpolation gap", 30.0, interpolation_gap},
      {9, "metric oracle", 0.0, metric_oracle},
      {10, "determinism", 0.0, determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const Criterion& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double t = seconds_since(t0);
    if (c.budget_seconds > 0) o.require(t < c.budget_seconds, "runtime " + fmt("%.1f s", t) + " over " + fmt("%.0f s", c.budget_seconds));
    failures += !o.pass;
    std::printf("[%s] %2d %-32s %7.1f s  %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, t, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
