// Command-line entry point: train, distill, infer, audit-params, analyze-interp, eval, gradcheck.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <unistd.h>

#include "hrdepth/arch.hpp"
#include "hrdepth/data.hpp"
#include "hrdepth/evaluation.hpp"
#include "hrdepth/geometry.hpp"
#include "hrdepth/grad_suite.hpp"
#include "hrdepth/image_io.hpp"
#include "hrdepth/serialize.hpp"
#include "hrdepth/training.hpp"

#ifndef HRDEPTH_VERSION
#define HRDEPTH_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace hrdepth;

namespace {

constexpr double kDepthPngScale = 256.0;

/// Bad arguments or configuration: exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resolution;
  std::string arch;
  std::string fusion;
  bool automask = false;
  std::optional<int> scales;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c, bool training) {
  app->add_option("--config", c.config, "key = value configuration file");
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--out", c.out, "output directory (created atomically)");
  app->add_option("--resolution", c.resolution, "WxH, e.g. 320x96");
  app->add_option("--arch", c.arch, "hr-depth-res18 | hr-depth-lite | baseline-unet | toy-res18");
  app->add_option("--fusion", c.fusion, "conv3x3 | fse | se");
  app->add_flag("--automask", c.automask, "enable auto-masking of static pixels");
  app->add_option("--scales", c.scales, "number of output scales");
  if (training) app->add_option("--set", c.overrides, "extra key=value config override (repeatable)");
}

std::pair<int, int> parse_resolution(const std::string& s) {
  int w = 0, h = 0;
  char x = 0, extra = 0;
  if (std::sscanf(s.c_str(), "%d%c%d%c", &w, &x, &h, &extra) != 3 || (x != 'x' && x != 'X') || w <= 0 || h <= 0)
    throw UsageError("--resolution expects WxH, got '" + s + "'");
  return {w, h};
}

TrainConfig resolve_config(const Common& c, TrainMode mode) {
  TrainConfig base;
  base.mode = mode;
  if (mode == TrainMode::kDistill) base.arch = "hr-depth-lite";
  TrainConfig cfg = c.config.empty() ? base : load_train_config(c.config, base);
  if (cfg.mode != mode) throw UsageError("config mode does not match the verb");
  for (const std::string& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.resolution.empty()) std::tie(cfg.width, cfg.height) = parse_resolution(c.resolution);
  if (!c.arch.empty()) cfg.set("arch", c.arch);
  if (!c.fusion.empty()) cfg.set("fusion", c.fusion);
  if (c.automask) cfg.loss.automask = true;
  if (c.scales) cfg.loss.num_scales = *c.scales;
  cfg.validate();
  return cfg;
}

ArchConfig resolve_arch(const Common& c, const std::string& fallback) {
  try {
    ArchConfig a = arch_by_name(c.arch.empty() ? fallback : c.arch);
    if (!c.fusion.empty()) a.fusion = parse_fusion(c.fusion);
    if (c.scales) a.num_scales = *c.scales;
    return a;
  } catch (const ContractViolation& e) {
    throw UsageError(e.what());
  }
}

/// Writes into a sibling staging directory and renames it into place on commit.
class OutputDir {
 public:
  explicit OutputDir(const std::string& target) : target_(target) {
    if (target.empty()) throw UsageError("--out is required for this verb");
    if (fs::exists(target_) && !fs::is_empty(target_)) throw UsageError("output directory " + target + " already exists");
    staging_ = target_;
    staging_ += ".partial-" + std::to_string(::getpid());
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~OutputDir() {
    if (!committed_) {
      std::error_code ec;
      fs::path failed = target_;
      failed += ".incomplete";
      fs::remove_all(failed, ec);
      fs::rename(staging_, failed, ec);
    }
  }
  fs::path path(const std::string& name) const { return staging_ / name; }
  void write(const std::string& name, const std::string& text) const {
    std::ofstream f(path(name));
    f << text;
    if (!f) throw std::runtime_error("cannot write " + path(name).string());
  }
  void commit() {
    if (fs::exists(target_)) fs::remove(target_);  // empty by construction
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_, staging_;
  bool committed_ = false;
};

std::string manifest(const std::string& verb, const std::vector<std::string>& argv, std::uint64_t seed,
                     const std::string& body) {
  std::ostringstream os;
  os << "# hrdepth " << HRDEPTH_VERSION << "\n# verb: " << verb << "\n# command:";
  for (const auto& a : argv) os << " " << a;
  os << "\n# seed: " << seed << "\n" << body;
  return os.str();
}

void print_step(const StepRecord& r, std::ostream& log) {
  log << r.line() << "\n";
  log.flush();
  if (r.step == 1 || r.step % 25 == 0) std::cout << r.line() << "\n" << std::flush;
}

int run_training(const Common& c, TrainMode mode, const std::vector<std::string>& argv) {
  const TrainConfig cfg = resolve_config(c, mode);
  OutputDir out(c.out);
  const std::string verb = mode == TrainMode::kSelfSup ? "train" : "distill";
  out.write("manifest.txt", manifest(verb, argv, cfg.seed, cfg.to_text()));
  const auto data = load_training_data(cfg, [](const std::string& w) { std::cerr << "warning: " << w << "\n"; });
  std::ofstream log(out.path("loss_log.txt"));
  fs::create_directories(out.path("checkpoints"));
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) { print_step(r, log); };
  hooks.on_checkpoint = [&](int epoch, const Checkpoint& ck) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoints/epoch_%03d.ckpt", epoch);
    save_checkpoint(out.path(name).string(), ck);
  };
  hooks.on_diagnostic = [](const std::string& d) { std::cerr << "diagnostic: " << d << "\n"; };
  TrainResult r;
  if (mode == TrainMode::kSelfSup) {
    r = train_selfsup(cfg, data, hooks);
  } else {
    const DepthNet teacher = depth_net_from_checkpoint(load_checkpoint(cfg.teacher));
    const std::uint64_t before = params_hash(teacher.params());
    r = train_distill(cfg, teacher, data, hooks);
    if (params_hash(teacher.params()) != before) throw std::runtime_error("teacher parameters changed during distillation");
  }
  save_checkpoint(out.path("final.ckpt").string(), r.checkpoint);
  if (r.aborted) throw std::runtime_error(r.message);
  out.commit();
  std::cout << "wrote " << c.out << "\n";
  return 0;
}

DepthRange range_of(const Checkpoint& ck) {
  DepthRange r;
  if (ck.meta.count("min_depth")) r.min_depth = std::stod(ck.meta.at("min_depth"));
  if (ck.meta.count("max_depth")) r.max_depth = std::stod(ck.meta.at("max_depth"));
  return r;
}

Tensor predict_depth(const DepthNet& net, const Checkpoint& ck, const Tensor& image) {
  const int w = std::stoi(ck.meta.at("width")), h = std::stoi(ck.meta.at("height"));
  const Tensor input = (image.shape().h == h && image.shape().w == w) ? image : bilinear_resize(image, h, w);
  return disp_to_depth(net.forward(input, Mode{false})[0], range_of(ck));
}

int run_infer(const Common& c, const std::string& checkpoint, const std::string& image,
              const std::vector<std::string>& argv) {
  if (checkpoint.empty() || image.empty()) throw UsageError("infer needs --checkpoint and --image");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const DepthNet net = depth_net_from_checkpoint(ck);
  const Tensor depth = predict_depth(net, ck, read_png_rgb(image));
  OutputDir out(c.out);
  std::ostringstream body;
  body << "checkpoint = " << checkpoint << "\nimage = " << image << "\ndepth_png = depth.png\ndepth_png_scale = "
       << kDepthPngScale << "\ndepth_raw = depth.f64\nwidth = " << depth.shape().w << "\nheight = " << depth.shape().h
       << "\n";
  out.write("manifest.txt", manifest("infer", argv, 0, body.str()));
  write_depth_png(out.path("depth.png").string(), depth, kDepthPngScale);
  save_tensor(out.path("depth.f64").string(), "depth", depth);
  out.commit();
  std::cout << "wrote " << c.out << "/depth.png and depth.f64\n";
  return 0;
}

int run_audit(const Common& c, const std::vector<std::string>& argv) {
  const ArchConfig a = resolve_arch(c, "hr-depth-res18");
  DepthNet net(a, c.seed.value_or(1));
  AuditTable t = count_params(net);
  t.arch = c.arch.empty() ? "hr-depth-res18" : c.arch;
  std::cout << t.text();
  if (!t.closed_forms_match()) throw std::runtime_error("a fusion block disagrees with its closed-form count");
  if (!c.out.empty()) {
    OutputDir out(c.out);
    out.write("manifest.txt", manifest("audit-params", argv, c.seed.value_or(1), "arch = " + t.arch + "\n"));
    out.write("audit.txt", t.text());
    out.write("audit_kv.txt", t.key_values());
    out.commit();
  }
  return 0;
}

int run_analyze(const Common& c, int downscale, const std::string& checkpoint, const std::vector<std::string>& argv) {
  int w = 320, h = 96;
  if (!c.resolution.empty()) std::tie(w, h) = parse_resolution(c.resolution);
  const std::uint64_t seed = c.seed.value_or(1);
  SceneSpec spec = two_plane_scene(w, h, 3);
  if (!c.config.empty()) spec = load_scene_spec(c.config);
  const RenderedFrame frame = render_frame(spec, static_cast<int>(spec.trajectory.size() / 2), seed);
  Tensor hr = frame.depth;
  if (!checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const DepthNet net = depth_net_from_checkpoint(ck);
    Tensor pred = predict_depth(net, ck, frame.image);
    if (pred.shape() != frame.depth.shape()) pred = bilinear_resize(pred, frame.depth.shape().h, frame.depth.shape().w);
    // Median-align to the ground truth so bands compare shape, not scale.
    std::vector<double> p = pred.to_vector();
    const double s = median(frame.depth.to_vector()) / median(p);
    hr = scale(pred, s);
  }
  const GradientBandReport r = interp_gap_analysis(hr, frame.depth, downscale);
  std::cout << band_table(r);
  if (!c.out.empty()) {
    OutputDir out(c.out);
    std::ostringstream body;
    body << "downscale = " << downscale << "\nresolution = " << spec.width << "x" << spec.height
         << "\nprediction = " << (checkpoint.empty() ? "ground-truth" : checkpoint) << "\n";
    out.write("manifest.txt", manifest("analyze-interp", argv, seed, body.str()));
    out.write("bands.txt", band_table(r));
    out.write("bands_kv.txt", band_key_values(r));
    write_png_rgb(out.path("band_error.png").string(), band_image(r));
    out.commit();
  }
  return 0;
}

Tensor load_depth_any(const std::string& path) {
  if (fs::path(path).extension() == ".png") return read_depth_png(path, kDepthPngScale);
  return load_tensor(path).second;
}

int run_eval(const Common& c, const std::vector<std::string>& preds, const std::vector<std::string>& gts,
             const std::string& checkpoint, bool no_median, double cap, bool eigen_crop, bool gt_cap,
             const std::vector<std::string>& argv) {
  MetricOptions opt;
  opt.median_scale = !no_median;
  opt.cap = cap;
  opt.eigen_crop = eigen_crop;
  opt.gt_within_cap = gt_cap;
  std::vector<MetricsRow> rows;
  if (!checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const DepthNet net = depth_net_from_checkpoint(ck);
    TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_train_config(c.config);
    cfg.width = std::stoi(ck.meta.at("width"));
    cfg.height = std::stoi(ck.meta.at("height"));
    if (c.seed) cfg.seed = *c.seed;
    const auto data = load_training_data(cfg);
    std::vector<Tensor> p, g;
    for (const Sample& s : data) {
      if (!s.depth.defined()) throw UsageError("evaluation data has no ground-truth depth");
      p.push_back(predict_depth(net, ck, s.target));
      g.push_back(s.depth);
    }
    rows.push_back({ck.meta.at("arch"), cfg.width, cfg.height, depth_metrics(stack(p), stack(g), opt)});
  } else {
    if (preds.empty() || preds.size() != gts.size()) throw UsageError("eval needs matching --pred and --gt lists or --checkpoint");
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const Tensor p = load_depth_any(preds[i]), g = load_depth_any(gts[i]);
      rows.push_back({fs::path(preds[i]).stem().string(), g.shape().w, g.shape().h, depth_metrics(p, g, opt)});
    }
  }
  std::cout << metrics_table(rows);
  if (!c.out.empty()) {
    OutputDir out(c.out);
    std::ostringstream body;
    body << "median_scale = " << (opt.median_scale ? "true" : "false") << "\ncap = " << opt.cap
         << "\neigen_crop = " << (opt.eigen_crop ? "true" : "false")
         << "\ngt_within_cap = " << (opt.gt_within_cap ? "true" : "false") << "\n";
    out.write("manifest.txt", manifest("eval", argv, c.seed.value_or(1), body.str()));
    out.write("metrics.txt", metrics_table(rows));
    out.write("metrics_kv.txt", metrics_key_values(rows));
    out.commit();
  }
  return 0;
}

int run_gradcheck(bool all, const std::string& filter, int seeds) {
  if (!all && filter.empty()) throw UsageError("gradcheck needs --all or --filter NAME");
  const auto results = run_grad_suite(seeds, all ? "" : filter);
  if (results.empty()) throw UsageError("no gradient check matches '" + filter + "'");
  int failures = 0;
  for (const auto& r : results) {
    const bool ok = r.error.empty() && r.worst <= 1e-5;
    failures += !ok;
    std::printf("%-4s %-9s %-40s max_rel=%.3e seed=%llu%s%s\n", ok ? "ok" : "FAIL", r.group.c_str(), r.name.c_str(),
                r.worst, static_cast<unsigned long long>(r.worst_seed), r.error.empty() ? "" : " error=",
                r.error.c_str());
  }
  std::printf("%zu checks, %d failed (threshold 1e-5, %d seeds)\n", results.size(), failures, seeds);
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Self-supervised monocular depth: training, distillation, inference and analysis"};
  app.set_version_flag("--version", HRDEPTH_VERSION);
  app.require_subcommand(1);

  Common train_c, distill_c, infer_c, audit_c, interp_c, eval_c;
  auto* train = app.add_subcommand("train", "joint depth and pose training on view-synthesis loss");
  add_common(train, train_c, true);

  auto* distill = app.add_subcommand("distill", "train a lite student against a frozen teacher");
  add_common(distill, distill_c, true);
  std::string teacher;
  distill->add_option("--teacher", teacher, "teacher checkpoint (overrides the config)");

  auto* infer = app.add_subcommand("infer", "predict depth for one image");
  add_common(infer, infer_c, false);
  std::string infer_ckpt, infer_image;
  infer->add_option("--checkpoint", infer_ckpt, "trained checkpoint")->required();
  infer->add_option("--image", infer_image, "input RGB PNG")->required();

  auto* audit = app.add_subcommand("audit-params", "per-node parameter counts of a depth network");
  add_common(audit, audit_c, false);

  auto* interp = app.add_subcommand("analyze-interp", "error by depth-gradient band for low-resolution upsampling");
  add_common(interp, interp_c, false);
  int downscale = 4;
  std::string interp_ckpt;
  interp->add_option("--downscale", downscale, "2, 4 or 8")->check(CLI::IsMember({2, 4, 8}));
  interp->add_option("--checkpoint", interp_ckpt, "use a network prediction instead of the ground truth");

  auto* eval = app.add_subcommand("eval", "depth metrics with median scaling and depth cap");
  add_common(eval, eval_c, false);
  std::vector<std::string> preds, gts;
  std::string eval_ckpt;
  bool no_median = false, eigen_crop = false, gt_cap = false;
  double cap = 80.0;
  eval->add_option("--pred", preds, "predicted depth (16-bit PNG or raw tensor), repeatable");
  eval->add_option("--gt", gts, "ground-truth depth, repeatable");
  eval->add_option("--checkpoint", eval_ckpt, "evaluate a checkpoint on the configured synthetic data");
  eval->add_flag("--no-median-scale", no_median, "skip median scaling");
  eval->add_option("--cap", cap, "maximum depth");
  eval->add_flag("--eigen-crop", eigen_crop, "restrict to the customary KITTI crop");
  eval->add_flag("--gt-cap", gt_cap, "ignore pixels whose ground truth lies beyond the cap");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  bool grad_all = false;
  std::string grad_filter;
  int grad_seeds = 10;
  grad->add_flag("--all", grad_all, "run every check");
  grad->add_option("--filter", grad_filter, "run checks whose name contains this text");
  grad->add_option("--seeds", grad_seeds, "seeds per check")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return run_training(train_c, TrainMode::kSelfSup, args);
    if (*distill) {
      if (!teacher.empty()) distill_c.overrides.push_back("teacher=" + teacher);
      return run_training(distill_c, TrainMode::kDistill, args);
    }
    if (*infer) return run_infer(infer_c, infer_ckpt, infer_image, args);
    if (*audit) return run_audit(audit_c, args);
    if (*interp) return run_analyze(interp_c, downscale, interp_ckpt, args);
    if (*eval) return run_eval(eval_c, preds, gts, eval_ckpt, no_median, cap, eigen_crop, gt_cap, args);
    if (*grad) return run_gradcheck(grad_all, grad_filter, grad_seeds);
  } catch (const UsageError& e) {
    std::cerr << "hrdepth: usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "hrdepth: usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "hrdepth: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
