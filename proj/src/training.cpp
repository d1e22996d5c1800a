#include "hrdepth/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hrdepth {

// ---------------------------------------------------------------- Adam

void Adam::attach(ParamStore& store, const std::string& prefix) {
  if (t_ != 0) throw ContractViolation("Adam: attach after the first step");
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.trainable(i)) continue;
    const std::size_t n = store.value(i).numel();
    slots_.push_back(Slot{&store, i, prefix + store.name(i), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
}

bool Adam::step(const Gradients& grads, double lr, std::string* diagnostic) {
  std::vector<std::vector<double>> g;
  g.reserve(slots_.size());
  for (const Slot& s : slots_) {
    if (!s.store->bound()) throw ContractViolation("Adam: store of " + s.key + " is not bound");
    g.push_back(grads.of(s.store->get(s.index)).to_vector());
  }
  return step(g, lr, diagnostic);
}

bool Adam::step(const std::vector<std::vector<double>>& grads, double lr, std::string* diagnostic) {
  if (grads.size() != slots_.size()) throw ContractViolation("Adam: gradient count does not match slots");
  for (std::size_t k = 0; k < slots_.size(); ++k) {
    if (grads[k].size() != slots_[k].m.size()) throw ContractViolation("Adam: gradient size mismatch for " + slots_[k].key);
    for (std::size_t i = 0; i < grads[k].size(); ++i) {
      if (!std::isfinite(grads[k][i])) {
        if (diagnostic) *diagnostic = "non-finite gradient in " + slots_[k].key + " at element " + std::to_string(i);
        return false;
      }
    }
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < slots_.size(); ++k) {
    Slot& s = slots_[k];
    std::vector<double> p = s.store->value(s.index).to_vector();
    const std::vector<double>& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mh = s.m[i] / c1, vh = s.v[i] / c2;
      p[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
    s.store->set_value(s.index, Tensor(s.store->value(s.index).shape(), std::move(p)));
  }
  return true;
}

void Adam::save(Checkpoint& ck) const {
  ck.meta["adam_step"] = std::to_string(t_);
  for (const Slot& s : slots_) {
    const Shape shape = s.store->value(s.index).shape();
    ck.tensors.emplace_back("adam/m/" + s.key, Tensor(shape, s.m));
    ck.tensors.emplace_back("adam/v/" + s.key, Tensor(shape, s.v));
  }
}

void Adam::load(const Checkpoint& ck) {
  auto it = ck.meta.find("adam_step");
  if (it == ck.meta.end()) throw FormatError("checkpoint has no optimizer state");
  for (Slot& s : slots_) {
    const Tensor& m = ck.tensor("adam/m/" + s.key);
    const Tensor& v = ck.tensor("adam/v/" + s.key);
    if (m.numel() != s.m.size() || v.numel() != s.v.size()) throw FormatError("optimizer state size mismatch for " + s.key);
    s.m = m.to_vector();
    s.v = v.to_vector();
  }
  t_ = std::stoull(it->second);
}

// ---------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T v{};
  is >> v;
  if (is.fail() || !is.eof()) throw ConfigError("bad value for " + key + ": '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("bad boolean for " + key + ": '" + value + "'");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fusion_key(FusionKind k) {
  switch (k) {
    case FusionKind::kConv3x3: return "conv3x3";
    case FusionKind::kFse: return "fse";
    case FusionKind::kSePlusConv: return "se";
  }
  return "fse";
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  try {
    if (key == "mode") {
      if (value == "selfsup") mode = TrainMode::kSelfSup;
      else if (value == "distill") mode = TrainMode::kDistill;
      else throw ConfigError("mode must be selfsup or distill");
    } else if (key == "arch") {
      arch_by_name(value);
      arch = value;
    } else if (key == "fusion") {
      fusion = parse_fusion(value);
    } else if (key == "epochs") {
      epochs = parse_number<int>(key, value);
    } else if (key == "decay_epoch") {
      decay_epoch = parse_number<int>(key, value);
    } else if (key == "decay_factor") {
      decay_factor = parse_number<double>(key, value);
    } else if (key == "lr") {
      lr = parse_number<double>(key, value);
    } else if (key == "batch_size") {
      batch_size = parse_number<int>(key, value);
    } else if (key == "steps") {
      max_steps = parse_number<long>(key, value);
    } else if (key == "width") {
      width = parse_number<int>(key, value);
    } else if (key == "height") {
      height = parse_number<int>(key, value);
    } else if (key == "scales") {
      loss.num_scales = parse_number<int>(key, value);
    } else if (key == "alpha") {
      loss.alpha = parse_number<double>(key, value);
    } else if (key == "lambda") {
      loss.lambda_smooth = parse_number<double>(key, value);
    } else if (key == "automask") {
      loss.automask = parse_bool(key, value);
    } else if (key == "min_depth") {
      range.min_depth = parse_number<double>(key, value);
    } else if (key == "max_depth") {
      range.max_depth = parse_number<double>(key, value);
    } else if (key == "seed") {
      seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "data") {
      if (value != "synthetic" && value != "kitti") throw ConfigError("data must be synthetic or kitti");
      data = value;
    } else if (key == "scene") {
      scene = value;
    } else if (key == "frames") {
      frames = parse_number<int>(key, value);
    } else if (key == "kitti_root") {
      kitti_root = value;
    } else if (key == "split") {
      split = value;
    } else if (key == "stereo") {
      stereo = parse_bool(key, value);
    } else if (key == "teacher") {
      teacher = value;
    } else if (key == "distill_norm") {
      if (value == "l1") distill_norm = DistillNorm::kL1;
      else if (value == "l2") distill_norm = DistillNorm::kL2;
      else throw ConfigError("distill_norm must be l1 or l2");
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(epochs >= 1, "epochs must be >= 1");
  need(decay_epoch >= 0 && decay_epoch < epochs, "decay_epoch must lie in [0, epochs)");
  need(decay_factor > 0, "decay_factor must be > 0");
  need(lr >= 0 && std::isfinite(lr), "lr must be finite and >= 0");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(max_steps >= 0, "steps must be >= 0");
  need(width >= 32 && height >= 32, "resolution must be at least 32x32");
  need(width % 32 == 0 && height % 32 == 0, "width and height must be multiples of 32");
  need(frames >= 3, "frames must be >= 3");
  need(data != "kitti" || (!kitti_root.empty() && !split.empty()), "kitti data needs kitti_root and split");
  need(mode != TrainMode::kDistill || !teacher.empty(), "distill mode needs a teacher checkpoint");
  try {
    loss.validate();
    range.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "mode = " << (mode == TrainMode::kSelfSup ? "selfsup" : "distill") << "\n"
     << "arch = " << arch << "\n"
     << "fusion = " << fusion_key(fusion) << "\n"
     << "epochs = " << epochs << "\n"
     << "decay_epoch = " << decay_epoch << "\n"
     << "decay_factor = " << fmt(decay_factor) << "\n"
     << "lr = " << fmt(lr) << "\n"
     << "batch_size = " << batch_size << "\n"
     << "steps = " << max_steps << "\n"
     << "width = " << width << "\n"
     << "height = " << height << "\n"
     << "scales = " << loss.num_scales << "\n"
     << "alpha = " << fmt(loss.alpha) << "\n"
     << "lambda = " << fmt(loss.lambda_smooth) << "\n"
     << "automask = " << (loss.automask ? "true" : "false") << "\n"
     << "min_depth = " << fmt(range.min_depth) << "\n"
     << "max_depth = " << fmt(range.max_depth) << "\n"
     << "seed = " << seed << "\n"
     << "data = " << data << "\n"
     << "frames = " << frames << "\n"
     << "stereo = " << (stereo ? "true" : "false") << "\n"
     << "distill_norm = " << (distill_norm == DistillNorm::kL1 ? "l1" : "l2") << "\n";
  if (!scene.empty()) os << "scene = " << scene << "\n";
  if (!kitti_root.empty()) os << "kitti_root = " << kitti_root << "\n";
  if (!split.empty()) os << "split = " << split << "\n";
  if (!teacher.empty()) os << "teacher = " << teacher << "\n";
  return os.str();
}

TrainConfig parse_train_config(const std::string& text, TrainConfig base) {
  TrainConfig cfg = std::move(base);
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig load_train_config(const std::string& path, TrainConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_train_config(ss.str(), std::move(base));
}

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  return epoch < cfg.decay_epoch ? cfg.lr : cfg.lr / cfg.decay_factor;
}

std::vector<Sample> load_training_data(const TrainConfig& cfg, const WarningSink& warn) {
  if (cfg.data == "kitti") {
    KittiConfig kc;
    kc.width = cfg.width;
    kc.height = cfg.height;
    kc.stereo = cfg.stereo;
    std::vector<Sample> out;
    for (const SplitEntry& e : read_split_file(cfg.split)) {
      if (auto s = load_kitti_sample(cfg.kitti_root, e, kc, warn)) out.push_back(std::move(*s));
    }
    if (out.empty()) throw ConfigError("no usable samples in split " + cfg.split);
    return out;
  }
  SceneSpec spec = cfg.scene.empty() ? two_plane_scene(cfg.width, cfg.height, cfg.frames) : load_scene_spec(cfg.scene);
  if (spec.width != cfg.width || spec.height != cfg.height)
    throw ConfigError("scene resolution " + std::to_string(spec.width) + "x" + std::to_string(spec.height) +
                      " does not match the configured " + std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
  return gen_synthetic_sequence(spec, cfg.seed);
}

std::string StepRecord::line() const {
  std::string s = "step=" + std::to_string(step) + " epoch=" + std::to_string(epoch) + " lr=" + fmt(lr) +
                  " loss=" + fmt(loss);
  s += distill ? " distill=" + fmt(reprojection) : " reprojection=" + fmt(reprojection) + " smooth=" + fmt(smooth);
  if (rejected) s += " rejected";
  return s;
}

// ---------------------------------------------------------------- checkpoints

namespace {

ArchConfig arch_for(const TrainConfig& cfg) {
  ArchConfig a = arch_by_name(cfg.arch);
  a.fusion = cfg.fusion;
  a.num_scales = cfg.loss.num_scales;
  return a;
}

PoseConfig pose_for(const std::string& arch) { return arch == "toy-res18" ? toy_pose() : PoseConfig{}; }

void append_prefixed(Checkpoint& ck, const std::string& prefix, const ParamStore& store) {
  for (auto& [name, t] : named_tensors(store)) ck.tensors.emplace_back(prefix + name, t);
}

void load_prefixed(ParamStore& store, const Checkpoint& ck, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> part;
  for (const auto& [name, t] : ck.tensors)
    if (name.compare(0, prefix.size(), prefix) == 0) part.emplace_back(name.substr(prefix.size()), t);
  load_named(store, part);
}

long meta_long(const Checkpoint& ck, const std::string& key) {
  auto it = ck.meta.find(key);
  if (it == ck.meta.end()) throw FormatError("checkpoint meta lacks " + key);
  return std::stol(it->second);
}

void check_resume(const Checkpoint& ck, const TrainConfig& cfg, const char* mode) {
  auto same = [&](const std::string& key, const std::string& want) {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end() || it->second != want)
      throw ContractViolation("resume checkpoint " + key + " differs from the config");
  };
  same("mode", mode);
  same("arch", cfg.arch);
  same("fusion", fusion_key(cfg.fusion));
  same("scales", std::to_string(cfg.loss.num_scales));
  same("seed", std::to_string(cfg.seed));
}

struct Schedule {
  Batcher batcher;
  std::size_t per_epoch;
  long total;
  int cached_epoch = -1;
  std::vector<std::vector<std::size_t>> batches;

  Schedule(const TrainConfig& cfg, std::size_t n)
      : batcher(n, cfg.batch_size, cfg.seed), per_epoch(batcher.batches_per_epoch()) {
    if (per_epoch == 0) throw ContractViolation("fewer samples than one batch");
    total = static_cast<long>(per_epoch) * cfg.epochs;
    if (cfg.max_steps > 0 && cfg.max_steps < total) total = cfg.max_steps;
  }
  int epoch_of(long step) const { return static_cast<int>(step / static_cast<long>(per_epoch)); }
  const std::vector<std::size_t>& indices(long step) {
    const int e = epoch_of(step);
    if (e != cached_epoch) {
      batches = batcher.epoch(static_cast<std::uint64_t>(e));
      cached_epoch = e;
    }
    return batches[static_cast<std::size_t>(step % static_cast<long>(per_epoch))];
  }
  bool epoch_end(long step) const { return (step + 1) % static_cast<long>(per_epoch) == 0 || step + 1 == total; }
};

void emit(const TrainHooks& hooks, TrainResult& result, const StepRecord& rec) {
  result.log.push_back(rec);
  if (hooks.on_step) hooks.on_step(rec);
}

}  // namespace

Checkpoint make_checkpoint(const DepthNet& depth, const PoseNet* pose, const Adam& opt, long step, int epoch,
                           const TrainConfig& cfg) {
  Checkpoint ck;
  ck.meta["mode"] = cfg.mode == TrainMode::kSelfSup ? "selfsup" : "distill";
  ck.meta["step"] = std::to_string(step);
  ck.meta["epoch"] = std::to_string(epoch);
  ck.meta["arch"] = cfg.arch;
  ck.meta["fusion"] = fusion_key(cfg.fusion);
  ck.meta["scales"] = std::to_string(cfg.loss.num_scales);
  ck.meta["seed"] = std::to_string(cfg.seed);
  ck.meta["width"] = std::to_string(cfg.width);
  ck.meta["height"] = std::to_string(cfg.height);
  ck.meta["min_depth"] = fmt(cfg.range.min_depth);
  ck.meta["max_depth"] = fmt(cfg.range.max_depth);
  append_prefixed(ck, "depth/", depth.params());
  if (pose) append_prefixed(ck, "pose/", pose->params());
  opt.save(ck);
  return ck;
}

DepthNet depth_net_from_checkpoint(const Checkpoint& ck) {
  auto get = [&](const std::string& key) {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw FormatError("checkpoint meta lacks " + key);
    return it->second;
  };
  ArchConfig a = arch_by_name(get("arch"));
  a.fusion = parse_fusion(get("fusion"));
  a.num_scales = static_cast<int>(meta_long(ck, "scales"));
  DepthNet net(a, 0);
  load_prefixed(net.params(), ck, "depth/");
  return net;
}

std::uint64_t params_hash(const ParamStore& store) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (std::size_t i = 0; i < store.size(); ++i) {
    mix(store.name(i).data(), store.name(i).size());
    auto d = store.value(i).data();
    mix(d.data(), d.size_bytes());
  }
  return h;
}

// ---------------------------------------------------------------- loops

TrainResult train_selfsup(const TrainConfig& cfg, const std::vector<Sample>& data, const TrainHooks& hooks,
                          const Checkpoint* resume) {
  cfg.validate();
  if (data.empty()) throw ContractViolation("train_selfsup: no samples");
  for (const Sample& s : data)
    if (s.sources.size() < 2) throw ContractViolation("train_selfsup: sample " + s.id + " has fewer than 2 sources");

  DepthNet depth(arch_for(cfg), cfg.seed);
  PoseNet pose(pose_for(cfg.arch), cfg.seed + 1);
  Adam opt;
  opt.attach(depth.params(), "depth/");
  opt.attach(pose.params(), "pose/");
  Schedule sched(cfg, data.size());

  long start = 0;
  if (resume) {
    check_resume(*resume, cfg, "selfsup");
    load_prefixed(depth.params(), *resume, "depth/");
    load_prefixed(pose.params(), *resume, "pose/");
    opt.load(*resume);
    start = meta_long(*resume, "step");
  }

  TrainResult result;
  result.checkpoint = make_checkpoint(depth, &pose, opt, start, sched.epoch_of(start), cfg);
  const bool known_poses = cfg.data == "kitti";
  for (long step = start; step < sched.total; ++step) {
    const int epoch = sched.epoch_of(step);
    const double lr = scheduled_lr(cfg, epoch);
    const Batch batch = collate(data, sched.indices(step));

    Tape tape;
    depth.params().bind(tape);
    pose.params().bind(tape);
    const Mode train{true};
    std::vector<Tensor> disps = depth.forward(batch.target, train);
    ViewBatch views{batch.target, batch.sources, {}, batch.K};
    for (std::size_t j = 0; j < batch.sources.size(); ++j) {
      if (known_poses && batch.source_poses[j]) {
        std::vector<PoseVec> p;
        for (const Mat4& m : *batch.source_poses[j]) p.push_back(matrix_to_pose(m));
        views.poses.push_back(pose_to_tensor(p));
      } else {
        views.poses.push_back(pose.forward(concat_channels({batch.target, batch.sources[j]}), train));
      }
    }
    LossBreakdown lb = total_loss(disps, views, cfg.loss, cfg.range);

    StepRecord rec;
    rec.step = step + 1;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = lb.final_value();
    for (double r : lb.reprojection) rec.reprojection += r / static_cast<double>(lb.reprojection.size());
    for (double s : lb.smooth) rec.smooth += s / static_cast<double>(lb.smooth.size());

    if (!std::isfinite(rec.loss)) {
      depth.params().unbind();
      pose.params().unbind();
      result.aborted = true;
      result.message = "non-finite loss at step " + std::to_string(step + 1) + "; keeping checkpoint from step " +
                       result.checkpoint.meta.at("step");
      if (hooks.on_diagnostic) hooks.on_diagnostic(result.message);
      return result;
    }

    Gradients grads = tape.backward(lb.total);
    std::string diag;
    rec.rejected = !opt.step(grads, lr, &diag);
    depth.params().unbind();
    pose.params().unbind();
    if (rec.rejected && hooks.on_diagnostic) hooks.on_diagnostic("step " + std::to_string(step + 1) + " rejected: " + diag);
    emit(hooks, result, rec);

    if (sched.epoch_end(step)) {
      result.checkpoint = make_checkpoint(depth, &pose, opt, step + 1, sched.epoch_of(step + 1), cfg);
      if (hooks.on_checkpoint) hooks.on_checkpoint(epoch, result.checkpoint);
    }
  }
  return result;
}

TrainResult train_distill(const TrainConfig& cfg, const DepthNet& teacher, const std::vector<Sample>& data,
                          const TrainHooks& hooks, const Checkpoint* resume) {
  cfg.validate();
  if (data.empty()) throw ContractViolation("train_distill: no samples");
  const ArchConfig student_arch = arch_for(cfg);
  if (teacher.config().num_scales != student_arch.num_scales)
    throw ContractViolation("train_distill: teacher has " + std::to_string(teacher.config().num_scales) +
                            " scales, student " + std::to_string(student_arch.num_scales));

  // The teacher is frozen and runs without a tape, so its maps can be computed once.
  std::vector<std::vector<Tensor>> targets;
  targets.reserve(data.size());
  for (const Sample& s : data) targets.push_back(teacher.forward(s.target, Mode{false}));

  DepthNet student(student_arch, cfg.seed);
  Adam opt;
  opt.attach(student.params(), "depth/");
  Schedule sched(cfg, data.size());
  const DistillConfig dcfg{cfg.distill_norm, {}};

  long start = 0;
  if (resume) {
    check_resume(*resume, cfg, "distill");
    load_prefixed(student.params(), *resume, "depth/");
    opt.load(*resume);
    start = meta_long(*resume, "step");
  }

  TrainResult result;
  result.checkpoint = make_checkpoint(student, nullptr, opt, start, sched.epoch_of(start), cfg);
  for (long step = start; step < sched.total; ++step) {
    const int epoch = sched.epoch_of(step);
    const double lr = scheduled_lr(cfg, epoch);
    const auto& idx = sched.indices(step);
    const Batch batch = collate(data, idx);
    std::vector<Tensor> teacher_maps;
    for (std::size_t k = 0; k < targets[idx[0]].size(); ++k) {
      std::vector<Tensor> items;
      for (std::size_t i : idx) items.push_back(targets[i][k]);
      teacher_maps.push_back(stack(items));
    }

    Tape tape;
    student.params().bind(tape);
    std::vector<Tensor> disps = student.forward(batch.target, Mode{true});
    Tensor loss = distill_loss(teacher_maps, disps, dcfg);

    StepRecord rec;
    rec.step = step + 1;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = loss.item();
    rec.reprojection = rec.loss;
    rec.distill = true;
    if (!std::isfinite(rec.loss)) {
      student.params().unbind();
      result.aborted = true;
      result.message = "non-finite loss at step " + std::to_string(step + 1) + "; keeping checkpoint from step " +
                       result.checkpoint.meta.at("step");
      if (hooks.on_diagnostic) hooks.on_diagnostic(result.message);
      return result;
    }
    Gradients grads = tape.backward(loss);
    std::string diag;
    rec.rejected = !opt.step(grads, lr, &diag);
    student.params().unbind();
    if (rec.rejected && hooks.on_diagnostic) hooks.on_diagnostic("step " + std::to_string(step + 1) + " rejected: " + diag);
    emit(hooks, result, rec);

    if (sched.epoch_end(step)) {
      result.checkpoint = make_checkpoint(student, nullptr, opt, step + 1, sched.epoch_of(step + 1), cfg);
      if (hooks.on_checkpoint) hooks.on_checkpoint(epoch, result.checkpoint);
    }
  }
  return result;
}

}  // namespace hrdepth
