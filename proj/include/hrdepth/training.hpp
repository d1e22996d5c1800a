#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hrdepth/arch.hpp"
#include "hrdepth/data.hpp"
#include "hrdepth/losses.hpp"
#include "hrdepth/serialize.hpp"

namespace hrdepth {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over the trainable entries of one or more stores.
/// Moments are keyed "<prefix><entry name>".
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void attach(ParamStore& store, const std::string& prefix);

  /// Reads the gradient of each bound leaf and updates the stored values.
  /// The stores must still be bound to the tape that produced `grads`.
  /// A non-finite gradient rejects the whole step: nothing changes, `diagnostic`
  /// names the offending entry, and false is returned.
  bool step(const Gradients& grads, double lr, std::string* diagnostic = nullptr);

  /// Same update from explicit per-slot gradients (slot order = attach order).
  bool step(const std::vector<std::vector<double>>& grads, double lr, std::string* diagnostic = nullptr);

  std::uint64_t steps() const { return t_; }
  std::size_t slots() const { return slots_.size(); }
  const std::vector<double>& first_moment(std::size_t slot) const { return slots_.at(slot).m; }
  const std::vector<double>& second_moment(std::size_t slot) const { return slots_.at(slot).v; }

  /// Adds "adam/m/<key>", "adam/v/<key>" tensors and meta "adam_step".
  void save(Checkpoint& ck) const;
  void load(const Checkpoint& ck);

 private:
  struct Slot {
    ParamStore* store;
    std::size_t index;
    std::string key;
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Slot> slots_;
};

enum class TrainMode { kSelfSup, kDistill };

/// key = value file; unknown keys are errors. See README for the key list.
struct TrainConfig {
  TrainMode mode = TrainMode::kSelfSup;
  std::string arch = "toy-res18";
  FusionKind fusion = FusionKind::kFse;
  int epochs = 20;
  int decay_epoch = 15;
  double decay_factor = 10.0;
  double lr = 1e-3;
  int batch_size = 1;
  /// Hard stop; 0 runs every epoch.
  long max_steps = 0;
  int width = 320, height = 96;
  LossConfig loss;
  DepthRange range;
  std::uint64_t seed = 1;
  /// "synthetic" or "kitti".
  std::string data = "synthetic";
  /// Scene description file; empty uses the built-in two-plane scene.
  std::string scene;
  int frames = 27;
  std::string kitti_root;
  std::string split;
  bool stereo = false;
  /// Teacher checkpoint for distillation.
  std::string teacher;
  DistillNorm distill_norm = DistillNorm::kL1;

  void validate() const;
  std::string to_text() const;
  /// Applies one key = value pair; throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Keys in `text` override the corresponding fields of `base`.
TrainConfig parse_train_config(const std::string& text, TrainConfig base = {});
TrainConfig load_train_config(const std::string& path, TrainConfig base = {});

/// lr before the decay epoch, lr / decay_factor from it on.
double scheduled_lr(const TrainConfig& cfg, int epoch);

/// Training samples described by the config (synthetic sequence or KITTI split).
std::vector<Sample> load_training_data(const TrainConfig& cfg, const WarningSink& warn = {});

struct StepRecord {
  long step = 0;  ///< 1-based
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  /// Mean over scales of the reprojection term (self-supervised), or the distillation loss.
  double reprojection = 0.0;
  double smooth = 0.0;
  bool rejected = false;
  bool distill = false;  ///< log as "distill=" and omit smoothness
  std::string line() const;
};

/// Appends one record per step; `on_step` sees each as it is produced,
/// `on_checkpoint` each epoch-boundary checkpoint.
struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(int epoch, const Checkpoint&)> on_checkpoint;
  std::function<void(const std::string&)> on_diagnostic;
};

struct TrainResult {
  std::vector<StepRecord> log;
  Checkpoint checkpoint;  ///< final state, or the last good one when aborted
  bool aborted = false;
  std::string message;
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint layout: "depth/<name>", "pose/<name>", Adam moments, and meta
/// (step, epoch, arch, fusion, scales, seed, width, height).
Checkpoint make_checkpoint(const DepthNet& depth, const PoseNet* pose, const Adam& opt, long step, int epoch,
                           const TrainConfig& cfg);

/// Builds a depth network from a checkpoint's meta and "depth/" tensors.
DepthNet depth_net_from_checkpoint(const Checkpoint& ck);

/// Joint DepthNet + PoseNet training on photometric reprojection. `resume`
/// continues from a checkpoint of the same config.
TrainResult train_selfsup(const TrainConfig& cfg, const std::vector<Sample>& data, const TrainHooks& hooks = {},
                          const Checkpoint* resume = nullptr);

/// Lite student regressing a frozen teacher's disparities.
TrainResult train_distill(const TrainConfig& cfg, const DepthNet& teacher, const std::vector<Sample>& data,
                          const TrainHooks& hooks = {}, const Checkpoint* resume = nullptr);

/// FNV-1a over every named tensor's name and bytes.
std::uint64_t params_hash(const ParamStore& store);

}  // namespace hrdepth
