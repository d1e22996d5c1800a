#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hrdepth/ops.hpp"
#include "hrdepth/rng.hpp"

namespace hrdepth {

/// Flat, ordered store of named parameters and buffers (running statistics).
/// Layers refer to entries by index. During a training step the trainable
/// entries are bound to a tape; reads then return the watched leaves.
class ParamStore {
 public:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  std::size_t add(const std::string& name, Tensor init, bool trainable = true);

  /// Bound leaf if bound, else the stored value.
  const Tensor& get(std::size_t i) const;
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  void set_value(std::size_t i, Tensor v);
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  bool trainable(std::size_t i) const { return entries_.at(i).trainable; }
  std::size_t size() const { return entries_.size(); }
  std::size_t find(const std::string& name) const;

  void bind(Tape& tape);
  /// Binds only the given entries to caller-provided leaves; the rest read
  /// as constants. Used to differentiate w.r.t. a parameter subset.
  void bind_leaves(const std::vector<std::pair<std::size_t, Tensor>>& leaves);
  void unbind();
  bool bound() const { return bound_; }

  /// Number of trainable scalars whose name starts with `prefix`.
  std::size_t count(const std::string& prefix = "") const;

 private:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable;
    Tensor leaf;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> by_name_;
  bool bound_ = false;
};

/// Forward-pass flags shared by every layer.
struct Mode {
  bool training = false;
};

/// Fan-in scaled uniform initialiser: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_uniform(Shape shape, int fan_in, Rng& rng);

struct Conv {
  ParamStore* store = nullptr;
  std::size_t weight = ParamStore::kNone;
  std::size_t bias = ParamStore::kNone;
  Conv2dOptions opt;

  Tensor operator()(const Tensor& x) const;
};

struct ConvSpec {
  int in = 0, out = 0, kernel = 3, stride = 1;
  PadMode pad_mode = PadMode::kZero;
  bool bias = true;
  bool depthwise = false;
};
Conv make_conv(ParamStore& store, const std::string& name, const ConvSpec& spec, Rng& rng);

struct BatchNorm {
  ParamStore* store = nullptr;
  std::size_t gamma = 0, beta = 0, running_mean = 0, running_var = 0;
  double momentum = 0.1;
  double eps = 1e-5;

  /// Training mode updates the running statistics in the store.
  Tensor operator()(const Tensor& x, const Mode& mode) const;
};
BatchNorm make_batch_norm(ParamStore& store, const std::string& name, int channels);

struct Linear {
  ParamStore* store = nullptr;
  std::size_t weight = ParamStore::kNone;
  std::size_t bias = ParamStore::kNone;

  Tensor operator()(const Tensor& x) const;
};
Linear make_linear(ParamStore& store, const std::string& name, int in, int out, bool bias, Rng& rng);

}  // namespace hrdepth
