#include "hrdepth/module.hpp"

#include <cmath>

namespace hrdepth {

std::size_t ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  if (bound_) throw ContractViolation("cannot add parameters while bound to a tape");
  if (by_name_.count(name)) throw ContractViolation("duplicate parameter name " + name);
  by_name_[name] = entries_.size();
  entries_.push_back(Entry{name, std::move(init), trainable, Tensor()});
  return entries_.size() - 1;
}

const Tensor& ParamStore::get(std::size_t i) const {
  const Entry& e = entries_.at(i);
  return (bound_ && e.leaf.defined()) ? e.leaf : e.value;
}

void ParamStore::set_value(std::size_t i, Tensor v) {
  Entry& e = entries_.at(i);
  if (!(v.shape() == e.value.shape())) {
    throw ContractViolation("shape mismatch for " + e.name + ": " + v.shape().str() + " vs " + e.value.shape().str());
  }
  e.value = v.detach();
}

std::size_t ParamStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? kNone : it->second;
}

void ParamStore::bind(Tape& tape) {
  if (bound_) throw ContractViolation("parameter store already bound");
  for (Entry& e : entries_) {
    if (e.trainable) e.leaf = tape.watch(e.value.detach());
  }
  bound_ = true;
}

void ParamStore::bind_leaves(const std::vector<std::pair<std::size_t, Tensor>>& leaves) {
  if (bound_) throw ContractViolation("parameter store already bound");
  for (const auto& [i, t] : leaves) {
    Entry& e = entries_.at(i);
    if (!(t.shape() == e.value.shape())) throw ContractViolation("leaf shape mismatch for " + e.name);
    e.leaf = t;
  }
  bound_ = true;
}

void ParamStore::unbind() {
  for (Entry& e : entries_) e.leaf = Tensor();
  bound_ = false;
}

std::size_t ParamStore::count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const Entry& e : entries_) {
    if (e.trainable && e.name.compare(0, prefix.size(), prefix) == 0) n += e.value.numel();
  }
  return n;
}

Tensor init_uniform(Shape shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape.numel());
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(shape, std::move(v));
}

Tensor Conv::operator()(const Tensor& x) const {
  return conv2d(x, store->get(weight), bias == ParamStore::kNone ? Tensor() : store->get(bias), opt);
}

Conv make_conv(ParamStore& store, const std::string& name, const ConvSpec& s, Rng& rng) {
  if (s.kernel % 2 == 0) throw ContractViolation(name + ": kernel must be odd");
  if (s.depthwise && s.in != s.out) throw ContractViolation(name + ": depthwise conv needs in == out");
  Conv c;
  c.store = &store;
  const int per_group_in = s.depthwise ? 1 : s.in;
  const int fan_in = per_group_in * s.kernel * s.kernel;
  c.weight = store.add(name + ".weight", init_uniform(Shape{s.out, per_group_in, s.kernel, s.kernel}, fan_in, rng));
  if (s.bias) c.bias = store.add(name + ".bias", init_uniform(Shape{1, s.out, 1, 1}, fan_in, rng));
  c.opt.stride = s.stride;
  c.opt.padding = s.kernel / 2;
  c.opt.pad_mode = s.pad_mode;
  c.opt.groups = s.depthwise ? s.in : 1;
  return c;
}

Tensor BatchNorm::operator()(const Tensor& x, const Mode& mode) const {
  BatchStats stats;
  Tensor y = batch_norm(x, store->get(gamma), store->get(beta), store->value(running_mean), store->value(running_var),
                        mode.training, eps, mode.training ? &stats : nullptr);
  if (mode.training) {
    auto blend = [&](std::size_t idx, const std::vector<double>& batch) {
      std::vector<double> r = store->value(idx).to_vector();
      for (std::size_t c = 0; c < r.size(); ++c) r[c] = (1.0 - momentum) * r[c] + momentum * batch[c];
      store->set_value(idx, Tensor(store->value(idx).shape(), std::move(r)));
    };
    blend(running_mean, stats.mean);
    blend(running_var, stats.var);
  }
  return y;
}

BatchNorm make_batch_norm(ParamStore& store, const std::string& name, int channels) {
  BatchNorm bn;
  bn.store = &store;
  const Shape s{1, channels, 1, 1};
  bn.gamma = store.add(name + ".weight", Tensor(s, 1.0));
  bn.beta = store.add(name + ".bias", Tensor(s, 0.0));
  bn.running_mean = store.add(name + ".running_mean", Tensor(s, 0.0), false);
  bn.running_var = store.add(name + ".running_var", Tensor(s, 1.0), false);
  return bn;
}

Tensor Linear::operator()(const Tensor& x) const {
  return fully_connected(x, store->get(weight), bias == ParamStore::kNone ? Tensor() : store->get(bias));
}

Linear make_linear(ParamStore& store, const std::string& name, int in, int out, bool bias, Rng& rng) {
  Linear l;
  l.store = &store;
  l.weight = store.add(name + ".weight", init_uniform(Shape{out, in, 1, 1}, in, rng));
  if (bias) l.bias = store.add(name + ".bias", init_uniform(Shape{1, out, 1, 1}, in, rng));
  return l;
}

}  // namespace hrdepth
