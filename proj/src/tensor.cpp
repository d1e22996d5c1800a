#include "hrdepth/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace hrdepth {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << ',' << c << ',' << h << ',' << w;
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(shape), storage_(std::make_shared<const std::vector<double>>(shape.numel(), fill)) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ContractViolation("negative tensor dimension: " + shape.str());
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ContractViolation("negative tensor dimension: " + shape.str());
  }
  if (data.size() != shape.numel()) {
    throw ContractViolation("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
  }
  storage_ = std::make_shared<const std::vector<double>>(std::move(data));
}

std::span<const double> Tensor::data() const {
  if (!storage_) return {};
  return {storage_->data(), storage_->size()};
}

double Tensor::at(int n, int c, int h, int w) const {
  const std::size_t idx =
      ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * static_cast<std::size_t>(shape_.w) + w;
  return (*storage_)[idx];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractViolation("item() on tensor of shape " + shape_.str());
  return (*storage_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.storage_ = storage_;
  return t;
}

Tensor Gradients::of(const Tensor& leaf) const {
  if (leaf.tape_ != tape_ || leaf.generation_ != generation_) {
    throw ContractViolation("gradient requested for a tensor that is not a leaf of this pass");
  }
  auto it = leaves_.find(leaf.node_);
  if (it == leaves_.end()) return Tensor(leaf.shape());
  return Tensor(it->second.shape, it->second.grad);
}

bool Gradients::has(const Tensor& leaf) const {
  return leaf.tape_ == tape_ && leaf.generation_ == generation_ && leaves_.count(leaf.node_) > 0;
}

void Tape::check_owned(const Tensor& t) const {
  if (t.tape_ != this) throw ContractViolation("tensor is bound to a different tape");
  if (t.generation_ != generation_) throw ContractViolation("tensor belongs to a finished backward pass");
}

Tensor Tape::watch(const Tensor& t) {
  if (!t.defined()) throw ContractViolation("watch() on undefined tensor");
  if (t.tape_ != nullptr) throw ContractViolation("tensor already participates in a tape");
  Node node;
  node.shape = t.shape();
  node.leaf = true;
  nodes_.push_back(std::move(node));
  Tensor out = t;
  out.tape_ = this;
  out.node_ = nodes_.size() - 1;
  out.generation_ = generation_;
  return out;
}

Tensor Tape::record(Tensor value, std::span<const Tensor> inputs, BackwardFn backward) {
  Node node;
  node.shape = value.shape();
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    if (in.tape_ == nullptr) {
      node.inputs.push_back(kNone);
    } else {
      check_owned(in);
      node.inputs.push_back(in.node_);
    }
  }
  nodes_.push_back(std::move(node));
  value.tape_ = this;
  value.node_ = nodes_.size() - 1;
  value.generation_ = generation_;
  return value;
}

Gradients Tape::backward(const Tensor& output) { return backward(output, Tensor(output.shape(), 1.0)); }

Gradients Tape::backward(const Tensor& output, const Tensor& seed) {
  check_owned(output);
  if (seed.shape() != output.shape()) {
    throw ContractViolation("seed shape " + seed.shape().str() + " does not match output shape " +
                            output.shape().str());
  }
  std::vector<std::vector<double>> grads(nodes_.size());
  grads[output.node_] = seed.to_vector();

  std::vector<double*> slots;
  for (std::size_t id = nodes_.size(); id-- > 0;) {
    Node& node = nodes_[id];
    if (node.leaf || grads[id].empty()) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (in == kNone) continue;
      if (grads[in].empty()) grads[in].assign(nodes_[in].shape.numel(), 0.0);
      slots[k] = grads[in].data();
    }
    node.backward(grads[id], slots);
    // Interior gradients are not needed once propagated.
    std::vector<double>().swap(grads[id]);
    node.backward = nullptr;
  }

  Gradients result;
  result.tape_ = this;
  result.generation_ = generation_;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].leaf && !grads[id].empty()) {
      result.leaves_.emplace(id, Gradients::Entry{nodes_[id].shape, std::move(grads[id])});
    }
  }
  nodes_.clear();
  ++generation_;
  return result;
}

Tape* Tape::common(std::span<const Tensor> inputs) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (t.tape_ == nullptr) continue;
    if (tape == nullptr) {
      tape = t.tape_;
    } else if (tape != t.tape_) {
      throw ContractViolation("op inputs are bound to different tapes");
    }
  }
  if (tape != nullptr) {
    for (const Tensor& t : inputs) {
      if (t.tape_ != nullptr) tape->check_owned(t);
    }
  }
  return tape;
}

Tensor maybe_record(Tensor value, std::span<const Tensor> inputs, BackwardFn fn) {
  Tape* tape = Tape::common(inputs);
  if (tape == nullptr) return value;
  return tape->record(std::move(value), inputs, std::move(fn));
}

}  // namespace hrdepth
