#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace hrdepth {

/// Raised when a caller breaks an operation's preconditions (shape, range, tape ownership).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// (batch, channel, height, width).
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Tape;

/// Dense 4-D array of doubles. Storage is shared and never mutated once the
/// tensor is constructed; copies are cheap. A tensor bound to a Tape carries
/// the id of the node that produced it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return shape_.numel(); }
  bool defined() const { return storage_ != nullptr; }

  std::span<const double> data() const;
  const double* ptr() const { return storage_->data(); }
  double at(int n, int c, int h, int w) const;
  double item() const;

  /// Copy of the values, safe to modify.
  std::vector<double> to_vector() const { return std::vector<double>(data().begin(), data().end()); }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  /// Same values, no tape participation.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

 private:
  friend class Tape;
  friend class Gradients;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> storage_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
  std::size_t generation_ = 0;
};

/// Gradient buffers handed to a node's backward function: one slot per
/// recorded input, null when that input does not need a gradient.
using GradSlots = std::span<double* const>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradSlots grad_in)>;

/// Result of Tape::backward: gradients of the seeded output w.r.t. each leaf.
class Gradients {
 public:
  /// Gradient for a leaf produced by Tape::watch. Zeros if the leaf did not
  /// influence the output.
  Tensor of(const Tensor& leaf) const;
  bool has(const Tensor& leaf) const;

 private:
  friend class Tape;
  struct Entry {
    Shape shape;
    std::vector<double> grad;
  };
  std::size_t generation_ = 0;
  const Tape* tape_ = nullptr;
  std::unordered_map<std::size_t, Entry> leaves_;
};

/// Define-by-run reverse-mode tape. Confined to one thread from the first
/// recorded op until backward returns.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `t` as a differentiable leaf on this tape.
  Tensor watch(const Tensor& t);

  /// Records an op. `value` is the forward result; `inputs` are the tensors
  /// the backward function distributes gradient to, in slot order.
  Tensor record(Tensor value, std::span<const Tensor> inputs, BackwardFn backward);
  Tensor record(Tensor value, std::initializer_list<Tensor> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(backward));
  }

  /// Reverse sweep from `output`. The seed defaults to ones shaped like the
  /// output. Intermediate buffers are released and the tape is reset.
  Gradients backward(const Tensor& output);
  Gradients backward(const Tensor& output, const Tensor& seed);

  std::size_t size() const { return nodes_.size(); }

  /// Tape of the first input bound to a tape; throws if inputs are bound to
  /// different tapes or to a finished pass.
  static Tape* common(std::span<const Tensor> inputs);
  static Tape* common(std::initializer_list<Tensor> inputs) {
    return common(std::span<const Tensor>(inputs.begin(), inputs.size()));
  }

 private:
  struct Node {
    std::vector<std::size_t> inputs;  // node ids; npos for constants
    Shape shape;
    BackwardFn backward;
    bool leaf = false;
  };
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  void check_owned(const Tensor& t) const;

  std::vector<Node> nodes_;
  std::size_t generation_ = 1;
};

/// Records `fn` on the tape shared by `inputs`, if any. Returns `value`
/// unchanged when no input requires a gradient.
Tensor maybe_record(Tensor value, std::span<const Tensor> inputs, BackwardFn fn);
inline Tensor maybe_record(Tensor value, std::initializer_list<Tensor> inputs, BackwardFn fn) {
  return maybe_record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(fn));
}

}  // namespace hrdepth
