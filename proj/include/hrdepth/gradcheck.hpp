#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hrdepth/tensor.hpp"

namespace hrdepth {

class GradCheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t elements_checked = 0;
};

/// A differentiable computation under test. Must be a pure function of its
/// inputs and record onto whatever tape they are bound to.
using CheckedFn = std::function<Tensor(std::span<const Tensor>)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double abs_floor = 1e-8;
  /// Per-input flag; empty means every input is checked.
  std::vector<bool> wrt;
  /// Seeds the fixed projection weights used to reduce non-scalar outputs.
  std::uint64_t projection_seed = 0x5eed;
};

/// Compares tape gradients against central finite differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every element of every checked input.
/// Non-scalar outputs are reduced by a fixed random projection. Relative
/// error per element is |a - n| / max(|a|, |n|, abs_floor).
GradCheckReport grad_check(const CheckedFn& fn, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options = {});

/// Uniform random tensor in [lo, hi] from a seeded engine.
Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0);

}  // namespace hrdepth
