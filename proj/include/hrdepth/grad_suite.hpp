#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hrdepth/gradcheck.hpp"

namespace hrdepth {

/// One finite-difference check with inputs drawn from `seed`.
struct GradCase {
  std::string name;
  std::string group;  ///< "op", "geometry", "loss" or "network"
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

/// Every differentiable primitive, the view-synthesis chain, every loss and
/// a network slice.
const std::vector<GradCase>& grad_suite();

struct GradSuiteResult {
  std::string name;
  std::string group;
  double worst = 0.0;
  std::uint64_t worst_seed = 0;
  std::string error;  ///< non-empty if a check aborted
};

/// Runs each case over seeds 1..num_seeds and records the worst error.
std::vector<GradSuiteResult> run_grad_suite(int num_seeds, const std::string& filter = "");

}  // namespace hrdepth
