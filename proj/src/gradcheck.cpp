#include "hrdepth/gradcheck.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "hrdepth/rng.hpp"

namespace hrdepth {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<double> v(shape.numel());
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

namespace {

double projected(const Tensor& y, const std::vector<double>& weights) {
  double acc = 0.0;
  auto d = y.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      std::ostringstream os;
      os << "non-finite value " << d[i] << " at output element " << i << " during finite differencing";
      throw GradCheckError(os.str());
    }
    acc += weights[i] * d[i];
  }
  return acc;
}

}  // namespace

GradCheckReport grad_check(const CheckedFn& fn, const std::vector<Tensor>& inputs, const GradCheckOptions& options) {
  if (!(options.eps > 0.0 && options.eps <= 1e-3)) {
    throw ContractViolation("grad_check eps must lie in (0, 1e-3]");
  }
  if (!options.wrt.empty() && options.wrt.size() != inputs.size()) {
    throw ContractViolation("grad_check wrt mask length does not match input count");
  }
  auto checked = [&](std::size_t i) { return options.wrt.empty() || options.wrt[i]; };

  // Analytic pass.
  Tape tape;
  std::vector<Tensor> bound;
  bound.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    bound.push_back(checked(i) ? tape.watch(inputs[i].detach()) : inputs[i].detach());
  }
  Tensor y = fn(bound);
  for (double v : y.data()) {
    if (!std::isfinite(v)) throw GradCheckError("non-finite value in forward pass");
  }
  std::vector<double> weights(y.numel(), 1.0);
  if (y.numel() > 1) {
    Rng rng(options.projection_seed);
    for (double& w : weights) w = rng.uniform(0.5, 1.5) * (rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0);
  }
  if (!y.requires_grad()) throw GradCheckError("checked function output does not depend on any checked input");
  Gradients grads = tape.backward(y, Tensor(y.shape(), weights));

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!checked(i)) continue;
    const Tensor analytic = grads.of(bound[i]);
    std::vector<double> base = inputs[i].to_vector();
    for (std::size_t j = 0; j < base.size(); ++j) {
      auto eval_at = [&](double value) {
        std::vector<double> pert = base;
        pert[j] = value;
        std::vector<Tensor> args;
        args.reserve(inputs.size());
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          args.push_back(k == i ? Tensor(inputs[i].shape(), std::move(pert)) : inputs[k].detach());
        }
        return projected(fn(args), weights);
      };
      const double numeric = (eval_at(base[j] + options.eps) - eval_at(base[j] - options.eps)) / (2.0 * options.eps);
      const double a = analytic.data()[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (rel > report.max_rel_error || report.elements_checked == 1) {
        report.max_rel_error = rel;
        report.worst_input = i;
        report.worst_index = j;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace hrdepth
