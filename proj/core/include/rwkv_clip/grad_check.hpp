#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rwkv_clip/tensor.hpp"

namespace rwkv_clip {

struct GradCheckOptions {
  double step = 1e-5;
  double rel_tol = 1e-6;
  // Coordinates whose absolute error is below this pass regardless of rel_tol.
  double abs_tol = 1e-9;
};

struct GradCheckReport {
  std::string name;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t coordinates = 0;
  bool passed = true;
};

using DifferentiableFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares tape gradients of sum(f(inputs)) against central differences
/// (f(x+h) - f(x-h)) / 2h for every coordinate of every requires_grad input.
/// Inputs are perturbed in place and restored.
GradCheckReport grad_check(const DifferentiableFn& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {}, std::string name = {});

}  // namespace rwkv_clip
