#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rwkv_clip/grad_check.hpp"

namespace rwkv_clip {

struct GradSuiteResult {
  std::string module;  // tensor-autodiff, shift-lerp, wkv-kernel, blocks-encoders, contrastive
  GradCheckReport report;
  double rel_tol = 0.0;
};

struct GradSuiteOptions {
  std::uint64_t seed = 0;
  double rel_tol = 1e-5;
  /// Looser bound for whole encoder towers.
  double end_to_end_rel_tol = 1e-4;
  double abs_tol = 1e-9;
  double step = 1e-5;
};

/// Finite-difference checks of every differentiable op, each through a random
/// weighted readout. `on_result` sees results as they finish.
std::vector<GradSuiteResult> run_grad_suite(const GradSuiteOptions& options = {},
                                            const std::function<void(const GradSuiteResult&)>& on_result = {});

}  // namespace rwkv_clip
