#include "rwkv_clip/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace rwkv_clip {

namespace {

double evaluate(const DifferentiableFn& f, const std::vector<Tensor>& inputs) {
  NoGradGuard no_grad;
  auto out = f(inputs);
  double acc = 0.0;
  for (double v : out.data()) acc += v;
  if (!std::isfinite(acc)) throw NumericError("grad_check: non-finite function value");
  return acc;
}

}  // namespace

GradCheckReport grad_check(const DifferentiableFn& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options, std::string name) {
  RWKV_CHECK(options.step > 0.0, "grad_check: step must be positive");
  GradCheckReport report;
  report.name = std::move(name);

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    for (auto& t : inputs) t.zero_grad();
    auto out = f(inputs);
    auto root = sum(out);
    tape.backward(root);
    for (auto& t : inputs) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(t.numel(), 0.0);
      }
    }
  }

  for (std::size_t which = 0; which < inputs.size(); ++which) {
    auto& t = inputs[which];
    if (!t.requires_grad()) continue;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double original = data[i];
      data[i] = original + options.step;
      const double plus = evaluate(f, inputs);
      data[i] = original - options.step;
      const double minus = evaluate(f, inputs);
      data[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[which][i];
      const double abs_err = std::abs(a - numeric);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      report.max_rel_err = std::max(report.max_rel_err, rel_err);
      if (abs_err > options.abs_tol && rel_err > options.rel_tol) report.passed = false;
      ++report.coordinates;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return report;
}

}  // namespace rwkv_clip
