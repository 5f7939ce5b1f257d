#include "senformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "senformer/rng.hpp"

namespace senf {

GradcheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs,
                                  const GradcheckOptions& options) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  const Tensor<double> y = f();
  if (y.numel() != 1) throw ShapeError("finite_diff_check: f must be scalar, got " + shape_str(y.shape()));
  backward(y);
  {
    NoGradGuard no_grad;
    if (f().item() != y.item()) {
      throw NondeterministicFunction("finite_diff_check: two evaluations at the same point differ");
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> entries;
  Rng rng(options.seed);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    std::vector<std::pair<std::size_t, std::size_t>> own;
    for (std::size_t i = 0; i < inputs[t].numel(); ++i) own.emplace_back(t, i);
    if (options.per_input_entries > 0 && own.size() > options.per_input_entries) {
      std::shuffle(own.begin(), own.end(), rng.engine());
      own.resize(options.per_input_entries);
    }
    entries.insert(entries.end(), own.begin(), own.end());
  }
  if (options.max_entries > 0 && entries.size() > options.max_entries) {
    std::shuffle(entries.begin(), entries.end(), rng.engine());
    entries.resize(options.max_entries);
    std::sort(entries.begin(), entries.end());
  }

  GradcheckReport report;
  NoGradGuard no_grad;
  for (const auto& [t, i] : entries) {
    auto values = inputs[t].data();
    const auto grad = std::as_const(inputs[t]).grad();
    const double analytic = grad.empty() ? 0.0 : grad[i];
    const double original = values[i];
    double err = 0.0;
    for (std::size_t attempt = 0; attempt <= options.fallback_scales.size(); ++attempt) {
      const double eps = attempt == 0 ? options.eps : options.eps * options.fallback_scales[attempt - 1];
      values[i] = original + eps;
      const double up = f().item();
      values[i] = original - eps;
      const double down = f().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.abs_floor});
      err = std::abs(analytic - numeric) / denom;
      if (err <= options.tol) {
        if (attempt > 0) ++report.refined;
        break;
      }
    }
    if (err > report.max_rel_error || report.checked == 0) {
      report.max_rel_error = std::max(report.max_rel_error, err);
      report.worst = "input" + std::to_string(t) + "[" + std::to_string(i) + "]";
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

}  // namespace senf
