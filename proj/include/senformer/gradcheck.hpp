#pragma once

// Central finite-difference verification of analytic gradients (f64).

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "senformer/tensor.hpp"

namespace senf {

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // 0 checks every entry; otherwise a seeded sample of this many entries.
  std::size_t max_entries = 0;
  // When set, at most this many entries are drawn from every input instead,
  // so small tensors are never crowded out by large ones.
  std::size_t per_input_entries = 0;
  std::uint64_t seed = 0;
  // Denominator floor of the relative error, so entries whose true gradient
  // is zero are judged on an absolute scale.
  double abs_floor = 1e-6;
  // An entry that misses the tolerance is re-measured with eps scaled by each
  // factor in turn. Smaller steps stop straddling ReLU kinks; larger steps lift
  // tiny gradients above roundoff. A wrong analytic gradient disagrees at
  // every step size.
  std::vector<double> fallback_scales;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // entries that needed a fallback step
  bool passed = false;
  std::string worst;  // "input[i]" of the worst entry
};

class NondeterministicFunction : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// `f` must read the given leaf tensors and return a scalar. Inputs are
// perturbed in place and restored. The relative error of one entry is
// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
GradcheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs,
                                  const GradcheckOptions& options = {});

}  // namespace senf
