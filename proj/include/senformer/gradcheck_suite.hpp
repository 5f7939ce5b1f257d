#pragma once

// Finite-difference checks of every differentiable operator and of the full
// model, as run by `senformer gradcheck`.

#include <string>
#include <vector>

#include "senformer/gradcheck.hpp"
#include "senformer/model.hpp"

namespace senf {

struct GradcheckRow {
  std::string name;
  std::size_t checked = 0;
  std::size_t refined = 0;
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool passed = false;
  std::string worst;
};

// One row per operator; `options.tol` is the pass threshold.
std::vector<GradcheckRow> operator_gradchecks(const GradcheckOptions& options);

struct ModelGradcheckSetup {
  ModelConfig model;
  std::size_t size = 32;
  std::size_t batch = 2;
  std::size_t entries_per_tensor = 2;
  std::vector<double> fallback_scales = {0.1, 0.01, 10.0};
};

// The toy configuration: d=16, L=2, 2 classes, 32x32 input, batch 2.
ModelGradcheckSetup toy_model_setup();

// Checks d(loss)/d(theta) on a sampled subset of every parameter tensor.
GradcheckRow model_gradcheck(const ModelGradcheckSetup& setup, const GradcheckOptions& options);
// The toy model under a few sharing / merge / pyramid combinations.
std::vector<GradcheckRow> model_gradchecks(const GradcheckOptions& options);

std::string format_gradcheck_table(const std::vector<GradcheckRow>& rows);

}  // namespace senf
