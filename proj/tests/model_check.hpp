#pragma once

// Structural checks on whole models shared by the unit tests and the
// acceptance harness.

#include <string>
#include <vector>

#include "senformer/model.hpp"
#include "test_support.hpp"

namespace senf::test {

inline ModelConfig small_model_config(SharingPolicy sharing, std::size_t blocks = 2) {
  ModelConfig c;
  c.d = 16;
  c.num_blocks = blocks;
  c.n_classes = 3;
  c.sharing = sharing;
  c.seed = 11;
  return c;
}

// Parameters owned by learner `i` alone (its embeddings and decoder blocks).
template <typename T>
std::vector<Tensor<T>> learner_parameters(const EnsembleModel<T>& model, std::size_t i) {
  ParameterList<T> ps;
  ps.add("cls", model.learners[i].embeddings->cls);
  for (const auto& b : model.learners[i].blocks) b->collect("b", ps);
  std::vector<Tensor<T>> out;
  for (const auto& p : ps.items()) out.push_back(p.tensor);
  return out;
}

struct IndependenceResult {
  std::size_t trials = 0;
  std::size_t violations = 0;
  std::string detail;
};

// Perturbs every parameter of one randomly chosen learner and checks that the
// other learners' logits are bit-identical.
inline IndependenceResult independence_trials(SharingPolicy sharing, std::size_t trials, std::uint64_t seed) {
  IndependenceResult r;
  EnsembleModel<float> model(small_model_config(sharing));
  const auto images = random_tensor<float>({1, 3, 32, 32}, seed, 0, 1);
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<Tensor<float>> before;
    {
      NoGradGuard ng;
      before = model.learner_logits(images, false);
    }
    const std::size_t victim = rng.index(model.learners.size());
    for (auto p : learner_parameters(model, victim)) {
      for (auto& v : p.data()) v += static_cast<float>(rng.uniform(-0.5, 0.5));
    }
    std::vector<Tensor<float>> after;
    {
      NoGradGuard ng;
      after = model.learner_logits(images, false);
    }
    ++r.trials;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const bool same = bit_equal(before[i], after[i]);
      if (i != victim && !same) {
        ++r.violations;
        r.detail = "learner " + std::to_string(i) + " changed after perturbing " + std::to_string(victim);
      }
      if (i == victim && same) {
        ++r.violations;
        r.detail = "perturbed learner " + std::to_string(i) + " unchanged";
      }
    }
  }
  return r;
}

}  // namespace senf::test
