#pragma once

// Random merge instances checked against the plain-loop oracles.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "senformer/merge.hpp"
#include "senformer/ops.hpp"

namespace senf::test {

struct MergeCheckResult {
  std::size_t instances = 0;
  double max_error[5] = {0, 0, 0, 0, 0};  // average, product, majority, hierarchical, explicit
  bool argmax_invariant = true;
};

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

// M = 4 learners, N drawn from 2..6, 4x4 grids.
inline MergeCheckResult run_merge_instances(std::size_t count, std::uint64_t seed) {
  using D = Tensor<double>;
  MergeCheckResult r;
  Rng rng(seed);
  for (std::size_t inst = 0; inst < count; ++inst) {
    const std::size_t n = 2 + rng.index(5);
    const Shape shape{n, 4, 4};
    std::vector<D> logits, probs;
    std::vector<oracle::Plane> lv, pv;
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<double> v(n * 16);
      const double spread = rng.uniform(0.5, 6.0);
      for (auto& x : v) x = rng.uniform(-spread, spread);
      logits.push_back(D::from_data(shape, v));
      lv.push_back(v);
      pv.push_back(oracle::softmax_planes(v, n));
      probs.push_back(D::from_data(shape, pv.back()));
    }
    r.max_error[0] = std::max(r.max_error[0], max_abs_diff(merge_average(probs).to_vector(), oracle::average(pv)));
    const auto raw = oracle::product_raw(pv);
    const auto prod = merge_product(probs).to_vector();
    r.max_error[1] = std::max(r.max_error[1], max_abs_diff(prod, oracle::renormalise(raw, n)));
    if (oracle::argmax(prod, n) != oracle::argmax(merge_product_raw(probs).to_vector(), n) ||
        oracle::argmax(prod, n) != oracle::argmax(raw, n)) {
      r.argmax_invariant = false;
    }
    r.max_error[2] = std::max(r.max_error[2], max_abs_diff(merge_majority(probs).to_vector(), oracle::majority(pv, n)));

    Rng mrng(rng.next());
    std::vector<AttentionModule<double>> modules;
    for (std::size_t k = 0; k < 4; ++k) modules.push_back(AttentionModule<double>::make(n, 4, mrng));
    std::vector<oracle::Plane> masks;
    for (std::size_t k = 0; k < 4; ++k) {
      auto m = modules[k].forward(reshape(logits[k], {1, n, 4, 4}), false);
      masks.push_back(m.to_vector());
    }
    std::vector<AttentionModule<double>> three(modules.begin(), modules.begin() + 3);
    r.max_error[3] = std::max(r.max_error[3], max_abs_diff(merge_hierarchical(logits, three, false).to_vector(),
                                                           oracle::hierarchical(lv, masks, n)));
    r.max_error[4] = std::max(r.max_error[4], max_abs_diff(merge_explicit(logits, modules, false).to_vector(),
                                                           oracle::explicit_weighted(lv, masks, n)));
    ++r.instances;
  }
  return r;
}

}  // namespace senf::test
