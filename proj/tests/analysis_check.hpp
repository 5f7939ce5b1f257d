#pragma once

// Metric probes shared by the unit tests and the acceptance harness.

#include <string>

#include "oracles.hpp"
#include "senformer/analysis.hpp"

namespace senf::test {

struct MiouCaseResult {
  std::size_t cases = 0;
  std::size_t mismatches = 0;
  std::string detail;
};

// Random 4x4 maps with 2..6 classes and some ignored pixels; the matrix-based
// mIoU must equal the set-counting oracle exactly.
inline MiouCaseResult miou_random_cases(std::size_t count, std::uint64_t seed) {
  MiouCaseResult r;
  Rng rng(seed);
  for (std::size_t c = 0; c < count; ++c) {
    const int n = rng.integer(2, 6);
    std::vector<std::int32_t> truth(16), pred(16);
    for (std::size_t i = 0; i < 16; ++i) {
      truth[i] = rng.bernoulli(0.1) ? kIgnoreIndex : rng.integer(0, n - 1);
      pred[i] = rng.integer(0, n - 1);
    }
    ConfusionMatrix cm(static_cast<std::size_t>(n));
    cm.add(truth, pred);
    const IoUResult got = miou(cm);
    const oracle::IoU want = oracle::iou_by_sets(truth, pred, n);
    bool ok = got.mean == want.mean;
    for (int k = 0; k < n; ++k) {
      const auto it = want.per_class.find(k);
      const auto& g = got.per_class[static_cast<std::size_t>(k)];
      if (it == want.per_class.end()) ok = ok && !g.has_value();
      else ok = ok && g.has_value() && *g == it->second;
    }
    ++r.cases;
    if (!ok) {
      ++r.mismatches;
      r.detail = "case " + std::to_string(c) + ": got " + std::to_string(got.mean) + " want " + std::to_string(want.mean);
    }
  }
  return r;
}

}  // namespace senf::test
