#include "senformer/analysis.hpp"

#include <cmath>
#include <stdexcept>

namespace senf {

ConfusionMatrix::ConfusionMatrix(std::size_t n_classes) : n_(n_classes), counts_(n_classes * n_classes, 0) {}

void ConfusionMatrix::add(std::span<const std::int32_t> truth, std::span<const std::int32_t> prediction,
                          std::int32_t ignore_index) {
  if (truth.size() != prediction.size()) {
    throw std::invalid_argument("confusion matrix: " + std::to_string(truth.size()) + " labels vs " +
                                std::to_string(prediction.size()) + " predictions");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == ignore_index) continue;
    const auto t = static_cast<std::size_t>(truth[i]);
    const auto p = static_cast<std::size_t>(prediction[i]);
    if (truth[i] < 0 || t >= n_ || prediction[i] < 0 || p >= n_) {
      throw std::out_of_range("confusion matrix: class index outside [0, " + std::to_string(n_) + ")");
    }
    ++counts_[t * n_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw std::invalid_argument("confusion matrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

IoUResult miou(const ConfusionMatrix& cm) {
  const std::size_t n = cm.classes();
  IoUResult r;
  r.per_class.resize(n);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t denom = row + col - tp;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += *r.per_class[c];
    ++used;
  }
  if (used == 0) throw std::domain_error("no evaluable classes");
  r.mean = sum / static_cast<double>(used);
  return r;
}

Tensor<float> stack_images(const Dataset& data, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > data.samples.size()) throw std::out_of_range("stack_images: bad range");
  const std::size_t h = data.samples[first].height, w = data.samples[first].width;
  std::vector<float> values;
  values.reserve(count * 3 * h * w);
  for (std::size_t i = first; i < first + count; ++i) {
    const auto& s = data.samples[i];
    if (s.height != h || s.width != w) throw std::invalid_argument("stack_images: samples differ in size");
    values.insert(values.end(), s.image.begin(), s.image.end());
  }
  return Tensor<float>::from_data({count, 3, h, w}, std::move(values));
}

namespace {

std::vector<std::int32_t> stack_labels(const Dataset& data, std::size_t first, std::size_t count) {
  std::vector<std::int32_t> out;
  for (std::size_t i = first; i < first + count; ++i) {
    out.insert(out.end(), data.samples[i].labels.begin(), data.samples[i].labels.end());
  }
  return out;
}

struct RowSpec {
  LearnerMask mask;
  MergeStrategy strategy;
};

// Merged input-resolution prediction of every row, one batch at a time.
template <typename Fn>
void predict_rows(EnsembleModel<float>& model, const Dataset& data, const std::vector<RowSpec>& rows,
                  std::size_t batch_size, Fn&& consume) {
  NoGradGuard no_grad;
  for_each_batch(data, batch_size, [&](const Tensor<float>& images, std::size_t first, std::size_t count) {
    const auto logits = model.learner_logits(images, false);
    const auto aligned = align_logits(logits, logits[0].dim(2), logits[0].dim(3));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Tensor<float> merged = model.merge_predictions(aligned, rows[r].mask, rows[r].strategy, false);
      consume(r, upsample_bilinear(merged, images.dim(2), images.dim(3)), first, count);
    }
  });
}

std::vector<ConfusionMatrix> confusion_rows(EnsembleModel<float>& model, const Dataset& data,
                                            const std::vector<RowSpec>& rows, std::size_t batch_size) {
  std::vector<ConfusionMatrix> cms(rows.size(), ConfusionMatrix(model.config().n_classes));
  predict_rows(model, data, rows, batch_size,
               [&](std::size_t r, const Tensor<float>& pred, std::size_t first, std::size_t count) {
                 cms[r].add(stack_labels(data, first, count), argmax(pred, 1));
               });
  return cms;
}

LearnerMask single(std::size_t m, std::size_t i) {
  LearnerMask mask(m, false);
  mask[i] = true;
  return mask;
}

}  // namespace

EvalResult evaluate(EnsembleModel<float>& model, const Dataset& data, std::size_t batch_size) {
  const std::size_t m = model.learners.size();
  std::vector<RowSpec> rows;
  for (std::size_t i = 0; i < m; ++i) rows.push_back({single(m, i), MergeStrategy::kAverage});
  rows.push_back({model.full_mask(), model.config().merge});
  const auto cms = confusion_rows(model, data, rows, batch_size);
  EvalResult r;
  for (std::size_t i = 0; i < m; ++i) r.learner_miou.push_back(miou(cms[i]).mean);
  r.ensemble_miou = miou(cms.back()).mean;
  return r;
}

double evaluate_subset(EnsembleModel<float>& model, const Dataset& data, const LearnerMask& mask,
                       MergeStrategy strategy, std::size_t batch_size) {
  return miou(confusion_rows(model, data, {{mask, strategy}}, batch_size)[0]).mean;
}

AblationTable subset_ablation(EnsembleModel<float>& model, const Dataset& data, MergeStrategy strategy,
                              std::size_t batch_size) {
  AblationTable table;
  const MergeStrategy partial = uses_attention(strategy) ? MergeStrategy::kAverage : strategy;
  for (std::size_t level = 2; level <= 5; ++level) {
    table.rows.push_back({"d" + std::to_string(level), model.mask_for_levels({level}), partial, 0.0});
  }
  table.rows.push_back({"d2+d3+d4", model.mask_for_levels({2, 3, 4}), partial, 0.0});
  table.rows.push_back({"all", model.full_mask(), strategy, 0.0});

  std::vector<RowSpec> specs;
  for (const auto& row : table.rows) specs.push_back({row.mask, row.strategy});
  const auto cms = confusion_rows(model, data, specs, batch_size);
  double sum = 0.0;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    table.rows[r].miou = miou(cms[r]).mean;
    if (r < 4) sum += table.rows[r].miou;
  }
  table.learner_mean = sum / 4.0;
  return table;
}

double mean_channel_variance(const Tensor<float>& prediction) {
  const std::size_t axis = class_axis(prediction);
  const Shape& s = prediction.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  const auto v = prediction.data();
  double total = 0.0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double mean = 0.0;
      for (std::size_t k = 0; k < n; ++k) mean += v[(o * n + k) * inner + in];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double dlt = v[(o * n + k) * inner + in] - mean;
        var += dlt * dlt;
      }
      total += var / static_cast<double>(n);
    }
  }
  return total / static_cast<double>(outer * inner);
}

VarianceTable channel_variance(EnsembleModel<float>& model, const Dataset& data, std::size_t batch_size) {
  const std::size_t m = model.learners.size();
  std::vector<RowSpec> rows;
  rows.push_back({model.full_mask(), model.config().merge});
  for (std::size_t i = 0; i < m; ++i) rows.push_back({single(m, i), MergeStrategy::kAverage});
  std::vector<double> sums(rows.size(), 0.0);
  predict_rows(model, data, rows, batch_size,
               [&](std::size_t r, const Tensor<float>& pred, std::size_t, std::size_t count) {
                 sums[r] += mean_channel_variance(pred) * static_cast<double>(count);
               });
  const auto n = static_cast<double>(data.samples.size());
  VarianceTable t;
  t.ensemble = sums[0] / n;
  for (std::size_t i = 0; i < m; ++i) t.learners.push_back(sums[i + 1] / n);
  return t;
}

std::vector<CosineStats> cosine_similarity_stats(const std::vector<Tensor<float>>& cls_sets) {
  std::vector<CosineStats> out;
  for (const auto& cls : cls_sets) {
    if (cls.ndim() != 2 || cls.dim(0) < 2) throw std::invalid_argument("cosine stats need an [N>=2, d] matrix");
    const std::size_t n = cls.dim(0), d = cls.dim(1);
    const auto v = cls.data();
    std::vector<double> norms(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t j = 0; j < d; ++j) norms[k] += static_cast<double>(v[k * d + j]) * v[k * d + j];
      norms[k] = std::sqrt(norms[k]);
    }
    CosineStats st;
    st.histogram.assign(kCosineBins, 0);
    double abs_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t l = k + 1; l < n; ++l) {
        if (norms[k] == 0.0 || norms[l] == 0.0) {
          ++st.skipped;
          continue;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(v[k * d + j]) * v[l * d + j];
        const double c = std::clamp(dot / (norms[k] * norms[l]), -1.0, 1.0);
        auto bin = static_cast<std::size_t>((c + 1.0) / 2.0 * static_cast<double>(kCosineBins));
        if (bin >= kCosineBins) bin = kCosineBins - 1;
        ++st.histogram[bin];
        abs_sum += std::fabs(c);
        ++st.pairs;
      }
    }
    st.mean_abs = st.pairs ? abs_sum / static_cast<double>(st.pairs) : 0.0;
    out.push_back(std::move(st));
  }
  return out;
}

}  // namespace senf
