#include "senformer/merge.hpp"

#include <stdexcept>

namespace senf {

MergeStrategy parse_merge_strategy(std::string_view name) {
  if (name == "average") return MergeStrategy::kAverage;
  if (name == "product") return MergeStrategy::kProduct;
  if (name == "majority") return MergeStrategy::kMajority;
  if (name == "hierarchical") return MergeStrategy::kHierarchical;
  if (name == "explicit") return MergeStrategy::kExplicit;
  throw std::invalid_argument("unknown merge strategy '" + std::string(name) +
                              "' (average|product|majority|hierarchical|explicit)");
}

std::string_view to_string(MergeStrategy s) {
  switch (s) {
    case MergeStrategy::kAverage: return "average";
    case MergeStrategy::kProduct: return "product";
    case MergeStrategy::kMajority: return "majority";
    case MergeStrategy::kHierarchical: return "hierarchical";
    case MergeStrategy::kExplicit: return "explicit";
  }
  return "?";
}

bool uses_attention(MergeStrategy s) {
  return s == MergeStrategy::kHierarchical || s == MergeStrategy::kExplicit;
}

std::size_t attention_module_count(MergeStrategy s) {
  if (s == MergeStrategy::kHierarchical) return 3;
  if (s == MergeStrategy::kExplicit) return 4;
  return 0;
}

MergeSpace parse_merge_space(std::string_view name) {
  if (name == "prob") return MergeSpace::kProb;
  if (name == "logit") return MergeSpace::kLogit;
  throw std::invalid_argument("unknown merge space '" + std::string(name) + "' (prob|logit)");
}

std::string_view to_string(MergeSpace s) { return s == MergeSpace::kProb ? "prob" : "logit"; }

namespace {

template <typename T>
void require_nonempty(const std::vector<Tensor<T>>& xs, const char* what) {
  if (xs.empty()) throw std::invalid_argument(std::string(what) + ": no predictions to merge");
}

template <typename T>
Tensor<T> sum_all(const std::vector<Tensor<T>>& xs) {
  Tensor<T> acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> align_logits(const std::vector<Tensor<T>>& logits, std::size_t h, std::size_t w) {
  require_nonempty(logits, "align_logits");
  std::vector<Tensor<T>> out;
  out.reserve(logits.size());
  for (const auto& x : logits) {
    class_axis(x);
    const std::size_t nd = x.ndim();
    out.push_back(x.dim(nd - 2) == h && x.dim(nd - 1) == w ? x : upsample_bilinear(x, h, w));
  }
  return out;
}

template <typename T>
Tensor<T> merge_average(const std::vector<Tensor<T>>& probs) {
  require_nonempty(probs, "merge_average");
  return scale(sum_all(probs), T(1) / static_cast<T>(probs.size()));
}

template <typename T>
Tensor<T> merge_product(const std::vector<Tensor<T>>& probs) {
  require_nonempty(probs, "merge_product");
  std::vector<Tensor<T>> logs;
  for (const auto& p : probs) logs.push_back(log(p, static_cast<T>(kProductFloor)));
  return softmax(sum_all(logs), class_axis(probs[0]));
}

template <typename T>
Tensor<T> merge_product_raw(const std::vector<Tensor<T>>& probs) {
  require_nonempty(probs, "merge_product_raw");
  Tensor<T> acc = probs[0];
  for (std::size_t i = 1; i < probs.size(); ++i) acc = mul(acc, probs[i]);
  return acc;
}

template <typename T>
Tensor<T> merge_majority(const std::vector<Tensor<T>>& probs) {
  require_nonempty(probs, "merge_majority");
  const std::size_t axis = class_axis(probs[0]);
  std::vector<Tensor<T>> votes;
  for (const auto& p : probs) {
    const auto winners = argmax(p, axis);
    const Shape& s = p.shape();
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    std::vector<T> mask(p.numel(), T(0));
    for (std::size_t pos = 0; pos < winners.size(); ++pos) {
      const std::size_t o = pos / inner, in = pos % inner;
      mask[(o * n + static_cast<std::size_t>(winners[pos])) * inner + in] = T(1);
    }
    votes.push_back(mul(p, Tensor<T>::from_data(s, std::move(mask))));
  }
  return scale(sum_all(votes), T(1) / static_cast<T>(probs.size()));
}

template <typename T>
Tensor<T> merge_hierarchical(const std::vector<Tensor<T>>& logits, const std::vector<Tensor<T>>& alphas) {
  if (logits.size() != 4 || alphas.size() != 3) {
    throw std::invalid_argument("merge_hierarchical needs 4 predictions and 3 masks, got " +
                                std::to_string(logits.size()) + " and " + std::to_string(alphas.size()));
  }
  Tensor<T> acc = logits[3];
  for (std::size_t k = 3; k-- > 0;) {
    const Tensor<T>& a = alphas[k];
    acc = add(mul(a, logits[k]), mul(add_scalar(scale(a, T(-1)), T(1)), acc));
  }
  return acc;
}

template <typename T>
Tensor<T> merge_explicit(const std::vector<Tensor<T>>& logits, const std::vector<Tensor<T>>& weights) {
  if (logits.size() != 4 || weights.size() != 4) {
    throw std::invalid_argument("merge_explicit needs 4 predictions and 4 masks, got " +
                                std::to_string(logits.size()) + " and " + std::to_string(weights.size()));
  }
  std::vector<Tensor<T>> terms;
  for (std::size_t i = 0; i < 4; ++i) terms.push_back(mul(weights[i], logits[i]));
  return div(sum_all(terms), add_scalar(sum_all(weights), static_cast<T>(kExplicitEps)));
}

template <typename T>
AttentionModule<T> AttentionModule<T>::make(std::size_t n_classes, std::size_t hidden, Rng& rng) {
  return {ConvBnRelu<T>::make(n_classes, hidden, 3, 1, rng), ConvBnRelu<T>::make(hidden, hidden, 3, 1, rng),
          Conv2d<T>::make(hidden, 1, 1, 1, rng)};
}

template <typename T>
Tensor<T> AttentionModule<T>::forward(const Tensor<T>& logits, bool training) {
  return sigmoid(out(conv2.forward(conv1.forward(logits, training), training)));
}

template <typename T>
void AttentionModule<T>::collect(const std::string& prefix, ParameterList<T>& out_params, double lr_scale) const {
  conv1.collect(prefix + ".conv1", out_params, lr_scale);
  conv2.collect(prefix + ".conv2", out_params, lr_scale);
  out.collect(prefix + ".out", out_params, lr_scale);
}

template <typename T>
void AttentionModule<T>::buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out_buffers) {
  conv1.buffers(prefix + ".conv1", out_buffers);
  conv2.buffers(prefix + ".conv2", out_buffers);
}

namespace {

template <typename T>
Tensor<T> with_batch(const Tensor<T>& x) {
  if (x.ndim() == 4) return x;
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  return reshape(x, s);
}

// Module masks come out as [B,1,h,w]; drop the batch axis for unbatched inputs.
template <typename T>
Tensor<T> module_mask(AttentionModule<T>& m, const Tensor<T>& x, bool training) {
  Tensor<T> mask = m.forward(with_batch(x), training);
  if (x.ndim() == 3) mask = reshape(mask, {1, x.dim(1), x.dim(2)});
  return mask;
}

}  // namespace

template <typename T>
Tensor<T> merge_hierarchical(const std::vector<Tensor<T>>& logits, std::vector<AttentionModule<T>>& modules,
                             bool training) {
  if (modules.size() != 3) {
    throw std::invalid_argument("hierarchical merge needs 3 attention modules, got " + std::to_string(modules.size()));
  }
  if (logits.size() != 4) throw std::invalid_argument("hierarchical merge needs the 4 learners");
  std::vector<Tensor<T>> alphas;
  for (std::size_t i = 0; i < 3; ++i) alphas.push_back(module_mask(modules[i], logits[i], training));
  return merge_hierarchical(logits, alphas);
}

template <typename T>
Tensor<T> merge_explicit(const std::vector<Tensor<T>>& logits, std::vector<AttentionModule<T>>& modules,
                         bool training) {
  if (modules.size() != 4) {
    throw std::invalid_argument("explicit merge needs 4 attention modules, got " + std::to_string(modules.size()));
  }
  if (logits.size() != 4) throw std::invalid_argument("explicit merge needs the 4 learners");
  std::vector<Tensor<T>> weights;
  for (std::size_t i = 0; i < 4; ++i) weights.push_back(module_mask(modules[i], logits[i], training));
  return merge_explicit(logits, weights);
}

#define SENF_INSTANTIATE_MERGE(T)                                                                            \
  template std::vector<Tensor<T>> align_logits(const std::vector<Tensor<T>>&, std::size_t, std::size_t);   \
  template Tensor<T> merge_average(const std::vector<Tensor<T>>&);                                          \
  template Tensor<T> merge_product(const std::vector<Tensor<T>>&);                                          \
  template Tensor<T> merge_product_raw(const std::vector<Tensor<T>>&);                                      \
  template Tensor<T> merge_majority(const std::vector<Tensor<T>>&);                                         \
  template Tensor<T> merge_hierarchical(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&);      \
  template Tensor<T> merge_explicit(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&);          \
  template struct AttentionModule<T>;                                                                       \
  template Tensor<T> merge_hierarchical(const std::vector<Tensor<T>>&, std::vector<AttentionModule<T>>&, bool); \
  template Tensor<T> merge_explicit(const std::vector<Tensor<T>>&, std::vector<AttentionModule<T>>&, bool);

SENF_INSTANTIATE_MERGE(float)
SENF_INSTANTIATE_MERGE(double)

#undef SENF_INSTANTIATE_MERGE

}  // namespace senf
