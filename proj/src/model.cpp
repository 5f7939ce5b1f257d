#include "senformer/model.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace senf {

HeadKind parse_head_kind(std::string_view name) {
  if (name == "ensemble") return HeadKind::kEnsemble;
  if (name == "features_fusion") return HeadKind::kFeaturesFusion;
  throw std::invalid_argument("unknown head '" + std::string(name) + "' (ensemble|features_fusion)");
}

std::string_view to_string(HeadKind h) { return h == HeadKind::kEnsemble ? "ensemble" : "features_fusion"; }

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (d < 4) fail("d must be >= 4");
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (num_blocks < 1) fail("num_blocks must be >= 1");
  if (heads == 0 || d % heads) fail("heads must divide d");
  if (window_heads == 0 || d % window_heads) fail("window_heads must divide d");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (window < 1) fail("window must be >= 1");
  if (learners_per_scale < 1) fail("learners_per_scale must be >= 1");
  if (attention_hidden < 1) fail("attention_hidden must be >= 1");
  if (uses_attention(merge)) {
    if (learners_per_scale != 1) {
      fail(std::string(to_string(merge)) + " merge requires exactly 4 learners (learners_per_scale = 1)");
    }
    if (head != HeadKind::kEnsemble) fail(std::string(to_string(merge)) + " merge requires the ensemble head");
  }
}

template <typename T>
EnsembleModel<T>::EnsembleModel(const ModelConfig& config)
    : config_((config.validate(), config)),
      init_rng_(config.seed),
      backbone(init_rng_),
      pyramid(config.pyramid, config.d, kBackboneChannels,
              WindowBlockConfig{config.window, config.window_heads, config.mlp_ratio}, init_rng_) {
  if (config_.head == HeadKind::kFeaturesFusion) {
    fusion = std::make_unique<FeaturesFusion<T>>(config_.d, init_rng_);
  }

  const std::size_t m = config_.learner_count();
  const std::size_t n = config_.n_classes, d = config_.d, depth = config_.num_blocks;
  const DecoderConfig dc{d, config_.heads, config_.mlp_ratio, config_.norm};
  const SharingPolicy policy = config_.sharing;

  std::shared_ptr<ClassEmbeddings<T>> shared_cls;
  if (policy == SharingPolicy::kClsShared) {
    shared_cls = std::make_shared<ClassEmbeddings<T>>(init_class_embeddings<T>(n, d, init_rng_));
  }
  std::vector<std::shared_ptr<DecoderBlock<T>>> shared_blocks;
  if (policy == SharingPolicy::kDecoderShared) {
    for (std::size_t l = 0; l < depth; ++l) {
      shared_blocks.push_back(std::make_shared<DecoderBlock<T>>(DecoderBlock<T>::make(dc, init_rng_)));
    }
  }

  for (std::size_t i = 0; i < m; ++i) {
    Learner<T> learner;
    learner.level = config_.head == HeadKind::kEnsemble ? 2 + i / config_.learners_per_scale : 2;
    learner.policy = policy;
    learner.num_layers = depth;
    learner.embeddings =
        shared_cls ? shared_cls : std::make_shared<ClassEmbeddings<T>>(init_class_embeddings<T>(n, d, init_rng_));
    if (policy == SharingPolicy::kDecoderShared) {
      learner.blocks = shared_blocks;
    } else {
      const std::size_t count = policy == SharingPolicy::kRepeated ? 1 : depth;
      for (std::size_t l = 0; l < count; ++l) {
        learner.blocks.push_back(std::make_shared<DecoderBlock<T>>(DecoderBlock<T>::make(dc, init_rng_)));
      }
    }
    learners.push_back(std::move(learner));
  }

  for (std::size_t i = 0; i < attention_module_count(config_.merge); ++i) {
    attention.push_back(AttentionModule<T>::make(n, config_.attention_hidden, init_rng_));
  }
}

template <typename T>
FeaturePyramid<T> EnsembleModel<T>::features(const Tensor<T>& images, bool training) {
  return pyramid.forward(backbone.forward(images, training));
}

template <typename T>
std::vector<Tensor<T>> EnsembleModel<T>::learner_logits(const Tensor<T>& images, bool training) {
  const FeaturePyramid<T> pyr = features(images, training);
  std::vector<Tensor<T>> out;
  if (fusion) {
    out.push_back(learners[0].forward(fusion->forward(pyr, training)));
    return out;
  }
  for (const auto& learner : learners) out.push_back(learner.forward(pyr.p[learner.level - 2]));
  return out;
}

template <typename T>
ModelOutput<T> EnsembleModel<T>::forward(const Tensor<T>& images, bool training) {
  ModelOutput<T> out;
  out.logits = learner_logits(images, training);
  const Tensor<T>& finest = out.logits.front();
  const std::size_t nd = finest.ndim();
  out.aligned = align_logits(out.logits, finest.dim(nd - 2), finest.dim(nd - 1));
  out.merged = merge_predictions(out.aligned, full_mask(), config_.merge, training);
  return out;
}

template <typename T>
Tensor<T> EnsembleModel<T>::merge_predictions(const std::vector<Tensor<T>>& aligned, const LearnerMask& mask,
                                              MergeStrategy strategy, bool training) {
  if (mask.size() != learners.size() || aligned.size() != learners.size()) {
    throw std::invalid_argument("merge: expected " + std::to_string(learners.size()) + " learners");
  }
  std::vector<Tensor<T>> selected;
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    if (mask[i]) selected.push_back(aligned[i]);
  }
  if (selected.empty()) throw std::invalid_argument("merge: empty learner subset");
  const std::size_t axis = class_axis(selected[0]);

  if (uses_attention(strategy)) {
    if (selected.size() != 4 || learners.size() != 4) {
      throw std::invalid_argument(std::string(to_string(strategy)) + " merge requires the full set of 4 learners");
    }
    if (attention.size() != attention_module_count(strategy)) {
      throw std::invalid_argument("model was built without " + std::string(to_string(strategy)) +
                                  " attention modules");
    }
    const Tensor<T> merged = strategy == MergeStrategy::kHierarchical
                                 ? merge_hierarchical(selected, attention, training)
                                 : merge_explicit(selected, attention, training);
    return softmax(merged, axis);
  }
  if (strategy == MergeStrategy::kAverage && config_.merge_space == MergeSpace::kLogit) {
    return softmax(merge_average(selected), axis);
  }
  std::vector<Tensor<T>> probs;
  for (const auto& x : selected) probs.push_back(softmax(x, axis));
  switch (strategy) {
    case MergeStrategy::kProduct: return merge_product(probs);
    case MergeStrategy::kMajority: return merge_majority(probs);
    default: return merge_average(probs);
  }
}

template <typename T>
LearnerMask EnsembleModel<T>::mask_for_levels(const std::vector<std::size_t>& levels) const {
  LearnerMask mask(learners.size(), false);
  for (std::size_t level : levels) {
    if (level < 2 || level > 5) throw std::invalid_argument("learner level " + std::to_string(level) + " not in 2..5");
    bool found = false;
    for (std::size_t i = 0; i < learners.size(); ++i) {
      if (learners[i].level == level) mask[i] = found = true;
    }
    if (!found) throw std::invalid_argument("no learner at level " + std::to_string(level));
  }
  return mask;
}

template <typename T>
ParameterList<T> EnsembleModel<T>::parameters(double backbone_lr_scale) const {
  ParameterList<T> out;
  backbone.collect("backbone", out, backbone_lr_scale);
  pyramid.collect("pyramid", out);
  if (fusion) fusion->collect("fusion", out);
  for (std::size_t i = 0; i < learners.size(); ++i) {
    const std::string prefix = "learner" + std::to_string(i);
    out.add(prefix + ".cls", learners[i].embeddings->cls);
    for (std::size_t l = 0; l < learners[i].blocks.size(); ++l) {
      learners[i].blocks[l]->collect(prefix + ".block" + std::to_string(l), out);
    }
  }
  for (std::size_t i = 0; i < attention.size(); ++i) attention[i].collect("attention" + std::to_string(i), out);
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> EnsembleModel<T>::buffers() {
  std::vector<NamedBuffer<T>> out;
  backbone.buffers("backbone", out);
  if (fusion) fusion->buffers("fusion", out);
  for (std::size_t i = 0; i < attention.size(); ++i) attention[i].buffers("attention" + std::to_string(i), out);
  return out;
}

template <typename T>
ParamCounts EnsembleModel<T>::param_count() const {
  ParamCounts c;
  {
    ParameterList<T> p;
    backbone.collect("", p, 1.0);
    c.backbone = p.scalar_count();
  }
  {
    ParameterList<T> p;
    pyramid.collect("", p);
    c.pyramid = p.scalar_count();
  }
  if (fusion) {
    ParameterList<T> p;
    fusion->collect("", p);
    c.fusion = p.scalar_count();
  }
  ParameterList<T> blocks, embeddings;
  for (const auto& learner : learners) {
    embeddings.add("cls", learner.embeddings->cls);
    for (const auto& b : learner.blocks) b->collect("block", blocks);
  }
  c.decoders = blocks.scalar_count();
  c.embeddings = embeddings.scalar_count();
  ParameterList<T> att;
  for (const auto& a : attention) a.collect("attention", att);
  c.merge = att.scalar_count();
  return c;
}

template <typename T>
std::size_t EnsembleModel<T>::distinct_block_count() const {
  std::set<const DecoderBlock<T>*> seen;
  for (const auto& learner : learners) {
    for (const auto& b : learner.blocks) seen.insert(b.get());
  }
  return seen.size();
}

template <typename T>
std::size_t EnsembleModel<T>::distinct_embedding_count() const {
  std::set<const ClassEmbeddings<T>*> seen;
  for (const auto& learner : learners) seen.insert(learner.embeddings.get());
  return seen.size();
}

template <typename T>
EnsemblePrediction<T> ensemble_predict(EnsembleModel<T>& model, const Tensor<T>& images, const LearnerMask& mask,
                                       MergeStrategy strategy) {
  NoGradGuard no_grad;
  if (mask.size() != model.learners.size()) {
    throw std::invalid_argument("learner mask has " + std::to_string(mask.size()) + " entries for " +
                                std::to_string(model.learners.size()) + " learners");
  }
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
    throw std::invalid_argument("empty learner subset");
  }
  const auto logits = model.learner_logits(images, false);
  const std::size_t nd = logits[0].ndim();
  const auto aligned = align_logits(logits, logits[0].dim(nd - 2), logits[0].dim(nd - 1));
  const std::size_t h = images.dim(images.ndim() - 2), w = images.dim(images.ndim() - 1);

  EnsemblePrediction<T> out;
  out.merged = upsample_bilinear(model.merge_predictions(aligned, mask, strategy, false), h, w);
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    if (!mask[i]) continue;
    out.per_learner.push_back(upsample_bilinear(softmax(aligned[i], class_axis(aligned[i])), h, w));
    out.learner_indices.push_back(i);
  }
  return out;
}

template class EnsembleModel<float>;
template class EnsembleModel<double>;
template EnsemblePrediction<float> ensemble_predict(EnsembleModel<float>&, const Tensor<float>&, const LearnerMask&,
                                                    MergeStrategy);
template EnsemblePrediction<double> ensemble_predict(EnsembleModel<double>&, const Tensor<double>&,
                                                     const LearnerMask&, MergeStrategy);

}  // namespace senf
