#pragma once

// Transformer learners: N class embeddings refined by L decoder blocks that
// cross-attend to the tokens of one pyramid level, then scored against every
// pixel feature by dot product.
//
// Embeddings are [N,d] or batched [B,N,d]; maps [d,h,w] or [B,d,h,w].

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "senformer/nn.hpp"

namespace senf {

enum class SharingPolicy { kNone, kRepeated, kDecoderShared, kClsShared };
SharingPolicy parse_sharing_policy(std::string_view name);
std::string_view to_string(SharingPolicy p);

enum class NormPlacement { kPre, kPost };
NormPlacement parse_norm_placement(std::string_view name);
std::string_view to_string(NormPlacement p);

inline constexpr double kEmbeddingInitStd = 0.02;

template <typename T>
struct ClassEmbeddings {
  Tensor<T> cls;  // [N, d]

  std::size_t classes() const { return cls.dim(0); }
  std::size_t dim() const { return cls.dim(1); }
};

// Rows i.i.d. N(0, 0.02^2). Requires N >= 2 and d >= 4.
template <typename T>
ClassEmbeddings<T> init_class_embeddings(std::size_t n_classes, std::size_t d, Rng& rng);
template <typename T>
ClassEmbeddings<T> init_class_embeddings(std::size_t n_classes, std::size_t d, std::uint64_t seed);

// [d,h,w] -> [h*w, d] and [B,d,h,w] -> [B,h*w,d], raster order.
template <typename T> Tensor<T> tokenize(const Tensor<T>& map);
template <typename T> Tensor<T> detokenize(const Tensor<T>& tokens, std::size_t h, std::size_t w);

struct DecoderConfig {
  std::size_t d = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  NormPlacement norm = NormPlacement::kPre;
};

template <typename T>
struct DecoderBlock {
  // cross-attention: Q = LN(cls) W_q, K = z W_k, V = z W_v
  LayerNorm<T> ca_norm;
  Linear<T> w_q, w_k, w_v;
  Linear<T> ca_out;
  // self-attention among the class embeddings
  LayerNorm<T> sa_norm;
  Linear<T> sa_qkv;
  Linear<T> sa_out;
  LayerNorm<T> mlp_norm;
  Linear<T> fc1, fc2;
  std::size_t heads = 4;
  NormPlacement norm = NormPlacement::kPre;

  struct KeyValue {
    Tensor<T> k, v;
  };

  static DecoderBlock make(const DecoderConfig& config, Rng& rng);

  KeyValue key_value(const Tensor<T>& z) const;
  Tensor<T> cross_attention(const Tensor<T>& cls, const KeyValue& kv) const;
  Tensor<T> forward(const Tensor<T>& cls, const KeyValue& kv) const;
  Tensor<T> forward(const Tensor<T>& cls, const Tensor<T>& z) const { return forward(cls, key_value(z)); }

  // Zeroes ca_out, sa_out and fc2 (weights and biases).
  void zero_output_projections();
  std::size_t scalar_count() const;
  void collect(const std::string& prefix, ParameterList<T>& out, double lr_scale = 1.0) const;
};

// cls + CA(LN(cls), z) for a single block.
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& cls, const Tensor<T>& z, const DecoderBlock<T>& block);

// logits[.., k, y, x] = <cls_k, P[.., :, y, x]>
template <typename T>
Tensor<T> predict_logits(const Tensor<T>& cls, const Tensor<T>& map);

// Final embeddings after L blocks. `repeated` expects one block applied L
// times, every other policy L distinct blocks.
template <typename T>
Tensor<T> decode_embeddings(const Tensor<T>& map, const Tensor<T>& cls,
                            const std::vector<std::shared_ptr<DecoderBlock<T>>>& blocks,
                            SharingPolicy policy, std::size_t num_layers);

template <typename T>
Tensor<T> learner_forward(const Tensor<T>& map, const Tensor<T>& cls,
                          const std::vector<std::shared_ptr<DecoderBlock<T>>>& blocks,
                          SharingPolicy policy, std::size_t num_layers);

template <typename T>
struct Learner {
  std::shared_ptr<ClassEmbeddings<T>> embeddings;
  std::vector<std::shared_ptr<DecoderBlock<T>>> blocks;
  std::size_t level = 2;  // pyramid level 2..5
  SharingPolicy policy = SharingPolicy::kRepeated;
  std::size_t num_layers = 1;

  Tensor<T> decode(const Tensor<T>& map) const;
  Tensor<T> forward(const Tensor<T>& map) const;
};

}  // namespace senf
