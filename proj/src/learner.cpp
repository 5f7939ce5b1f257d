#include "senformer/learner.hpp"

#include <stdexcept>

namespace senf {

SharingPolicy parse_sharing_policy(std::string_view name) {
  if (name == "none") return SharingPolicy::kNone;
  if (name == "repeated") return SharingPolicy::kRepeated;
  if (name == "decoder_shared") return SharingPolicy::kDecoderShared;
  if (name == "cls_shared") return SharingPolicy::kClsShared;
  throw std::invalid_argument("unknown sharing policy '" + std::string(name) +
                              "' (none|repeated|decoder_shared|cls_shared)");
}

std::string_view to_string(SharingPolicy p) {
  switch (p) {
    case SharingPolicy::kNone: return "none";
    case SharingPolicy::kRepeated: return "repeated";
    case SharingPolicy::kDecoderShared: return "decoder_shared";
    case SharingPolicy::kClsShared: return "cls_shared";
  }
  return "?";
}

NormPlacement parse_norm_placement(std::string_view name) {
  if (name == "pre") return NormPlacement::kPre;
  if (name == "post") return NormPlacement::kPost;
  throw std::invalid_argument("unknown norm placement '" + std::string(name) + "' (pre|post)");
}

std::string_view to_string(NormPlacement p) { return p == NormPlacement::kPre ? "pre" : "post"; }

template <typename T>
ClassEmbeddings<T> init_class_embeddings(std::size_t n_classes, std::size_t d, Rng& rng) {
  if (n_classes < 2) throw std::invalid_argument("class embeddings need N >= 2, got " + std::to_string(n_classes));
  if (d < 4) throw std::invalid_argument("class embeddings need d >= 4, got " + std::to_string(d));
  std::vector<T> values(n_classes * d);
  for (T& v : values) v = static_cast<T>(rng.normal(0.0, kEmbeddingInitStd));
  ClassEmbeddings<T> e{Tensor<T>::from_data({n_classes, d}, std::move(values))};
  e.cls.set_requires_grad(true);
  return e;
}

template <typename T>
ClassEmbeddings<T> init_class_embeddings(std::size_t n_classes, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return init_class_embeddings<T>(n_classes, d, rng);
}

template <typename T>
Tensor<T> tokenize(const Tensor<T>& map) {
  if (map.ndim() == 3) return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
  if (map.ndim() == 4) {
    return transpose(reshape(map, {map.dim(0), map.dim(1), map.dim(2) * map.dim(3)}));
  }
  throw ShapeError("tokenize expects [d,h,w] or [B,d,h,w], got " + shape_str(map.shape()));
}

template <typename T>
Tensor<T> detokenize(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  const std::size_t nd = tokens.ndim();
  if ((nd != 2 && nd != 3) || tokens.dim(nd - 2) != h * w) {
    throw ShapeError("detokenize: " + shape_str(tokens.shape()) + " is not " + std::to_string(h * w) + " tokens");
  }
  const Tensor<T> t = transpose(tokens);
  if (nd == 2) return reshape(t, {t.dim(0), h, w});
  return reshape(t, {t.dim(0), t.dim(1), h, w});
}

template <typename T>
DecoderBlock<T> DecoderBlock<T>::make(const DecoderConfig& config, Rng& rng) {
  const std::size_t d = config.d;
  if (config.heads == 0 || d % config.heads) {
    throw std::invalid_argument("decoder: heads (" + std::to_string(config.heads) + ") must divide d (" +
                                std::to_string(d) + ")");
  }
  DecoderBlock b;
  b.ca_norm = LayerNorm<T>::make(d);
  b.w_q = Linear<T>::make(d, d, false, rng);
  b.w_k = Linear<T>::make(d, d, false, rng);
  b.w_v = Linear<T>::make(d, d, false, rng);
  b.ca_out = Linear<T>::make(d, d, true, rng);
  b.sa_norm = LayerNorm<T>::make(d);
  b.sa_qkv = Linear<T>::make(d, 3 * d, false, rng);
  b.sa_out = Linear<T>::make(d, d, true, rng);
  b.mlp_norm = LayerNorm<T>::make(d);
  b.fc1 = Linear<T>::make(d, config.mlp_ratio * d, true, rng);
  b.fc2 = Linear<T>::make(config.mlp_ratio * d, d, true, rng);
  b.heads = config.heads;
  b.norm = config.norm;
  return b;
}

template <typename T>
typename DecoderBlock<T>::KeyValue DecoderBlock<T>::key_value(const Tensor<T>& z) const {
  if (z.ndim() < 2 || z.dim(z.ndim() - 2) == 0) throw ShapeError("cross-attention needs at least one token");
  return {w_k(z), w_v(z)};
}

template <typename T>
Tensor<T> DecoderBlock<T>::cross_attention(const Tensor<T>& cls, const KeyValue& kv) const {
  if (norm == NormPlacement::kPre) {
    return add(cls, ca_out(multi_head_attention(w_q(ca_norm(cls)), kv.k, kv.v, heads)));
  }
  return ca_norm(add(cls, ca_out(multi_head_attention(w_q(cls), kv.k, kv.v, heads))));
}

template <typename T>
Tensor<T> DecoderBlock<T>::forward(const Tensor<T>& cls_in, const KeyValue& kv) const {
  const std::size_t d = cls_in.dim(cls_in.ndim() - 1);
  const std::size_t axis = cls_in.ndim() - 1;
  auto self_attention = [&](const Tensor<T>& x) {
    const Tensor<T> qkv = sa_qkv(x);
    return sa_out(multi_head_attention(slice(qkv, axis, 0, d), slice(qkv, axis, d, d), slice(qkv, axis, 2 * d, d),
                                       heads));
  };
  auto mlp = [&](const Tensor<T>& x) { return fc2(gelu(fc1(x))); };

  Tensor<T> cls = cross_attention(cls_in, kv);
  if (norm == NormPlacement::kPre) {
    cls = add(cls, self_attention(sa_norm(cls)));
    cls = add(cls, mlp(mlp_norm(cls)));
  } else {
    cls = sa_norm(add(cls, self_attention(cls)));
    cls = mlp_norm(add(cls, mlp(cls)));
  }
  return cls;
}

template <typename T>
void DecoderBlock<T>::zero_output_projections() {
  ca_out.zero();
  sa_out.zero();
  fc2.zero();
}

template <typename T>
std::size_t DecoderBlock<T>::scalar_count() const {
  ParameterList<T> p;
  collect("", p);
  return p.scalar_count();
}

template <typename T>
void DecoderBlock<T>::collect(const std::string& prefix, ParameterList<T>& out, double lr_scale) const {
  ca_norm.collect(prefix + ".ca_norm", out, lr_scale);
  w_q.collect(prefix + ".w_q", out, lr_scale);
  w_k.collect(prefix + ".w_k", out, lr_scale);
  w_v.collect(prefix + ".w_v", out, lr_scale);
  ca_out.collect(prefix + ".ca_out", out, lr_scale);
  sa_norm.collect(prefix + ".sa_norm", out, lr_scale);
  sa_qkv.collect(prefix + ".sa_qkv", out, lr_scale);
  sa_out.collect(prefix + ".sa_out", out, lr_scale);
  mlp_norm.collect(prefix + ".mlp_norm", out, lr_scale);
  fc1.collect(prefix + ".fc1", out, lr_scale);
  fc2.collect(prefix + ".fc2", out, lr_scale);
}

template <typename T>
Tensor<T> cross_attention(const Tensor<T>& cls, const Tensor<T>& z, const DecoderBlock<T>& block) {
  return block.cross_attention(cls, block.key_value(z));
}

template <typename T>
Tensor<T> predict_logits(const Tensor<T>& cls, const Tensor<T>& map) {
  const bool batched = map.ndim() == 4;
  if (!batched && map.ndim() != 3) throw ShapeError("predict_logits: map must be [d,h,w] or [B,d,h,w]");
  const std::size_t off = batched ? 1 : 0;
  const std::size_t d = map.dim(off), h = map.dim(off + 1), w = map.dim(off + 2);
  if (cls.ndim() < 2 || cls.dim(cls.ndim() - 1) != d) {
    throw ShapeError("predict_logits: embeddings " + shape_str(cls.shape()) + " do not match map " +
                     shape_str(map.shape()));
  }
  const std::size_t n = cls.dim(cls.ndim() - 2);
  if (!batched) {
    if (cls.ndim() != 2) throw ShapeError("predict_logits: batched embeddings with an unbatched map");
    return reshape(matmul(cls, reshape(map, {d, h * w})), {n, h, w});
  }
  const std::size_t b = map.dim(0);
  const Tensor<T> c = cls.ndim() == 2 ? repeat_leading(cls, b) : cls;
  if (c.dim(0) != b) throw ShapeError("predict_logits: batch mismatch " + shape_str(cls.shape()) + " vs " + shape_str(map.shape()));
  return reshape(matmul(c, reshape(map, {b, d, h * w})), {b, n, h, w});
}

template <typename T>
Tensor<T> decode_embeddings(const Tensor<T>& map, const Tensor<T>& cls,
                            const std::vector<std::shared_ptr<DecoderBlock<T>>>& blocks,
                            SharingPolicy policy, std::size_t num_layers) {
  if (num_layers < 1) throw std::invalid_argument("learner needs L >= 1");
  const std::size_t expected = policy == SharingPolicy::kRepeated ? 1 : num_layers;
  if (blocks.size() != expected) {
    throw std::invalid_argument("learner: policy " + std::string(to_string(policy)) + " with L=" +
                                std::to_string(num_layers) + " needs " + std::to_string(expected) +
                                " blocks, got " + std::to_string(blocks.size()));
  }
  const Tensor<T> z = tokenize(map);
  Tensor<T> x = (map.ndim() == 4 && cls.ndim() == 2) ? repeat_leading(cls, map.dim(0)) : cls;
  if (policy == SharingPolicy::kRepeated) {
    const auto kv = blocks[0]->key_value(z);
    for (std::size_t l = 0; l < num_layers; ++l) x = blocks[0]->forward(x, kv);
  } else {
    for (const auto& block : blocks) x = block->forward(x, z);
  }
  return x;
}

template <typename T>
Tensor<T> learner_forward(const Tensor<T>& map, const Tensor<T>& cls,
                          const std::vector<std::shared_ptr<DecoderBlock<T>>>& blocks,
                          SharingPolicy policy, std::size_t num_layers) {
  return predict_logits(decode_embeddings(map, cls, blocks, policy, num_layers), map);
}

template <typename T>
Tensor<T> Learner<T>::decode(const Tensor<T>& map) const {
  return decode_embeddings(map, embeddings->cls, blocks, policy, num_layers);
}

template <typename T>
Tensor<T> Learner<T>::forward(const Tensor<T>& map) const {
  return predict_logits(decode(map), map);
}

#define SENF_INSTANTIATE_LEARNER(T)                                                                          \
  template ClassEmbeddings<T> init_class_embeddings<T>(std::size_t, std::size_t, Rng&);                     \
  template ClassEmbeddings<T> init_class_embeddings<T>(std::size_t, std::size_t, std::uint64_t);            \
  template Tensor<T> tokenize(const Tensor<T>&);                                                            \
  template Tensor<T> detokenize(const Tensor<T>&, std::size_t, std::size_t);                                \
  template struct DecoderBlock<T>;                                                                          \
  template Tensor<T> cross_attention(const Tensor<T>&, const Tensor<T>&, const DecoderBlock<T>&);           \
  template Tensor<T> predict_logits(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> decode_embeddings(const Tensor<T>&, const Tensor<T>&,                                  \
                                       const std::vector<std::shared_ptr<DecoderBlock<T>>>&, SharingPolicy, \
                                       std::size_t);                                                        \
  template Tensor<T> learner_forward(const Tensor<T>&, const Tensor<T>&,                                    \
                                     const std::vector<std::shared_ptr<DecoderBlock<T>>>&, SharingPolicy,   \
                                     std::size_t);                                                          \
  template struct Learner<T>;

SENF_INSTANTIATE_LEARNER(float)
SENF_INSTANTIATE_LEARNER(double)

#undef SENF_INSTANTIATE_LEARNER

}  // namespace senf
