#include "senformer/gradcheck_suite.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "senformer/ops.hpp"
#include "senformer/rng.hpp"
#include "senformer/training.hpp"

namespace senf {

namespace {

using T = double;
using Fn = std::function<Tensor<T>()>;

Tensor<T> uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

// Values bounded away from the kinks in `kinks` by at least `margin`.
Tensor<T> away_from(Shape shape, Rng& rng, const std::vector<double>& kinks, double margin) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) {
    for (;;) {
      x = rng.uniform(-1.0, 1.0);
      bool ok = true;
      for (double k : kinks) ok = ok && std::abs(x - k) > margin;
      if (ok) break;
    }
  }
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

// Scalar <W, y> with a fixed random W, so every output entry is exercised.
Tensor<T> project(const Tensor<T>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, uniform(y.shape(), rng)));
}

std::vector<std::int32_t> labels(std::size_t n, std::size_t classes, Rng& rng, bool with_ignore) {
  std::vector<std::int32_t> out(n);
  for (auto& l : out) l = static_cast<std::int32_t>(rng.index(classes));
  if (with_ignore && n > 2) out[1] = kIgnoreIndex;
  return out;
}

struct Case {
  std::string name;
  std::function<std::pair<Fn, std::vector<Tensor<T>>>(Rng&)> build;
};

template <typename Params>
std::vector<Tensor<T>> tensors_of(const Params& params) {
  std::vector<Tensor<T>> out;
  for (const auto& p : params.items()) out.push_back(p.tensor);
  return out;
}

// Redraws module parameters at unit scale. With the small training init the
// attention logits are nearly flat and many gradients sit at roundoff level.
std::vector<Tensor<T>> unit_scale(const ParameterList<T>& params, Rng& rng) {
  auto tensors = tensors_of(params);
  for (auto& t : tensors) {
    for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  }
  return tensors;
}

std::vector<Case> operator_cases() {
  std::vector<Case> cases;
  auto binary = [&](std::string name, Shape sa, Shape sb, auto op, bool positive_b) {
    cases.push_back({std::move(name), [=](Rng& rng) {
                       auto a = uniform(sa, rng);
                       auto b = positive_b ? uniform(sb, rng, 0.5, 2.0) : uniform(sb, rng);
                       return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return project(op(a, b), 1); }, {a, b}};
                     }});
  };
  binary("add", {2, 3, 4}, {4}, [](auto a, auto b) { return add(a, b); }, false);
  binary("sub", {2, 3, 4}, {3, 1}, [](auto a, auto b) { return sub(a, b); }, false);
  binary("mul", {2, 3, 4}, {1, 3, 4}, [](auto a, auto b) { return mul(a, b); }, false);
  binary("div", {2, 3, 4}, {2, 1, 4}, [](auto a, auto b) { return div(a, b); }, true);
  binary("matmul_2d", {3, 4}, {4, 2}, [](auto a, auto b) { return matmul(a, b); }, false);
  binary("matmul_batched", {2, 3, 4}, {2, 4, 5}, [](auto a, auto b) { return matmul(a, b); }, false);
  binary("matmul_batched_shared", {2, 3, 4}, {4, 5}, [](auto a, auto b) { return matmul(a, b); }, false);
  binary("linear_nobias", {2, 3, 4}, {4, 5}, [](auto a, auto b) { return linear(a, b); }, false);

  auto unary = [&](std::string name, Shape s, auto op, std::function<Tensor<T>(Rng&)> make_input) {
    cases.push_back({std::move(name), [=](Rng& rng) {
                       auto x = make_input ? make_input(rng) : uniform(s, rng);
                       return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return project(op(x), 2); }, {x}};
                     }});
  };
  const Shape s234{2, 3, 4};
  unary("add_scalar", s234, [](auto x) { return add_scalar(x, 0.7); }, nullptr);
  unary("scale", s234, [](auto x) { return scale(x, -1.3); }, nullptr);
  unary("exp", s234, [](auto x) { return exp(x); }, nullptr);
  unary("log", s234, [](auto x) { return log(x); }, [=](Rng& r) { return uniform(s234, r, 0.5, 2.0); });
  unary("clamp", s234, [](auto x) { return clamp(x, -0.5, 0.5); },
        [=](Rng& r) { return away_from(s234, r, {-0.5, 0.5}, 0.01); });
  unary("relu", s234, [](auto x) { return relu(x); }, [=](Rng& r) { return away_from(s234, r, {0.0}, 0.01); });
  unary("gelu", s234, [](auto x) { return gelu(x); }, [=](Rng& r) { return uniform(s234, r, -3.0, 3.0); });
  unary("sigmoid", s234, [](auto x) { return sigmoid(x); }, [=](Rng& r) { return uniform(s234, r, -3.0, 3.0); });
  unary("reshape", s234, [](auto x) { return reshape(x, {4, 6}); }, nullptr);
  unary("flatten", s234, [](auto x) { return flatten(x); }, nullptr);
  unary("transpose", s234, [](auto x) { return transpose(x); }, nullptr);
  unary("slice", s234, [](auto x) { return slice(x, 2, 1, 2); }, nullptr);
  unary("gather", s234,
        [](auto x) { return gather(x, {2, 5}, {0, 5, -1, 5, 23, 7, -1, 0, 11, 12}); }, nullptr);
  unary("repeat_leading", s234, [](auto x) { return repeat_leading(x, 3); }, nullptr);
  unary("sum", s234, [](auto x) { return scale(sum(x), 1.1); }, nullptr);
  unary("mean", s234, [](auto x) { return scale(mean(x), 1.1); }, nullptr);
  unary("softmax", s234, [](auto x) { return softmax(x, 1); }, nullptr);
  unary("log_softmax", s234, [](auto x) { return log_softmax(x, 2); }, nullptr);
  unary("upsample_nearest", {1, 2, 3, 3}, [](auto x) { return upsample_nearest(x, 2); }, nullptr);
  unary("upsample_bilinear_up", {1, 2, 3, 3}, [](auto x) { return upsample_bilinear(x, 7, 5); }, nullptr);
  unary("upsample_bilinear_down", {2, 1, 8, 8}, [](auto x) { return upsample_bilinear(x, 3, 4); }, nullptr);

  cases.push_back({"concat", [](Rng& rng) {
                     auto a = uniform({2, 3}, rng), b = uniform({2, 2}, rng);
                     return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return project(concat<T>({a, b, a}, 1), 3); },
                                                                  {a, b}};
                   }});
  cases.push_back({"linear", [](Rng& rng) {
                     auto x = uniform({2, 3, 4}, rng), w = uniform({4, 5}, rng), b = uniform({5}, rng);
                     return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return project(linear(x, w, b), 4); },
                                                                  {x, w, b}};
                   }});
  cases.push_back({"layer_norm", [](Rng& rng) {
                     auto x = uniform({3, 6}, rng), g = uniform({6}, rng, 0.5, 1.5), b = uniform({6}, rng);
                     return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return project(layer_norm(x, g, b, 1), 5); },
                                                                  {x, g, b}};
                   }});
  auto conv_case = [&](std::string name, std::size_t stride, std::size_t k) {
    cases.push_back({std::move(name), [=](Rng& rng) {
                       auto x = uniform({2, 3, 5, 5}, rng), w = uniform({2, 3, k, k}, rng), b = uniform({2}, rng);
                       const std::size_t pad = (k - 1) / 2;
                       return std::pair<Fn, std::vector<Tensor<T>>>{
                           [=] { return project(conv2d(x, w, b, stride, pad), 6); }, {x, w, b}};
                     }});
  };
  conv_case("conv2d_3x3", 1, 3);
  conv_case("conv2d_3x3_stride2", 2, 3);
  conv_case("conv2d_1x1", 1, 1);
  for (bool training : {true, false}) {
    cases.push_back({training ? "batch_norm2d_train" : "batch_norm2d_eval", [training](Rng& rng) {
                       auto x = uniform({3, 2, 3, 3}, rng), g = uniform({2}, rng, 0.5, 1.5), b = uniform({2}, rng);
                       auto state = std::make_shared<BatchNormState<T>>(2);
                       state->running_mean = {0.1, -0.2};
                       state->running_var = {0.9, 1.3};
                       return std::pair<Fn, std::vector<Tensor<T>>>{
                           [=] { return project(batch_norm2d(x, g, b, *state, training), 7); }, {x, g, b}};
                     }});
  }
  cases.push_back({"nll_loss", [](Rng& rng) {
                     auto x = uniform({3, 4}, rng, -2.0, -0.1);
                     auto t = labels(4, 3, rng, true);
                     return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return nll_loss<T>(x, t, 0); }, {x}};
                   }});
  cases.push_back({"cross_entropy", [](Rng& rng) {
                     auto x = uniform({3, 4}, rng, -2.0, 2.0);
                     auto t = labels(4, 3, rng, false);
                     return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return cross_entropy<T>(x, t, 0); }, {x}};
                   }});
  cases.push_back({"cross_entropy_batched_ignore", [](Rng& rng) {
                     auto x = uniform({2, 3, 2, 2}, rng, -2.0, 2.0);
                     auto t = labels(8, 3, rng, true);
                     return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return cross_entropy<T>(x, t, 1); }, {x}};
                   }});
  cases.push_back({"multi_head_attention", [](Rng& rng) {
                     auto q = uniform({2, 3, 8}, rng), k = uniform({2, 5, 8}, rng), v = uniform({2, 5, 8}, rng);
                     return std::pair<Fn, std::vector<Tensor<T>>>{
                         [=] { return project(multi_head_attention(q, k, v, 2), 8); }, {q, k, v}};
                   }});

  // module-level compositions
  cases.push_back({"cross_attention", [](Rng& rng) {
                     auto block = std::make_shared<DecoderBlock<T>>(DecoderBlock<T>::make({8, 2, 4, NormPlacement::kPre}, rng));
                     auto cls = uniform({3, 8}, rng), z = uniform({4, 8}, rng);
                     ParameterList<T> params;
                     block->collect("b", params);
                     auto inputs = unit_scale(params, rng);
                     inputs.push_back(cls);
                     inputs.push_back(z);
                     return std::pair<Fn, std::vector<Tensor<T>>>{
                         [=] { return project(cross_attention(cls, z, *block), 9); }, inputs};
                   }});
  for (auto norm : {NormPlacement::kPre, NormPlacement::kPost}) {
    cases.push_back({norm == NormPlacement::kPre ? "decoder_block_pre" : "decoder_block_post", [norm](Rng& rng) {
                       auto block = std::make_shared<DecoderBlock<T>>(DecoderBlock<T>::make({8, 2, 4, norm}, rng));
                       auto cls = uniform({2, 3, 8}, rng), z = uniform({2, 6, 8}, rng);
                       ParameterList<T> params;
                       block->collect("b", params);
                       auto inputs = unit_scale(params, rng);
                       inputs.push_back(cls);
                       inputs.push_back(z);
                       return std::pair<Fn, std::vector<Tensor<T>>>{
                           [=] { return project(block->forward(cls, z), 10); }, inputs};
                     }});
  }
  cases.push_back({"predict_logits", [](Rng& rng) {
                     auto cls = uniform({3, 4}, rng), map = uniform({4, 2, 3}, rng);
                     return std::pair<Fn, std::vector<Tensor<T>>>{
                         [=] { return project(predict_logits(cls, map), 11); }, {cls, map}};
                   }});
  cases.push_back({"window_block", [](Rng& rng) {
                     auto block = std::make_shared<WindowTransformerBlock<T>>(
                         WindowTransformerBlock<T>::make(8, {4, 2, 2}, rng));
                     auto x = uniform({1, 8, 6, 5}, rng);
                     ParameterList<T> params;
                     block->collect("w", params);
                     auto inputs = unit_scale(params, rng);
                     inputs.push_back(x);
                     return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return project(block->forward(x), 12); },
                                                                  inputs};
                   }});
  for (auto variant : {PyramidVariant::kFpn, PyramidVariant::kFpnt}) {
    cases.push_back({"pyramid_" + std::string(to_string(variant)), [variant](Rng& rng) {
                       const std::array<std::size_t, 4> in{4, 6, 8, 10};
                       auto pyr = std::make_shared<Pyramid<T>>(variant, 8, in, WindowBlockConfig{4, 2, 2}, rng);
                       BackboneFeatures<T> feats;
                       for (std::size_t i = 0; i < 4; ++i) {
                         const std::size_t side = 8 >> i;
                         feats.c[i] = uniform({1, in[i], side, side}, rng);
                       }
                       ParameterList<T> params;
                       pyr->collect("p", params);
                       auto inputs = unit_scale(params, rng);
                       for (const auto& c : feats.c) inputs.push_back(c);
                       return std::pair<Fn, std::vector<Tensor<T>>>{
                           [=] {
                             auto out = pyr->forward(feats);
                             Tensor<T> acc = project(out.p[0], 13);
                             for (std::size_t i = 1; i < 4; ++i) acc = add(acc, project(out.p[i], 13 + i));
                             return acc;
                           },
                           inputs};
                     }});
  }

  // merges over probabilities / logits of M = 4 learners, 3 classes
  auto merge_case = [&](std::string name, auto op) {
    cases.push_back({std::move(name), [=](Rng& rng) {
                       std::vector<Tensor<T>> xs;
                       for (int i = 0; i < 4; ++i) xs.push_back(uniform({3, 2, 2}, rng, -2.0, 2.0));
                       return std::pair<Fn, std::vector<Tensor<T>>>{[=] { return project(op(xs), 20); },
                                                                    xs};
                     }});
  };
  merge_case("merge_average", [](const std::vector<Tensor<T>>& xs) {
    std::vector<Tensor<T>> p;
    for (const auto& x : xs) p.push_back(softmax(x, 0));
    return merge_average(p);
  });
  merge_case("merge_product", [](const std::vector<Tensor<T>>& xs) {
    std::vector<Tensor<T>> p;
    for (const auto& x : xs) p.push_back(softmax(x, 0));
    return merge_product(p);
  });
  merge_case("merge_majority", [](const std::vector<Tensor<T>>& xs) {
    std::vector<Tensor<T>> p;
    for (const auto& x : xs) p.push_back(softmax(x, 0));
    return merge_majority(p);
  });
  cases.push_back({"merge_hierarchical", [](Rng& rng) {
                     std::vector<Tensor<T>> xs, alphas;
                     for (int i = 0; i < 4; ++i) xs.push_back(uniform({3, 2, 2}, rng, -2.0, 2.0));
                     for (int i = 0; i < 3; ++i) alphas.push_back(uniform({1, 2, 2}, rng, 0.1, 0.9));
                     auto inputs = xs;
                     inputs.insert(inputs.end(), alphas.begin(), alphas.end());
                     return std::pair<Fn, std::vector<Tensor<T>>>{
                         [=] { return project(merge_hierarchical(xs, alphas), 21); }, inputs};
                   }});
  cases.push_back({"merge_explicit", [](Rng& rng) {
                     std::vector<Tensor<T>> xs, ws;
                     for (int i = 0; i < 4; ++i) xs.push_back(uniform({3, 2, 2}, rng, -2.0, 2.0));
                     for (int i = 0; i < 4; ++i) ws.push_back(uniform({1, 2, 2}, rng, 0.1, 0.9));
                     auto inputs = xs;
                     inputs.insert(inputs.end(), ws.begin(), ws.end());
                     return std::pair<Fn, std::vector<Tensor<T>>>{
                         [=] { return project(merge_explicit(xs, ws), 22); }, inputs};
                   }});
  cases.push_back({"attention_module", [](Rng& rng) {
                     auto module = std::make_shared<AttentionModule<T>>(AttentionModule<T>::make(3, 4, rng));
                     auto x = uniform({2, 3, 4, 4}, rng, -2.0, 2.0);
                     ParameterList<T> params;
                     module->collect("a", params);
                     auto inputs = unit_scale(params, rng);
                     inputs.push_back(x);
                     return std::pair<Fn, std::vector<Tensor<T>>>{
                         [=] { return project(module->forward(x, true), 23); }, inputs};
                   }});
  return cases;
}

GradcheckRow to_row(std::string name, const GradcheckReport& r, double tol) {
  return {std::move(name), r.checked, r.refined, r.max_rel_error, tol, r.passed, r.worst};
}

}  // namespace

std::vector<GradcheckRow> operator_gradchecks(const GradcheckOptions& options) {
  std::vector<GradcheckRow> rows;
  std::uint64_t index = 0;
  for (const auto& c : operator_cases()) {
    Rng rng(Rng::derive(options.seed, index++));
    auto [f, inputs] = c.build(rng);
    rows.push_back(to_row(c.name, finite_diff_check(f, inputs, options), options.tol));
  }
  return rows;
}

ModelGradcheckSetup toy_model_setup() {
  ModelGradcheckSetup s;
  s.model.d = 16;
  s.model.num_blocks = 2;
  s.model.n_classes = 2;
  return s;
}

GradcheckRow model_gradcheck(const ModelGradcheckSetup& setup, const GradcheckOptions& options) {
  EnsembleModel<T> model(setup.model);
  Rng rng(Rng::derive(setup.model.seed, 0x6763));
  auto images = uniform({setup.batch, 3, setup.size, setup.size}, rng);
  const auto target = labels(setup.batch * setup.size * setup.size, setup.model.n_classes, rng, true);
  const std::size_t side = setup.size;
  auto f = [&] {
    auto out = model.forward(images, true);
    return total_loss<T>(out.logits, out.merged, target, side, side, 1.0).total;
  };
  GradcheckOptions opts = options;
  opts.per_input_entries = setup.entries_per_tensor;
  opts.fallback_scales = setup.fallback_scales;
  const auto params = model.parameters();
  const auto report = finite_diff_check(f, tensors_of(params), opts);
  std::ostringstream name;
  name << "model[" << to_string(setup.model.sharing) << "," << to_string(setup.model.merge) << ","
       << to_string(setup.model.pyramid) << "," << to_string(setup.model.norm) << "]";
  auto row = to_row(name.str(), report, options.tol);
  // "inputK[i]" -> parameter name
  const auto open = row.worst.find('[');
  if (row.worst.rfind("input", 0) == 0 && open != std::string::npos) {
    const auto k = std::stoul(row.worst.substr(5, open - 5));
    if (k < params.size()) row.worst = params.items()[k].name + row.worst.substr(open);
  }
  return row;
}

std::vector<GradcheckRow> model_gradchecks(const GradcheckOptions& options) {
  std::vector<GradcheckRow> rows;
  auto base = toy_model_setup();
  rows.push_back(model_gradcheck(base, options));
  auto alt = base;
  alt.model.sharing = SharingPolicy::kNone;
  alt.model.merge = MergeStrategy::kHierarchical;
  alt.model.pyramid = PyramidVariant::kFpn;
  rows.push_back(model_gradcheck(alt, options));
  alt = base;
  alt.model.sharing = SharingPolicy::kClsShared;
  alt.model.merge = MergeStrategy::kExplicit;
  alt.model.norm = NormPlacement::kPost;
  rows.push_back(model_gradcheck(alt, options));
  return rows;
}

std::string format_gradcheck_table(const std::vector<GradcheckRow>& rows) {
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %7s  %7s  %12s  %9s  %s\n", static_cast<int>(width), "name", "checked",
                "refined", "max_rel_err", "tol", "result");
  os << buf;
  std::size_t failed = 0;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s  %7zu  %7zu  %12.3e  %9.1e  %s", static_cast<int>(width), r.name.c_str(),
                  r.checked, r.refined, r.max_rel_error, r.tol, r.passed ? "PASS" : "FAIL");
    os << buf;
    if (!r.passed) os << "  worst=" << r.worst;
    os << '\n';
    failed += r.passed ? 0 : 1;
  }
  os << (failed == 0 ? "all " + std::to_string(rows.size()) + " checks passed\n"
                     : std::to_string(failed) + " of " + std::to_string(rows.size()) + " checks failed\n");
  return os.str();
}

}  // namespace senf
