#pragma once

// Gradient checks over every primitive op and each full model at small random shapes.

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "r2i/codec.hpp"
#include "r2i/data.hpp"
#include "r2i/denoiser.hpp"
#include "r2i/eval.hpp"
#include "r2i/grad_check.hpp"
#include "r2i/layers.hpp"

namespace r2i {

namespace detail {

inline BasicTensor<double> uniform_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  BasicTensor<double> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Reduces an op output to a scalar with a fixed random projection.
inline Var<double> project(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.tape->constant(uniform_tensor(y.shape(), rng))));
}

}  // namespace detail

inline const std::vector<std::string>& primitive_ops() {
  static const std::vector<std::string> ops{"matmul",          "bmm_transpose", "conv2d",          "add_sub_mul",
                                            "silu",            "group_norm",    "softmax",         "resize_nearest",
                                            "concat",          "permute_reshape", "bias_channel_scale", "reductions",
                                            "gather_rows",     "softmax_cross_entropy"};
  return ops;
}

struct GradCase {
  ParamSet<double> params;
  GradFragment fragment;
  BasicTensor<double> input{Shape{1}};
};

/// One randomized instance of `op`; shapes vary with the trial index and rng.
inline GradCase primitive_case(const std::string& op, int trial, std::mt19937_64& rng) {
  using detail::project;
  using detail::uniform_tensor;
  std::uniform_int_distribution<int> d(1, 4);
  GradCase g;
  auto& p = g.params;
  const std::int64_t n = d(rng), h = d(rng) + 1, w = d(rng) + 1, c = d(rng);
  if (op == "matmul") {
    p.add("a", uniform_tensor({n, c}, rng));
    p.add("b", uniform_tensor({c, h}, rng));
    g.fragment = [](const Bound<double>& b, Var<double>) { return project(matmul(b("a"), b("b")), 1); };
  } else if (op == "bmm_transpose") {
    p.add("a", uniform_tensor({n, h, c}, rng));
    p.add("b", uniform_tensor({n, w, c}, rng));
    g.fragment = [](const Bound<double>& b, Var<double>) { return project(matmul(b("a"), transpose(b("b"))), 1); };
  } else if (op == "conv2d") {
    const std::int64_t k = 1 + 2 * (trial % 2), stride = 1 + trial % 3 / 2;
    p.add("x", uniform_tensor({n, h + 2, w + 2, c}, rng));
    p.add("k", uniform_tensor({k, k, c, d(rng)}, rng));
    g.fragment = [k, stride](const Bound<double>& b, Var<double>) {
      return project(conv2d(b("x"), b("k"), stride, k / 2), 2);
    };
  } else if (op == "add_sub_mul") {
    p.add("a", uniform_tensor({n, c}, rng));
    p.add("b", uniform_tensor({n, c}, rng));
    g.fragment = [](const Bound<double>& b, Var<double>) {
      return project(mul(add(b("a"), b("b")), sub(b("a"), b("b"))), 3);
    };
  } else if (op == "silu") {
    p.add("x", uniform_tensor({n, h, c}, rng, -3, 3));
    g.fragment = [](const Bound<double>& b, Var<double>) { return project(silu(b("x")), 4); };
  } else if (op == "group_norm") {
    const std::int64_t groups = trial % 2 ? 2 : 1;
    p.add("x", uniform_tensor({n, h, w, 2 * c}, rng));
    p.add("g", uniform_tensor({2 * c}, rng, 0.5, 1.5));
    p.add("b", uniform_tensor({2 * c}, rng));
    g.fragment = [groups](const Bound<double>& b, Var<double>) {
      return project(group_norm(b("x"), b("g"), b("b"), groups), 5);
    };
  } else if (op == "softmax") {
    p.add("x", uniform_tensor({n, h, w + 1}, rng, -2, 2));
    BasicTensor<double> mask({n, w + 1}, 1.0);
    for (std::int64_t i = 0; i < n; ++i) mask[i * (w + 1) + w] = trial % 2;  // sometimes mask the last key
    g.fragment = [mask](const Bound<double>& b, Var<double>) { return project(softmax(b("x"), &mask), 6); };
  } else if (op == "resize_nearest") {
    p.add("x", uniform_tensor({n, h, w, c}, rng));
    g.fragment = [h, w](const Bound<double>& b, Var<double>) { return project(resize_nearest(b("x"), 2 * h, w + 1), 7); };
  } else if (op == "concat") {
    p.add("a", uniform_tensor({n, h, c}, rng));
    p.add("b", uniform_tensor({n, h, w}, rng));
    g.fragment = [](const Bound<double>& b, Var<double>) { return project(concat(b("a"), b("b")), 8); };
  } else if (op == "permute_reshape") {
    p.add("x", uniform_tensor({n, h, w, c}, rng));
    g.fragment = [n, h, w, c](const Bound<double>& b, Var<double>) {
      return project(reshape(permute(b("x"), {0, 2, 1, 3}), {n * w, h * c}), 9);
    };
  } else if (op == "bias_channel_scale") {
    p.add("x", uniform_tensor({n, h, w, c}, rng));
    p.add("bias", uniform_tensor({c}, rng));
    p.add("e", uniform_tensor({n, c}, rng));
    g.fragment = [](const Bound<double>& b, Var<double>) {
      return project(scale(add_channel(bias_add(b("x"), b("bias")), b("e")), 0.7), 10);
    };
  } else if (op == "reductions") {
    p.add("x", uniform_tensor({n, h, w, c}, rng));
    p.add("t", uniform_tensor({n, h, w, c}, rng));
    g.fragment = [](const Bound<double>& b, Var<double>) {
      return add(add(mse(b("x"), b("t")), mean(b("x"))), project(mean_spatial(b("x")), 11));
    };
  } else if (op == "gather_rows") {
    p.add("table", uniform_tensor({5, c}, rng));
    g.fragment = [](const Bound<double>& b, Var<double>) { return project(gather_rows(b("table"), {0, 3, 3, 1}), 12); };
  } else if (op == "softmax_cross_entropy") {
    p.add("logits", uniform_tensor({n, c + 1}, rng, -2, 2));
    std::vector<int> labels;
    for (std::int64_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(i % (c + 1)));
    g.fragment = [labels](const Bound<double>& b, Var<double>) { return softmax_cross_entropy(b("logits"), labels); };
  } else {
    throw std::invalid_argument("unknown op " + op);
  }
  return g;
}

struct GradSuiteRow {
  std::string name;
  std::size_t checked = 0;
  double max_rel = 0;
};

/// Every primitive over `trials` random shapes, then the codec, the UNet and the classifier.
inline std::vector<GradSuiteRow> run_grad_suite(int trials = 20, std::uint64_t seed = 0,
                                                const std::function<void(const GradSuiteRow&)>& on_row = {}) {
  std::vector<GradSuiteRow> rows;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    GradSuiteRow row{name, 0, r.max_rel()};
    for (const auto& e : r.entries) row.checked += e.checked;
    if (on_row) on_row(row);
    rows.push_back(row);
  };
  for (const auto& op : primitive_ops()) {
    std::mt19937_64 rng(seed ^ fnv1a(op));
    GradCheckReport all;
    for (int t = 0; t < trials; ++t) {
      const GradCase g = primitive_case(op, t, rng);
      const auto r = grad_check(g.fragment, g.params, g.input);
      all.entries.insert(all.entries.end(), r.entries.begin(), r.entries.end());
    }
    record(op, all);
  }
  std::mt19937_64 rng(seed + 1);

  {
    const CodecConfig cfg{8, 2, 2, 4};
    const BasicTensor<double> x = detail::uniform_tensor({2, 8, 8, 3}, rng);
    record("codec", grad_check(
                        [&](const Bound<double>& b, Var<double> xv) {
                          return mse(decoder_forward(b, cfg, encoder_forward(b, cfg, xv)), xv);
                        },
                        init_codec_params<double>(cfg, seed + 2), x, {.max_per_tensor = 8, .seed = seed}));
  }
  {
    UNetConfig cfg;
    cfg.base_width = 8;
    cfg.heads = 2;
    cfg.context_dim = 8;
    cfg.time_features = 8;
    cfg.emb_dim = 16;
    cfg.vocab_size = 11;
    const BasicTensor<double> z = detail::uniform_tensor({2, 4, 4, 4}, rng), eps = detail::uniform_tensor({2, 4, 4, 4}, rng);
    const std::vector<TokenSeq> conds{{Vocabulary::photo_id, Vocabulary::head_id, 6}, null_tokens()};
    const auto [ids, mask] = pack_tokens(conds, cfg);
    const BasicTensor<double> maskd = mask.cast<double>();
    const std::vector<double> times{12.0, 77.0};
    record("unet", grad_check(
                       [&](const Bound<double>& b, Var<double> x) {
                         const Var<double> pred = unet_forward(b, cfg, x, times, context_forward(b, cfg, ids), maskd);
                         return mse(pred, b.tape().constant(eps));
                       },
                       init_unet_params<double>(cfg, seed + 3), z, {.max_per_tensor = 4, .seed = seed}));
  }
  {
    const BasicTensor<double> x = detail::uniform_tensor({3, 8, 8, 3}, rng);
    const std::vector<int> labels{0, 3, 6};
    record("classifier", grad_check(
                             [&](const Bound<double>& b, Var<double> xv) {
                               return softmax_cross_entropy(classifier_logits(b, xv), labels);
                             },
                             init_classifier_params<double>(6, seed + 4), x, {.max_per_tensor = 8, .seed = seed}));
  }
  return rows;
}

}  // namespace r2i
