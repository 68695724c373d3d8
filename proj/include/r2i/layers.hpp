#pragma once

// Parameterised building blocks shared by the codec, the denoiser and the classifier.
// Each block owns parameters "<name>.<field>" in a ParamSet.

#include <cmath>
#include <random>
#include <string>

#include "r2i/ops.hpp"
#include "r2i/params.hpp"

namespace r2i::layers {

/// 8 groups, or a single group (layer norm) below 8 channels.
inline std::int64_t norm_groups(std::int64_t channels) { return channels >= 8 && channels % 8 == 0 ? 8 : 1; }

template <class T>
void add_conv(ParamSet<T>& p, const std::string& name, std::int64_t k, std::int64_t cin, std::int64_t cout,
              std::mt19937_64& rng, double gain = 1.0) {
  p.add(name + ".w", init_uniform<T>({k, k, cin, cout}, k * k * cin, rng, gain));
  p.add(name + ".b", BasicTensor<T>(Shape{cout}));
}

template <class T>
void add_linear(ParamSet<T>& p, const std::string& name, std::int64_t in, std::int64_t out, std::mt19937_64& rng,
                double gain = 1.0) {
  p.add(name + ".w", init_uniform<T>({in, out}, in, rng, gain));
  p.add(name + ".b", BasicTensor<T>(Shape{out}));
}

template <class T>
void add_norm(ParamSet<T>& p, const std::string& name, std::int64_t channels) {
  p.add(name + ".g", BasicTensor<T>(Shape{channels}, T(1)));
  p.add(name + ".b", BasicTensor<T>(Shape{channels}));
}

template <class T>
Var<T> conv(const Bound<T>& p, const std::string& name, Var<T> x, std::int64_t stride = 1) {
  const std::int64_t k = p(name + ".w").dim(0);
  return bias_add(conv2d(x, p(name + ".w"), stride, k / 2), p(name + ".b"));
}

/// Affine map over the last axis; leading axes are flattened and restored.
template <class T>
Var<T> linear(const Bound<T>& p, const std::string& name, Var<T> x) {
  const Shape s = x.shape();
  const Var<T> w = p(name + ".w");
  const std::int64_t in = s.back(), out = w.dim(1);
  Var<T> h = s.size() == 2 ? x : reshape(x, {static_cast<std::int64_t>(x.value().size()) / in, in});
  h = bias_add(matmul(h, w), p(name + ".b"));
  if (s.size() == 2) return h;
  Shape so = s;
  so.back() = out;
  return reshape(h, so);
}

template <class T>
Var<T> norm(const Bound<T>& p, const std::string& name, Var<T> x) {
  return group_norm(x, p(name + ".g"), p(name + ".b"), norm_groups(x.shape().back()));
}

/// Residual block with an optional per-sample embedding injected between the two convolutions.
template <class T>
void add_res_block(ParamSet<T>& p, const std::string& name, std::int64_t cin, std::int64_t cout, std::int64_t emb_dim,
                   std::mt19937_64& rng) {
  add_norm(p, name + ".n1", cin);
  add_conv(p, name + ".c1", 3, cin, cout, rng);
  if (emb_dim > 0) add_linear(p, name + ".emb", emb_dim, cout, rng);
  add_norm(p, name + ".n2", cout);
  add_conv(p, name + ".c2", 3, cout, cout, rng, 0.5);
  if (cin != cout) add_conv(p, name + ".skip", 1, cin, cout, rng);
}

template <class T>
Var<T> res_block(const Bound<T>& p, const std::string& name, Var<T> x, const Var<T>* emb = nullptr) {
  Var<T> h = conv(p, name + ".c1", silu(norm(p, name + ".n1", x)));
  if (emb) h = add_channel(h, linear(p, name + ".emb", *emb));
  h = conv(p, name + ".c2", silu(norm(p, name + ".n2", h)));
  const Var<T> skip = h.shape().back() == x.shape().back() ? x : conv(p, name + ".skip", x);
  return add(skip, h);
}

template <class T>
void add_cross_attention(ParamSet<T>& p, const std::string& name, std::int64_t channels, std::int64_t context_dim,
                         std::mt19937_64& rng) {
  add_norm(p, name + ".norm", channels);
  add_linear(p, name + ".q", channels, channels, rng);
  add_linear(p, name + ".k", context_dim, channels, rng);
  add_linear(p, name + ".v", context_dim, channels, rng);
  add_linear(p, name + ".o", channels, channels, rng, 0.5);
}

/// Multi-head cross-attention from spatial queries x [N,H,W,C] onto context tokens ctx [N,M,D].
/// key_mask [N,M] marks real tokens with 1. Returns x + attention output. When `weights` is
/// non-null it receives the attention probabilities [N*heads, H*W, M].
template <class T>
Var<T> cross_attention(const Bound<T>& p, const std::string& name, Var<T> x, Var<T> ctx,
                       const BasicTensor<T>& key_mask, std::int64_t heads, Var<T>* weights = nullptr) {
  const Shape sx = x.shape();
  const std::int64_t n = sx[0], hw = sx[1] * sx[2], c = sx[3];
  const std::int64_t m = ctx.dim(1);
  if (c % heads != 0) throw ShapeError("cross_attention: channels not divisible by heads");
  if (ctx.dim(0) != n || key_mask.shape() != Shape{n, m}) {
    throw ShapeError("cross_attention: context " + shape_string(ctx.shape()) + " / mask " +
                     shape_string(key_mask.shape()) + " do not match batch " + std::to_string(n));
  }
  const std::int64_t dh = c / heads;
  auto split = [&](Var<T> v, std::int64_t len) {
    return reshape(permute(reshape(v, {n, len, heads, dh}), {0, 2, 1, 3}), {n * heads, len, dh});
  };
  const Var<T> h = norm(p, name + ".norm", x);
  const Var<T> q = split(linear(p, name + ".q", reshape(h, {n * hw, c})), hw);
  const Var<T> k = split(linear(p, name + ".k", reshape(ctx, {n * m, ctx.dim(2)})), m);
  const Var<T> v = split(linear(p, name + ".v", reshape(ctx, {n * m, ctx.dim(2)})), m);
  const Var<T> logits = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(double(dh))));
  const Var<T> attn = softmax(logits, &key_mask);
  if (weights) *weights = attn;
  Var<T> o = reshape(matmul(attn, v), {n, heads, hw, dh});
  o = reshape(permute(o, {0, 2, 1, 3}), {n * hw, c});
  o = linear(p, name + ".o", o);
  return add(x, reshape(o, sx));
}

}  // namespace r2i::layers
