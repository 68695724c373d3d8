#pragma once

// Primitive ops recorded on a Tape. Activations are channels-last: images and
// latents are [N, H, W, C]; conv kernels are [kh, kw, Cin, Cout].

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "r2i/tape.hpp"
#include "r2i/tensor.hpp"

namespace r2i {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[M,N] (+)= op(A) * op(B), row-major buffers.
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n, std::int64_t k, bool trans_a,
          bool trans_b, bool accumulate) {
  using CMap = Eigen::Map<const RowMat<T>>;
  Eigen::Map<RowMat<T>> cm(c, m, n);
  CMap am(a, trans_a ? k : m, trans_a ? m : k);
  CMap bm(b, trans_b ? n : k, trans_b ? k : n);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) cm.noalias() += am * bm;
  else if (trans_a && !trans_b) cm.noalias() += am.transpose() * bm;
  else if (!trans_a && trans_b) cm.noalias() += am * bm.transpose();
  else cm.noalias() += am.transpose() * bm.transpose();
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

struct ConvGeom {
  std::int64_t n, h, w, cin, kh, kw, cout, stride, pad, ho, wo;
  std::int64_t rows() const { return n * ho * wo; }
  std::int64_t patch() const { return kh * kw * cin; }
  bool identity_cols() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::int64_t patch = g.patch();
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t oy = 0; oy < g.ho; ++oy)
      for (std::int64_t ox = 0; ox < g.wo; ++ox) {
        T* row = cols + ((b * g.ho + oy) * g.wo + ox) * patch;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            T* dst = row + (ky * g.kw + kx) * g.cin;
            if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
              std::fill(dst, dst + g.cin, T(0));
            } else {
              const T* src = x + ((b * g.h + iy) * g.w + ix) * g.cin;
              std::copy(src, src + g.cin, dst);
            }
          }
        }
      }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
  const std::int64_t patch = g.patch();
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t oy = 0; oy < g.ho; ++oy)
      for (std::int64_t ox = 0; ox < g.wo; ++ox) {
        const T* row = cols + ((b * g.ho + oy) * g.wo + ox) * patch;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            const T* src = row + (ky * g.kw + kx) * g.cin;
            T* dst = dx + ((b * g.h + iy) * g.w + ix) * g.cin;
            for (std::int64_t c = 0; c < g.cin; ++c) dst[c] += src[c];
          }
        }
      }
}

template <class T>
const BasicTensor<T>& out_grad(Tape<T>& tape, std::uint32_t self) {
  return tape.node(self).grad;
}

template <class T>
const BasicTensor<T>& in_value(Tape<T>& tape, std::uint32_t self, std::size_t k) {
  return tape.node(tape.node(self).inputs[k]).value;
}

template <class T>
std::uint32_t in_id(Tape<T>& tape, std::uint32_t self, std::size_t k) {
  return tape.node(self).inputs[k];
}

}  // namespace detail

/// [M,K] x [K,N] -> [M,N], or batched [B,M,K] x [B,K,N] -> [B,M,N].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool ok = (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) ||
                  (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
  detail::require(ok, "matmul: shape mismatch " + shape_string(sa) + " vs " + shape_string(sb));
  const std::int64_t batch = sa.size() == 3 ? sa[0] : 1;
  const std::int64_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  Shape so = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  BasicTensor<T> out(so);
  for (std::int64_t i = 0; i < batch; ++i) {
    detail::gemm(a.value().ptr() + i * m * k, b.value().ptr() + i * k * n, out.ptr() + i * m * n, m, n, k,
                 false, false, false);
  }
  return a.tape->record("matmul", {a, b}, std::move(out), [batch, m, n, k](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    const auto ida = detail::in_id(t, self, 0), idb = detail::in_id(t, self, 1);
    if (t.requires_grad(ida)) {
      auto& ga = t.grad_slot(ida);
      const auto& bv = t.node(idb).value;
      for (std::int64_t i = 0; i < batch; ++i)
        detail::gemm(g.ptr() + i * m * n, bv.ptr() + i * k * n, ga.ptr() + i * m * k, m, k, n, false, true, true);
    }
    if (t.requires_grad(idb)) {
      auto& gb = t.grad_slot(idb);
      const auto& av = t.node(ida).value;
      for (std::int64_t i = 0; i < batch; ++i)
        detail::gemm(av.ptr() + i * m * k, g.ptr() + i * m * n, gb.ptr() + i * k * n, k, n, m, true, false, true);
    }
  });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <class T>
Var<T> transpose(Var<T> x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 2 || s.size() == 3, "transpose: rank must be 2 or 3, got " + shape_string(s));
  const std::int64_t batch = s.size() == 3 ? s[0] : 1;
  const std::int64_t r = s[s.size() - 2], c = s.back();
  auto run = [batch, r, c](const T* src, T* dst) {
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) dst[b * r * c + j * r + i] += src[b * r * c + i * c + j];
  };
  Shape so = s;
  std::swap(so[so.size() - 1], so[so.size() - 2]);
  BasicTensor<T> out(so);
  run(x.value().ptr(), out.ptr());
  return x.tape->record("transpose", {x}, std::move(out), [batch, r, c](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    auto& gx = t.grad_slot(detail::in_id(t, self, 0));
    // g has shape [.., c, r]; route back to [.., r, c]
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t j = 0; j < c; ++j)
        for (std::int64_t i = 0; i < r; ++i) gx.ptr()[b * r * c + i * c + j] += g.ptr()[b * r * c + j * r + i];
  });
}

/// 2-D convolution, x [N,H,W,Cin], kernel [kh,kw,Cin,Cout] -> [N,Ho,Wo,Cout]. No bias.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::int64_t stride = 1, std::int64_t padding = 0) {
  const Shape& sx = x.shape();
  const Shape& sk = kernel.shape();
  detail::require(sx.size() == 4 && sk.size() == 4 && sx[3] == sk[2],
                  "conv2d: shape mismatch input " + shape_string(sx) + " vs kernel " + shape_string(sk));
  detail::require(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
  detail::ConvGeom g{sx[0], sx[1], sx[2], sx[3], sk[0], sk[1], sk[3], stride, padding, 0, 0};
  detail::require(g.h + 2 * padding >= g.kh && g.w + 2 * padding >= g.kw,
                  "conv2d: kernel " + shape_string(sk) + " larger than padded input " + shape_string(sx));
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  BasicTensor<T> cols;
  const T* colp = x.value().ptr();
  if (!g.identity_cols()) {
    cols = BasicTensor<T>(Shape{g.rows(), g.patch()});
    detail::im2col(x.value().ptr(), g, cols.ptr());
    colp = cols.ptr();
  }
  BasicTensor<T> out(Shape{g.n, g.ho, g.wo, g.cout});
  detail::gemm(colp, kernel.value().ptr(), out.ptr(), g.rows(), g.cout, g.patch(), false, false, false);

  const bool need_cols = x.tape->requires_grad(kernel.id) && !g.identity_cols();
  if (!need_cols) cols = BasicTensor<T>();
  return x.tape->record("conv2d", {x, kernel}, std::move(out),
                        [g, cols = std::move(cols)](Tape<T>& t, std::uint32_t self) {
                          const auto& gy = detail::out_grad(t, self);
                          const auto idx = detail::in_id(t, self, 0), idk = detail::in_id(t, self, 1);
                          const auto& kv = t.node(idk).value;
                          if (t.requires_grad(idk)) {
                            const T* colp = g.identity_cols() ? t.node(idx).value.ptr() : cols.ptr();
                            detail::gemm(colp, gy.ptr(), t.grad_slot(idk).ptr(), g.patch(), g.cout, g.rows(), true,
                                         false, true);
                          }
                          if (t.requires_grad(idx)) {
                            auto& gx = t.grad_slot(idx);
                            if (g.identity_cols()) {
                              detail::gemm(gy.ptr(), kv.ptr(), gx.ptr(), g.rows(), g.patch(), g.cout, false, true,
                                           true);
                            } else {
                              std::vector<T> dcols(static_cast<std::size_t>(g.rows() * g.patch()));
                              detail::gemm(gy.ptr(), kv.ptr(), dcols.data(), g.rows(), g.patch(), g.cout, false,
                                           true, false);
                              detail::col2im(dcols.data(), g, gx.ptr());
                            }
                          }
                        });
}

namespace detail {

template <class T, class F, class G>
Var<T> binary_elementwise(const char* op, Var<T> a, Var<T> b, F fwd, G bwd) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  BasicTensor<T> out(a.shape());
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  return a.tape->record(op, {a, b}, std::move(out), [bwd](Tape<T>& t, std::uint32_t self) {
    const auto& g = out_grad(t, self);
    const auto ida = in_id(t, self, 0), idb = in_id(t, self, 1);
    const auto& av = t.node(ida).value;
    const auto& bv = t.node(idb).value;
    T* ga = t.requires_grad(ida) ? t.grad_slot(ida).ptr() : nullptr;
    T* gb = t.requires_grad(idb) ? t.grad_slot(idb).ptr() : nullptr;
    for (std::size_t i = 0; i < g.size(); ++i) bwd(g[i], av[i], bv[i], ga ? &ga[i] : nullptr, gb ? &gb[i] : nullptr);
  });
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary_elementwise(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T* ga, T* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary_elementwise(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T* ga, T* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary_elementwise(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T x, T y, T* ga, T* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * s;
  return x.tape->record("scale", {x}, std::move(out), [s](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    auto& gx = t.grad_slot(detail::in_id(t, self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

/// x [..., C] + bias [C].
template <class T>
Var<T> bias_add(Var<T> x, Var<T> bias) {
  const Shape& sx = x.shape();
  detail::require(bias.shape().size() == 1 && !sx.empty() && sx.back() == bias.dim(0),
                  "bias_add: shape mismatch " + shape_string(sx) + " vs " + shape_string(bias.shape()));
  const std::int64_t c = sx.back();
  const std::size_t rows = x.value().size() / static_cast<std::size_t>(c);
  BasicTensor<T> out(sx);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < c; ++j) out[r * c + j] = x.value()[r * c + j] + bias.value()[j];
  return x.tape->record("bias_add", {x, bias}, std::move(out), [rows, c](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    const auto idx = detail::in_id(t, self, 0), idb = detail::in_id(t, self, 1);
    if (t.requires_grad(idx)) t.accumulate(idx, g);
    if (t.requires_grad(idb)) {
      auto& gb = t.grad_slot(idb);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
  });
}

/// x [N, ..., C] + e [N, C], broadcast over the middle axes.
template <class T>
Var<T> add_channel(Var<T> x, Var<T> e) {
  const Shape& sx = x.shape();
  const Shape& se = e.shape();
  detail::require(sx.size() >= 2 && se.size() == 2 && se[0] == sx[0] && se[1] == sx.back(),
                  "add_channel: shape mismatch " + shape_string(sx) + " vs " + shape_string(se));
  const std::int64_t n = sx[0], c = sx.back();
  const std::int64_t inner = static_cast<std::int64_t>(x.value().size()) / (n * c);
  BasicTensor<T> out(sx);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t s = 0; s < inner; ++s)
      for (std::int64_t j = 0; j < c; ++j) {
        const std::size_t i = static_cast<std::size_t>((b * inner + s) * c + j);
        out[i] = x.value()[i] + e.value()[b * c + j];
      }
  return x.tape->record("add_channel", {x, e}, std::move(out), [n, inner, c](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    const auto idx = detail::in_id(t, self, 0), ide = detail::in_id(t, self, 1);
    if (t.requires_grad(idx)) t.accumulate(idx, g);
    if (t.requires_grad(ide)) {
      auto& ge = t.grad_slot(ide);
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t s = 0; s < inner; ++s)
          for (std::int64_t j = 0; j < c; ++j) ge[b * c + j] += g[(b * inner + s) * c + j];
    }
  });
}

template <class T>
Var<T> silu(Var<T> x) {
  BasicTensor<T> out(x.shape());
  const T* px = x.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] / (T(1) + std::exp(-px[i]));
  return x.tape->record("silu", {x}, std::move(out), [](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    const auto idx = detail::in_id(t, self, 0);
    const auto& xv = t.node(idx).value;
    auto& gx = t.grad_slot(idx);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-xv[i]));
      gx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
    }
  });
}

/// Normalises x [N, ..., C] over (spatial, channels-in-group) per sample, then applies gamma/beta [C].
template <class T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::int64_t groups, T eps = T(1e-5)) {
  const Shape& sx = x.shape();
  detail::require(sx.size() >= 2, "group_norm: rank must be >= 2, got " + shape_string(sx));
  const std::int64_t n = sx[0], c = sx.back();
  detail::require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
                  "group_norm: affine shape mismatch " + shape_string(gamma.shape()) + " vs channels " +
                      std::to_string(c));
  detail::require(groups >= 1 && c % groups == 0,
                  "group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
  const std::int64_t inner = static_cast<std::int64_t>(x.value().size()) / (n * c);
  const std::int64_t cg = c / groups;
  const double count = static_cast<double>(inner * cg);

  BasicTensor<T> xhat(sx);
  std::vector<T> rstd(static_cast<std::size_t>(n * groups));
  const T* px = x.value().ptr();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      double sum = 0, sq = 0;
      for (std::int64_t s = 0; s < inner; ++s)
        for (std::int64_t j = gi * cg; j < (gi + 1) * cg; ++j) {
          const double v = px[(b * inner + s) * c + j];
          sum += v;
          sq += v * v;
        }
      const double mean = sum / count;
      const double var = std::max(0.0, sq / count - mean * mean);
      const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      rstd[b * groups + gi] = r;
      for (std::int64_t s = 0; s < inner; ++s)
        for (std::int64_t j = gi * cg; j < (gi + 1) * cg; ++j) {
          const std::size_t i = static_cast<std::size_t>((b * inner + s) * c + j);
          xhat[i] = static_cast<T>((px[i] - mean) * r);
        }
    }
  BasicTensor<T> out(sx);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t j = i % static_cast<std::size_t>(c);
    out[i] = xhat[i] * gamma.value()[j] + beta.value()[j];
  }
  return x.tape->record(
      "group_norm", {x, gamma, beta}, std::move(out),
      [n, c, inner, groups, cg, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::uint32_t self) {
        const auto& g = detail::out_grad(t, self);
        const auto idx = detail::in_id(t, self, 0), idg = detail::in_id(t, self, 1), idb = detail::in_id(t, self, 2);
        const auto& gam = t.node(idg).value;
        if (t.requires_grad(idg) || t.requires_grad(idb)) {
          BasicTensor<T> dg(Shape{c}), db(Shape{c});
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t j = i % static_cast<std::size_t>(c);
            dg[j] += g[i] * xhat[i];
            db[j] += g[i];
          }
          t.accumulate(idg, dg);
          t.accumulate(idb, db);
        }
        if (!t.requires_grad(idx)) return;
        auto& gx = t.grad_slot(idx);
        const double count = static_cast<double>(inner * cg);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t gi = 0; gi < groups; ++gi) {
            double m1 = 0, m2 = 0;
            for (std::int64_t s = 0; s < inner; ++s)
              for (std::int64_t j = gi * cg; j < (gi + 1) * cg; ++j) {
                const std::size_t i = static_cast<std::size_t>((b * inner + s) * c + j);
                const double dxh = double(g[i]) * gam[j];
                m1 += dxh;
                m2 += dxh * xhat[i];
              }
            m1 /= count;
            m2 /= count;
            const double r = rstd[b * groups + gi];
            for (std::int64_t s = 0; s < inner; ++s)
              for (std::int64_t j = gi * cg; j < (gi + 1) * cg; ++j) {
                const std::size_t i = static_cast<std::size_t>((b * inner + s) * c + j);
                const double dxh = double(g[i]) * gam[j];
                gx[i] += static_cast<T>(r * (dxh - m1 - xhat[i] * m2));
              }
          }
      });
}

/// Softmax over the last axis. `key_mask` ([R', L], 1 = keep, 0 = masked) applies row r' = row / (rows / R')
/// of the mask to each logical row; masked entries get exactly zero probability.
template <class T>
Var<T> softmax(Var<T> x, const BasicTensor<T>* key_mask = nullptr) {
  const Shape& sx = x.shape();
  detail::require(!sx.empty(), "softmax: scalar input");
  const std::int64_t l = sx.back();
  const std::int64_t rows = static_cast<std::int64_t>(x.value().size()) / l;
  std::int64_t per_mask_row = rows;
  if (key_mask) {
    detail::require(key_mask->rank() == 2 && key_mask->dim(1) == l && rows % key_mask->dim(0) == 0,
                    "softmax: mask " + shape_string(key_mask->shape()) + " incompatible with " + shape_string(sx));
    per_mask_row = rows / key_mask->dim(0);
  }
  BasicTensor<T> out(sx);
  const T* px = x.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* m = key_mask ? key_mask->ptr() + (r / per_mask_row) * l : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::int64_t j = 0; j < l; ++j)
      if (!m || m[j] != T(0)) mx = std::max(mx, px[r * l + j]);
    if (!std::isfinite(mx)) throw NumericError("softmax: every key masked in a row");
    T sum = 0;
    for (std::int64_t j = 0; j < l; ++j) {
      const T e = (!m || m[j] != T(0)) ? std::exp(px[r * l + j] - mx) : T(0);
      out[r * l + j] = e;
      sum += e;
    }
    for (std::int64_t j = 0; j < l; ++j) out[r * l + j] /= sum;
  }
  return x.tape->record("softmax", {x}, std::move(out), [rows, l](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    const auto& y = t.node(self).value;
    auto& gx = t.grad_slot(detail::in_id(t, self, 0));
    for (std::int64_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::int64_t j = 0; j < l; ++j) dot += y[r * l + j] * g[r * l + j];
      for (std::int64_t j = 0; j < l; ++j) gx[r * l + j] += y[r * l + j] * (g[r * l + j] - dot);
    }
  });
}

/// Nearest-neighbour resize of [N,H,W,C] to [N,Ho,Wo,C]; source index = floor(dst * H / Ho).
template <class T>
Var<T> resize_nearest(Var<T> x, std::int64_t ho, std::int64_t wo) {
  const Shape& sx = x.shape();
  detail::require(sx.size() == 4 && ho > 0 && wo > 0, "resize_nearest: expected [N,H,W,C], got " + shape_string(sx));
  const std::int64_t n = sx[0], h = sx[1], w = sx[2], c = sx[3];
  auto src_index = [=](std::int64_t b, std::int64_t oy, std::int64_t ox) {
    return ((b * h + oy * h / ho) * w + ox * w / wo) * c;
  };
  BasicTensor<T> out(Shape{n, ho, wo, c});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const T* s = x.value().ptr() + src_index(b, oy, ox);
        std::copy(s, s + c, out.ptr() + ((b * ho + oy) * wo + ox) * c);
      }
  return x.tape->record("resize_nearest", {x}, std::move(out), [=](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    auto& gx = t.grad_slot(detail::in_id(t, self, 0));
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          const T* s = g.ptr() + ((b * ho + oy) * wo + ox) * c;
          T* d = gx.ptr() + src_index(b, oy, ox);
          for (std::int64_t j = 0; j < c; ++j) d[j] += s[j];
        }
  });
}

/// Concatenates along the last axis; all leading axes must match.
template <class T>
Var<T> concat(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  detail::require(sa.size() == sb.size() && !sa.empty() && std::equal(sa.begin(), sa.end() - 1, sb.begin()),
                  "concat: shape mismatch " + shape_string(sa) + " vs " + shape_string(sb));
  const std::int64_t ca = sa.back(), cb = sb.back(), c = ca + cb;
  const std::int64_t rows = static_cast<std::int64_t>(a.value().size()) / ca;
  Shape so = sa;
  so.back() = c;
  BasicTensor<T> out(so);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().ptr() + r * ca, ca, out.ptr() + r * c);
    std::copy_n(b.value().ptr() + r * cb, cb, out.ptr() + r * c + ca);
  }
  return a.tape->record("concat", {a, b}, std::move(out), [rows, ca, cb, c](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    const auto ida = detail::in_id(t, self, 0), idb = detail::in_id(t, self, 1);
    T* ga = t.requires_grad(ida) ? t.grad_slot(ida).ptr() : nullptr;
    T* gb = t.requires_grad(idb) ? t.grad_slot(idb).ptr() : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      if (ga)
        for (std::int64_t j = 0; j < ca; ++j) ga[r * ca + j] += g[r * c + j];
      if (gb)
        for (std::int64_t j = 0; j < cb; ++j) gb[r * cb + j] += g[r * c + ca + j];
    }
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  detail::require(shape_numel(shape) == x.value().size(),
                  "reshape: " + shape_string(x.shape()) + " cannot become " + shape_string(shape));
  return x.tape->record("reshape", {x}, x.value().reshaped(std::move(shape)), [](Tape<T>& t, std::uint32_t self) {
    const auto idx = detail::in_id(t, self, 0);
    t.accumulate(idx, detail::out_grad(t, self).reshaped(t.node(idx).value.shape()));
  });
}

/// Rank-4 axis permutation; output axis i is input axis perm[i].
template <class T>
Var<T> permute(Var<T> x, std::array<int, 4> perm) {
  const Shape& sx = x.shape();
  detail::require(sx.size() == 4, "permute: rank must be 4, got " + shape_string(sx));
  std::array<bool, 4> seen{};
  for (int p : perm) {
    detail::require(p >= 0 && p < 4 && !seen[p], "permute: invalid permutation");
    seen[p] = true;
  }
  std::array<std::int64_t, 4> in_stride{sx[1] * sx[2] * sx[3], sx[2] * sx[3], sx[3], 1};
  Shape so{sx[perm[0]], sx[perm[1]], sx[perm[2]], sx[perm[3]]};
  std::array<std::int64_t, 4> st{in_stride[perm[0]], in_stride[perm[1]], in_stride[perm[2]], in_stride[perm[3]]};
  auto for_each = [so, st](auto&& fn) {
    std::int64_t o = 0;
    for (std::int64_t a = 0; a < so[0]; ++a)
      for (std::int64_t b = 0; b < so[1]; ++b)
        for (std::int64_t c = 0; c < so[2]; ++c)
          for (std::int64_t d = 0; d < so[3]; ++d) fn(o++, a * st[0] + b * st[1] + c * st[2] + d * st[3]);
  };
  BasicTensor<T> out(so);
  const T* px = x.value().ptr();
  for_each([&](std::int64_t o, std::int64_t i) { out[o] = px[i]; });
  return x.tape->record("permute", {x}, std::move(out), [for_each](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    auto& gx = t.grad_slot(detail::in_id(t, self, 0));
    for_each([&](std::int64_t o, std::int64_t i) { gx[i] += g[o]; });
  });
}

/// Mean over the middle axes: [N, ..., C] -> [N, C].
template <class T>
Var<T> mean_spatial(Var<T> x) {
  const Shape& sx = x.shape();
  detail::require(sx.size() >= 3, "mean_spatial: rank must be >= 3, got " + shape_string(sx));
  const std::int64_t n = sx[0], c = sx.back();
  const std::int64_t inner = static_cast<std::int64_t>(x.value().size()) / (n * c);
  BasicTensor<T> out(Shape{n, c});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t s = 0; s < inner; ++s)
      for (std::int64_t j = 0; j < c; ++j) out[b * c + j] += x.value()[(b * inner + s) * c + j];
  for (auto& v : out.data()) v /= static_cast<T>(inner);
  return x.tape->record("mean_spatial", {x}, std::move(out), [n, c, inner](Tape<T>& t, std::uint32_t self) {
    const auto& g = detail::out_grad(t, self);
    auto& gx = t.grad_slot(detail::in_id(t, self, 0));
    const T inv = T(1) / static_cast<T>(inner);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < inner; ++s)
        for (std::int64_t j = 0; j < c; ++j) gx[(b * inner + s) * c + j] += g[b * c + j] * inv;
  });
}

template <class T>
Var<T> sum(Var<T> x) {
  double s = 0;
  for (T v : x.value().data()) s += v;
  return x.tape->record("sum", {x}, BasicTensor<T>::scalar(static_cast<T>(s)), [](Tape<T>& t, std::uint32_t self) {
    const T g = detail::out_grad(t, self)[0];
    auto& gx = t.grad_slot(detail::in_id(t, self, 0));
    for (auto& v : gx.data()) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

/// mean((a - b)^2) as a scalar.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double s = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double d = double(a.value()[i]) - double(b.value()[i]);
    s += d * d;
  }
  const std::size_t count = a.value().size();
  return a.tape->record("mse", {a, b}, BasicTensor<T>::scalar(static_cast<T>(s / double(count))),
                        [count](Tape<T>& t, std::uint32_t self) {
                          const T g = detail::out_grad(t, self)[0] * T(2) / static_cast<T>(count);
                          const auto ida = detail::in_id(t, self, 0), idb = detail::in_id(t, self, 1);
                          const auto& av = t.node(ida).value;
                          const auto& bv = t.node(idb).value;
                          T* ga = t.requires_grad(ida) ? t.grad_slot(ida).ptr() : nullptr;
                          T* gb = t.requires_grad(idb) ? t.grad_slot(idb).ptr() : nullptr;
                          for (std::size_t i = 0; i < count; ++i) {
                            const T d = g * (av[i] - bv[i]);
                            if (ga) ga[i] += d;
                            if (gb) gb[i] -= d;
                          }
                        });
}

/// Rows of table [V, D] selected by ids -> [len, D].
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::int64_t> ids) {
  const Shape& st = table.shape();
  detail::require(st.size() == 2 && !ids.empty(), "gather_rows: expected [V, D] table, got " + shape_string(st));
  const std::int64_t v = st[0], d = st[1];
  BasicTensor<T> out(Shape{static_cast<std::int64_t>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v) throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(table.value().ptr() + ids[i] * d, d, out.ptr() + static_cast<std::int64_t>(i) * d);
  }
  return table.tape->record("gather_rows", {table}, std::move(out),
                            [d, ids = std::move(ids)](Tape<T>& t, std::uint32_t self) {
                              const auto& g = detail::out_grad(t, self);
                              auto& gt = t.grad_slot(detail::in_id(t, self, 0));
                              for (std::size_t i = 0; i < ids.size(); ++i)
                                for (std::int64_t j = 0; j < d; ++j)
                                  gt[ids[i] * d + j] += g[static_cast<std::int64_t>(i) * d + j];
                            });
}

/// Mean negative log-likelihood of integer labels under softmax(logits [N, K]).
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<int> labels) {
  const Shape& s = logits.shape();
  detail::require(s.size() == 2 && static_cast<std::size_t>(s[0]) == labels.size(),
                  "softmax_cross_entropy: logits " + shape_string(s) + " vs " + std::to_string(labels.size()) +
                      " labels");
  const std::int64_t n = s[0], k = s[1];
  BasicTensor<T> prob(s);
  double loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw std::out_of_range("softmax_cross_entropy: label out of range");
    const T* row = logits.value().ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    double z = 0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(double(row[j] - mx));
    for (std::int64_t j = 0; j < k; ++j) prob[i * k + j] = static_cast<T>(std::exp(double(row[j] - mx)) / z);
    loss -= double(row[labels[i]] - mx) - std::log(z);
  }
  return logits.tape->record("softmax_cross_entropy", {logits}, BasicTensor<T>::scalar(static_cast<T>(loss / double(n))),
                             [n, k, labels = std::move(labels), prob = std::move(prob)](Tape<T>& t, std::uint32_t self) {
                               const T g = detail::out_grad(t, self)[0] / static_cast<T>(n);
                               auto& gl = t.grad_slot(detail::in_id(t, self, 0));
                               for (std::int64_t i = 0; i < n; ++i)
                                 for (std::int64_t j = 0; j < k; ++j)
                                   gl[i * k + j] += g * (prob[i * k + j] - (j == labels[i] ? T(1) : T(0)));
                             });
}

}  // namespace r2i
