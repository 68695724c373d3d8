#pragma once

// Guided reverse chain and deterministic inversion over the DDIM update.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "r2i/denoiser.hpp"
#include "r2i/schedule.hpp"

namespace r2i {

struct SamplerConfig {
  double eta = 0.0;             // 0 = deterministic, 1 = ancestral
  double guidance_scale = 7.5;  // s
  std::uint64_t seed = 0;
  int substeps = 1;             // splits every integer step; 1 = the plain integer grid
};

/// eps_u + s (eps_c - eps_u). s = 0 and s = 1 return the selected branch untouched.
inline Tensor cfg_combine(const Tensor& eps_u, const Tensor& eps_c, double s) {
  require_same_shape(eps_u, eps_c, "cfg_combine");
  if (s == 0.0) return eps_u;
  if (s == 1.0) return eps_c;
  Tensor out(eps_u.shape());
  const float sf = static_cast<float>(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_u[i] + sf * (eps_c[i] - eps_u[i]);
  require_finite(out, "cfg_combine");
  return out;
}

namespace detail {

/// The predicted-z0 update between arbitrary times, without order checks.
inline Tensor ddim_update(const Tensor& z, double t_from, double t_to, const Tensor& eps, double eta,
                          const NoiseSchedule& sched, const Tensor* noise) {
  require_same_shape(z, eps, "ddim_step");
  const double a_from = sched.alpha_bar_at(t_from), a_to = sched.alpha_bar_at(t_to);
  double sigma = 0.0;
  if (eta > 0.0) sigma = eta * std::sqrt((1.0 - a_to) / (1.0 - a_from)) * std::sqrt(1.0 - a_from / a_to);
  const double dir = std::sqrt(std::max(0.0, 1.0 - a_to - sigma * sigma));
  const double s_from = std::sqrt(1.0 - a_from), r_from = std::sqrt(a_from), r_to = std::sqrt(a_to);
  if (sigma > 0.0 && !noise) throw std::invalid_argument("ddim_step: eta > 0 needs a noise tensor");
  if (noise) require_same_shape(z, *noise, "ddim_step noise");
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double z0 = (double(z[i]) - s_from * eps[i]) / r_from;
    double v = r_to * z0 + dir * eps[i];
    if (sigma > 0.0) v += sigma * (*noise)[i];
    out[i] = static_cast<float>(v);
  }
  require_finite(out, "ddim_step");
  return out;
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + index + 0x632be59bd9b4e019ULL;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// One DDIM step from t_from down to t_to (0 <= t_to < t_from <= T). `noise` is used only when eta > 0.
inline Tensor ddim_step(const Tensor& z_t, double t_from, double t_to, const Tensor& eps, double eta,
                        const NoiseSchedule& sched, const Tensor* noise = nullptr) {
  if (!(t_to >= 0.0 && t_to < t_from && t_from <= sched.steps())) {
    throw std::invalid_argument("ddim_step: need 0 <= t_to < t_from <= T, got t_from=" + std::to_string(t_from) +
                                ", t_to=" + std::to_string(t_to));
  }
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim_step: eta outside [0, 1]");
  return detail::ddim_update(z_t, t_from, t_to, eps, eta, sched, noise);
}

/// Batched noise estimate eps(z [N,...], t); the unit the chains below iterate.
using EpsFn = std::function<Tensor(const Tensor& z, double t)>;

/// Classifier-free-guided estimate from the denoiser, one condition per batch item.
/// The null and conditional passes share one batched forward; a branch whose weight is
/// exactly zero is not evaluated.
inline EpsFn guided_eps(const DenoiserModel& m, std::vector<TokenSeq> conds, double s) {
  if (!m.trained()) throw std::invalid_argument("denoiser is untrained");
  if (s < 0.0) throw std::invalid_argument("guidance scale must be >= 0");
  return [&m, conds = std::move(conds), s](const Tensor& z, double t) {
    const std::int64_t n = z.dim(0);
    if (static_cast<std::int64_t>(conds.size()) != n) {
      throw ShapeError("guided_eps: " + std::to_string(conds.size()) + " conditions for batch of " + std::to_string(n));
    }
    const std::vector<double> times(static_cast<std::size_t>(n), t);
    const std::vector<TokenSeq> nulls(static_cast<std::size_t>(n), null_tokens());
    if (s == 0.0) return predict_noise_batch(m, z, times, nulls);
    if (s == 1.0) return predict_noise_batch(m, z, times, conds);
    const Tensor zz[] = {z, z};
    std::vector<TokenSeq> both = nulls;
    both.insert(both.end(), conds.begin(), conds.end());
    const std::vector<double> times2(static_cast<std::size_t>(2 * n), t);
    const Tensor e = predict_noise_batch(m, stack_batch<float>(zz), times2, both);
    return cfg_combine(slice_batch(e, 0, n), slice_batch(e, n, 2 * n), s);
  };
}

/// Time grid k, k - 1/n, ..., 0.
inline std::vector<double> step_grid(int k, int substeps) {
  if (substeps < 1) throw std::invalid_argument("substeps must be >= 1");
  std::vector<double> g;
  for (int i = k * substeps; i >= 0; --i) g.push_back(static_cast<double>(i) / substeps);
  return g;
}

/// Reverse chain k -> 0 on a batch. Item i draws its step noise from stream (seed, first_index + i).
inline Tensor reverse_chain(const Tensor& z_k, int k, const EpsFn& eps_fn, const SamplerConfig& cfg,
                            const NoiseSchedule& sched, std::uint64_t first_index = 0) {
  if (k < 1 || k > sched.steps()) throw std::out_of_range("reverse: k=" + std::to_string(k) + " outside [1, T]");
  const auto grid = step_grid(k, cfg.substeps);
  const std::int64_t n = z_k.dim(0);
  std::vector<std::mt19937_64> rngs;
  for (std::int64_t i = 0; i < n; ++i) rngs.emplace_back(detail::stream_seed(cfg.seed, first_index + i));
  std::normal_distribution<float> normal;
  Tensor z = z_k;
  for (std::size_t j = 0; j + 1 < grid.size(); ++j) {
    const Tensor eps = eps_fn(z, grid[j]);
    if (cfg.eta > 0.0) {
      Tensor noise(z.shape());
      const std::size_t per = noise.size() / static_cast<std::size_t>(n);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::size_t e = 0; e < per; ++e) noise[i * per + e] = normal(rngs[i]);
      z = ddim_step(z, grid[j], grid[j + 1], eps, cfg.eta, sched, &noise);
    } else {
      z = ddim_step(z, grid[j], grid[j + 1], eps, 0.0, sched);
    }
  }
  return z;
}

/// Deterministic inversion 0 -> k. Each step reuses eps(z_t, t) from its start, as in standard
/// DDIM inversion; the first step starts at the clean latent, so it evaluates at its end time.
inline Tensor invert_chain(const Tensor& z_0, int k, const EpsFn& eps_fn, const NoiseSchedule& sched,
                           int substeps = 1) {
  if (k < 0 || k > sched.steps()) throw std::out_of_range("ddim_invert: k=" + std::to_string(k) + " outside [0, T]");
  if (k == 0) return z_0;
  auto grid = step_grid(k, substeps);
  std::reverse(grid.begin(), grid.end());
  Tensor z = z_0;
  for (std::size_t j = 0; j + 1 < grid.size(); ++j)
    z = detail::ddim_update(z, grid[j], grid[j + 1], eps_fn(z, grid[j] > 0.0 ? grid[j] : grid[j + 1]), 0.0, sched, nullptr);
  return z;
}

namespace detail {

inline std::pair<Tensor, bool> to_batch(const Tensor& z) {
  if (z.rank() == 3) return {unsqueeze0(z), true};
  if (z.rank() == 4) return {z, false};
  throw ShapeError("sampler: latent must be [h,w,c] or [N,h,w,c], got " + shape_string(z.shape()));
}

inline Tensor from_batch(const Tensor& z, bool single) {
  return single ? z.reshaped({z.dim(1), z.dim(2), z.dim(3)}) : z;
}

}  // namespace detail

/// Guided reverse diffusion of one latent [h,w,c] or a batch [N,h,w,c] sharing `cond`.
inline Tensor reverse(const Tensor& z_k, int k, const TokenSeq& cond, const SamplerConfig& cfg,
                      const NoiseSchedule& sched, const DenoiserModel& m, std::uint64_t first_index = 0) {
  auto [z, single] = detail::to_batch(z_k);
  const EpsFn fn = guided_eps(m, std::vector<TokenSeq>(static_cast<std::size_t>(z.dim(0)), cond), cfg.guidance_scale);
  return detail::from_batch(reverse_chain(z, k, fn, cfg, sched, first_index), single);
}

/// DDIM inversion under the same guided estimate (s = 1 uses the conditional branch alone).
inline Tensor ddim_invert(const Tensor& z_0, int k, const TokenSeq& cond, const NoiseSchedule& sched,
                          const DenoiserModel& m, double guidance_scale = 1.0, int substeps = 1) {
  auto [z, single] = detail::to_batch(z_0);
  const EpsFn fn = guided_eps(m, std::vector<TokenSeq>(static_cast<std::size_t>(z.dim(0)), cond), guidance_scale);
  return detail::from_batch(invert_chain(z, k, fn, sched, substeps), single);
}

}  // namespace r2i
