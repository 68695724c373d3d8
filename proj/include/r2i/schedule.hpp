#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2i/tensor.hpp"

namespace r2i {

enum class ScheduleKind { linear, cosine };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule kind '" + s + "' (expected linear or cosine)");
}

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

/// Variance schedule with a clean slot: alpha_bar[0] = 1, alpha_bar[t] = prod_{i<=t} (1 - beta[i]).
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// beta is 1-indexed in the math; beta_[0] holds beta_1.
  explicit NoiseSchedule(std::vector<double> beta) : beta_(std::move(beta)) {
    if (beta_.size() < 2) throw std::invalid_argument("schedule needs T >= 2");
    alpha_bar_.assign(beta_.size() + 1, 1.0);
    for (std::size_t t = 1; t <= beta_.size(); ++t) {
      const double b = beta_[t - 1];
      if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta outside (0,1) at step " + std::to_string(t));
      alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - b);
    }
  }

  int steps() const noexcept { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(check(t, 1)) - 1); }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(check(t, 0))); }
  double snr(int t) const { return alpha_bar(t) / (1.0 - alpha_bar(t)); }

  /// alpha_bar at a fractional time, log-linear between integer steps.
  double alpha_bar_at(double t) const {
    if (!(t >= 0.0 && t <= steps())) throw std::out_of_range("time " + std::to_string(t) + " outside [0, T]");
    const int lo = static_cast<int>(std::floor(t));
    if (lo >= steps()) return alpha_bar_.back();
    const double w = t - lo;
    if (w == 0.0) return alpha_bar_[static_cast<std::size_t>(lo)];
    return std::exp((1 - w) * std::log(alpha_bar_[static_cast<std::size_t>(lo)]) +
                    w * std::log(alpha_bar_[static_cast<std::size_t>(lo) + 1]));
  }

  const std::vector<double>& betas() const noexcept { return beta_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

 private:
  int check(int t, int lo) const {
    if (t < lo || t > steps()) throw std::out_of_range("step " + std::to_string(t) + " outside schedule");
    return t;
  }

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// Linear: beta ramps from beta_start to beta_end. Cosine: the squared-cosine alpha_bar curve with
/// beta clipped into [beta_start, beta_end].
inline NoiseSchedule make_schedule(ScheduleKind kind, int steps, double beta_start, double beta_end) {
  if (steps < 2) throw std::invalid_argument("make_schedule: T must be >= 2, got " + std::to_string(steps));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> beta(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::linear) {
    for (int i = 0; i < steps; ++i) beta[i] = beta_start + (beta_end - beta_start) * i / (steps - 1);
  } else {
    constexpr double s = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + s) / (1 + s) * std::numbers::pi / 2);
      return c * c;
    };
    for (int i = 0; i < steps; ++i) {
      const double b = 1.0 - f(i + 1) / f(i);
      beta[i] = std::clamp(b, beta_start, beta_end);
    }
  }
  return NoiseSchedule(std::move(beta));
}

/// Linear schedule starting at 1e-4 whose beta_end is solved so alpha_bar[T] hits `terminal_alpha_bar`.
inline NoiseSchedule make_default_schedule(int steps = 100, double terminal_alpha_bar = 4e-3) {
  constexpr double beta_start = 1e-4;
  double lo = beta_start, hi = 0.999;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double ab = make_schedule(ScheduleKind::linear, steps, beta_start, mid).alpha_bar(steps);
    (ab > terminal_alpha_bar ? lo : hi) = mid;
  }
  return make_schedule(ScheduleKind::linear, steps, beta_start, 0.5 * (lo + hi));
}

/// k = round(f * T), clamped to [1, T].
inline int step_from_fraction(double fraction, int steps) {
  if (!(fraction > 0.0)) throw std::invalid_argument("fraction must be > 0, got " + std::to_string(fraction));
  if (fraction > 1.0) throw std::invalid_argument("fraction must be <= 1, got " + std::to_string(fraction));
  if (steps < 1) throw std::invalid_argument("step count must be positive");
  const long k = std::lround(fraction * steps);
  return static_cast<int>(std::clamp<long>(k, 1, steps));
}

/// z_k = sqrt(alpha_bar_k) z0 + sqrt(1 - alpha_bar_k) eps; k = 0 returns z0 unchanged.
template <class T>
BasicTensor<T> forward_diffuse(const BasicTensor<T>& z0, int k, const BasicTensor<T>& eps, const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "forward_diffuse");
  if (k < 0 || k > sched.steps()) throw std::out_of_range("forward_diffuse: k=" + std::to_string(k) + " outside [0, T]");
  if (k == 0) return z0;
  const T a = static_cast<T>(std::sqrt(sched.alpha_bar(k)));
  const T s = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(k)));
  BasicTensor<T> out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + s * eps[i];
  return out;
}

}  // namespace r2i
