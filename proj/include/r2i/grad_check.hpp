#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "r2i/params.hpp"
#include "r2i/tape.hpp"

namespace r2i {

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel = 0;
  double mean_rel = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool empty() const noexcept { return entries.empty(); }
  double max_rel() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel);
    return m;
  }
  double mean_rel() const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& e : entries) {
      s += e.mean_rel * static_cast<double>(e.checked);
      n += e.checked;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

struct GradCheckOptions {
  double eps = 1e-6;
  // Entries smaller than this in both routes are compared absolutely.
  double floor = 1e-5;
  // 0 checks every element; otherwise a seeded random subset per tensor.
  std::size_t max_per_tensor = 0;
  std::uint64_t seed = 0;
  bool trainable = true;
};

/// Scalar-valued differentiable fragment evaluated in the 64-bit shadow.
using GradFragment = std::function<Var<double>(const Bound<double>&, Var<double>)>;

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares tape gradients with central differences, both evaluated in double.
inline GradCheckReport grad_check(const GradFragment& fragment, const ParamSet<double>& params,
                                  const BasicTensor<double>& input, const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  if (!opt.trainable || params.empty()) return report;

  auto eval = [&](const ParamSet<double>& p, bool trainable) {
    auto tape = std::make_unique<Tape<double>>();
    Bound<double> bound(*tape, p, trainable);
    Var<double> x = tape->constant(input);
    Var<double> loss = fragment(bound, x);
    return std::make_pair(std::move(tape), loss);
  };

  auto [tape, loss] = eval(params, true);
  const Gradients<double> grads = tape->backward(loss);

  std::mt19937_64 rng(opt.seed);
  ParamSet<double> probe = params;
  for (const auto& [name, value] : params) {
    std::vector<std::size_t> idx(value.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (opt.max_per_tensor && idx.size() > opt.max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_per_tensor);
    }
    GradCheckEntry entry{name, idx.size(), 0, 0};
    auto& p = probe.at(name);
    for (std::size_t i : idx) {
      const double orig = p[i];
      p[i] = orig + opt.eps;
      const double up = eval(probe, false).second.value().item();
      p[i] = orig - opt.eps;
      const double down = eval(probe, false).second.value().item();
      p[i] = orig;
      const double fd = (up - down) / (2 * opt.eps);
      const double rel = relative_error(grads.at(name)[i], fd, opt.floor);
      entry.max_rel = std::max(entry.max_rel, rel);
      entry.mean_rel += rel;
    }
    if (entry.checked) entry.mean_rel /= static_cast<double>(entry.checked);
    report.entries.push_back(entry);
  }
  return report;
}

inline GradCheckReport grad_check(const GradFragment& fragment, const ParamSet<float>& params,
                                  const BasicTensor<float>& input, const GradCheckOptions& opt = {}) {
  return grad_check(fragment, params.cast<double>(), input.cast<double>(), opt);
}

}  // namespace r2i
