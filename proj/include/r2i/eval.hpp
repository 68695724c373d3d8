#pragma once

// Toy classifier (class logits plus a reject class), FID, KID and top-1 scoring.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "r2i/adam.hpp"
#include "r2i/layers.hpp"

namespace r2i {

inline constexpr std::int64_t classifier_feature_dim = 64;

struct ClassifierModel {
  int class_count = 6;  // logits = class_count + 1; the last one is "reject"
  ParamSet<float> params;
  bool trained = false;

  int reject_id() const noexcept { return class_count; }
};

template <class T>
ParamSet<T> init_classifier_params(int class_count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet<T> p;
  layers::add_conv(p, "classifier.c0", 3, 3, 16, rng);
  layers::add_conv(p, "classifier.c1", 3, 16, 32, rng);
  layers::add_conv(p, "classifier.c2", 3, 32, 64, rng);
  layers::add_conv(p, "classifier.c3", 3, 64, classifier_feature_dim, rng);
  layers::add_linear(p, "classifier.head", classifier_feature_dim, class_count + 1, rng);
  return p;
}

/// Penultimate features [N, 64].
template <class T>
Var<T> classifier_features(const Bound<T>& p, Var<T> x) {
  Var<T> h = silu(layers::conv(p, "classifier.c0", x));
  h = silu(layers::conv(p, "classifier.c1", h, 2));
  h = silu(layers::conv(p, "classifier.c2", h, 2));
  h = silu(layers::conv(p, "classifier.c3", h));
  return mean_spatial(h);
}

template <class T>
Var<T> classifier_logits(const Bound<T>& p, Var<T> x) {
  return layers::linear(p, "classifier.head", classifier_features(p, x));
}

namespace detail {

template <class F>
Tensor map_rows(const Tensor& images, F&& fn) {
  if (images.rank() != 4 || images.dim(3) != 3) throw ShapeError("classifier: expected [N,H,W,3], got " + shape_string(images.shape()));
  std::vector<Tensor> parts;
  for (std::int64_t b = 0; b < images.dim(0); b += 128) parts.push_back(fn(slice_batch(images, b, std::min(images.dim(0), b + 128))));
  return parts.size() == 1 ? std::move(parts[0]) : stack_batch<float>(parts);
}

}  // namespace detail

inline Tensor classifier_features(const ClassifierModel& m, const Tensor& images) {
  return detail::map_rows(images, [&](const Tensor& x) {
    Tape<float> tape;
    Bound<float> p(tape, m.params, false);
    return classifier_features(p, tape.constant(x)).value();
  });
}

inline std::vector<int> classifier_predict(const ClassifierModel& m, const Tensor& images) {
  const Tensor logits = detail::map_rows(images, [&](const Tensor& x) {
    Tape<float> tape;
    Bound<float> p(tape, m.params, false);
    return classifier_logits(p, tape.constant(x)).value();
  });
  const std::int64_t k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float* row = logits.ptr() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

struct ClassifierTrainConfig {
  int epochs = 8;
  double lr = 2e-3;
  int batch = 64;
  std::uint64_t seed = 0;
};

struct ClassifierTrainResult {
  ClassifierModel model;
  std::vector<double> epoch_loss;
  double holdout_accuracy = 0;  // creature images, exact class
  double holdout_reject = 0;    // skeleton images predicted as reject
};

/// Trains on labelled creature images plus skeleton images labelled "reject".
/// Optional holdout sets are scored after training.
inline ClassifierTrainResult train_classifier(const Tensor& creatures, const std::vector<int>& labels,
                                              const Tensor& skeletons, int class_count,
                                              const ClassifierTrainConfig& tc, const Tensor& holdout_creatures = {},
                                              const std::vector<int>& holdout_labels = {},
                                              const Tensor& holdout_skeletons = {},
                                              const std::function<void(int, double)>& on_epoch = {}) {
  if (creatures.rank() != 4 || creatures.dim(0) == 0) throw std::invalid_argument("train_classifier: empty creature set");
  if (static_cast<std::int64_t>(labels.size()) != creatures.dim(0)) throw ShapeError("train_classifier: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= class_count) throw std::out_of_range("train_classifier: label " + std::to_string(l));
  std::vector<Tensor> all{creatures};
  std::vector<int> y = labels;
  if (skeletons.rank() == 4 && skeletons.dim(0) > 0) {
    all.push_back(skeletons);
    y.insert(y.end(), static_cast<std::size_t>(skeletons.dim(0)), class_count);
  }
  const Tensor x = stack_batch<float>(all);
  ClassifierTrainResult res;
  res.model.class_count = class_count;
  res.model.params = init_classifier_params<float>(class_count, tc.seed);
  AdamState<float> adam;
  std::mt19937_64 rng(tc.seed ^ 0xd1b54a32d192ed03ULL);
  const std::int64_t n = x.dim(0);
  const std::size_t img = x.size() / static_cast<std::size_t>(n);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::int64_t b = 0; b < n; b += tc.batch) {
      const std::int64_t m = std::min<std::int64_t>(tc.batch, n - b);
      Tensor xb({m, x.dim(1), x.dim(2), 3});
      std::vector<int> yb;
      for (std::int64_t i = 0; i < m; ++i) {
        std::copy_n(x.ptr() + order[b + i] * img, img, xb.ptr() + i * img);
        yb.push_back(y[order[b + i]]);
      }
      Tape<float> tape;
      Bound<float> p(tape, res.model.params, true);
      const Var<float> loss = softmax_cross_entropy(classifier_logits(p, tape.constant(xb)), yb);
      total += loss.value().item() * static_cast<double>(m);
      adam_step(res.model.params, tape.backward(loss), adam, {tc.lr});
    }
    res.epoch_loss.push_back(total / static_cast<double>(n));
    if (on_epoch) on_epoch(epoch, res.epoch_loss.back());
  }
  res.model.trained = true;
  if (holdout_creatures.rank() == 4 && holdout_creatures.dim(0) > 0) {
    const auto pred = classifier_predict(res.model, holdout_creatures);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == holdout_labels.at(i);
    res.holdout_accuracy = double(ok) / double(pred.size());
  }
  if (holdout_skeletons.rank() == 4 && holdout_skeletons.dim(0) > 0) {
    const auto pred = classifier_predict(res.model, holdout_skeletons);
    res.holdout_reject = double(std::count(pred.begin(), pred.end(), class_count)) / double(pred.size());
  }
  return res;
}

inline ParamSet<float> classifier_checkpoint(const ClassifierModel& m) {
  ParamSet<float> out = m.params;
  out.add("classifier.meta.class_count", Tensor::scalar(static_cast<float>(m.class_count)));
  out.add("classifier.meta.trained", Tensor::scalar(m.trained ? 1.0f : 0.0f));
  return out;
}

inline ClassifierModel classifier_from_checkpoint(const ParamSet<float>& ckpt) {
  ClassifierModel m;
  m.class_count = static_cast<int>(ckpt.at("classifier.meta.class_count").item());
  m.trained = ckpt.at("classifier.meta.trained").item() != 0.0f;
  for (const auto& [name, t] : init_classifier_params<float>(m.class_count, 0)) {
    const Tensor& v = ckpt.at(name);
    require_same_shape(v, t, "classifier checkpoint");
    m.params.add(name, v);
  }
  return m;
}

/// (all_at1, class_at1): any non-reject prediction / the exact true class.
inline std::pair<double, double> top1_scores(const std::vector<int>& predictions, const std::vector<int>& truth,
                                             int reject_id) {
  if (predictions.size() != truth.size()) {
    throw std::invalid_argument("top1_scores: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(truth.size()) + " labels");
  }
  if (predictions.empty()) return {0.0, 0.0};
  std::size_t any = 0, exact = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] != reject_id) {
      ++any;
      exact += predictions[i] == truth[i];
    }
  }
  const double n = static_cast<double>(predictions.size());
  return {double(any) / n, double(exact) / n};
}

using FeatureMatrix = Eigen::MatrixXd;  // one sample per row

inline FeatureMatrix to_features(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("features must be [n, d], got " + shape_string(t.shape()));
  FeatureMatrix m(t.dim(0), t.dim(1));
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (std::int64_t j = 0; j < t.dim(1); ++j) m(i, j) = t[i * t.dim(1) + j];
  return m;
}

/// Warning text when a covariance estimate is rank deficient (n <= d).
inline std::optional<std::string> fid_sample_warning(std::int64_t n, std::int64_t m, std::int64_t d) {
  if (n > d && m > d) return std::nullopt;
  return "FID with " + std::to_string(n) + " and " + std::to_string(m) + " samples in " + std::to_string(d) +
         " dimensions: covariance estimates are rank deficient";
}

/// Fréchet distance between Gaussian fits. The square-root trace term uses the eigenvalues of
/// the symmetric matrix S_A^1/2 S_B S_A^1/2, clamped at zero.
inline double fid(const FeatureMatrix& a, const FeatureMatrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("fid: feature dims " + std::to_string(a.cols()) + " and " + std::to_string(b.cols()) +
                                " differ");
  }
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("fid: need at least 2 samples per set");
  auto stats = [](const FeatureMatrix& x) {
    const Eigen::VectorXd mu = x.colwise().mean();
    const FeatureMatrix c = x.rowwise() - mu.transpose();
    return std::make_pair(mu, FeatureMatrix((c.transpose() * c) / double(x.rows() - 1)));
  };
  const auto [mu_a, s_a] = stats(a);
  const auto [mu_b, s_b] = stats(b);
  Eigen::SelfAdjointEigenSolver<FeatureMatrix> ea(s_a);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const FeatureMatrix sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  FeatureMatrix mid = sqrt_a * s_b * sqrt_a;
  mid = 0.5 * (mid + mid.transpose());
  Eigen::SelfAdjointEigenSolver<FeatureMatrix> em(mid, Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

/// Unbiased MMD^2 with k(x, y) = (x.y / d + 1)^3; within-set diagonals excluded.
inline double kid(const FeatureMatrix& a, const FeatureMatrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("kid: feature dims differ");
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("kid: need at least 2 samples per set");
  const double d = static_cast<double>(a.cols());
  auto kernel = [d](const FeatureMatrix& x, const FeatureMatrix& y) {
    return FeatureMatrix(((x * y.transpose()).array() / d + 1.0).cube());
  };
  const double n = double(a.rows()), m = double(b.rows());
  const FeatureMatrix kaa = kernel(a, a), kbb = kernel(b, b), kab = kernel(a, b);
  const double saa = kaa.sum() - kaa.trace(), sbb = kbb.sum() - kbb.trace();
  return saa / (n * (n - 1)) + sbb / (m * (m - 1)) - 2.0 * kab.sum() / (n * m);
}

/// Standard deviation of kid over `resamples` random half-size subsets of both sets.
inline double kid_resampled_std(const FeatureMatrix& a, const FeatureMatrix& b, int resamples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto subset = [&](const FeatureMatrix& x) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.rows()));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const Eigen::Index k = std::max<Eigen::Index>(2, x.rows() / 2);
    FeatureMatrix out(k, x.cols());
    for (Eigen::Index i = 0; i < k; ++i) out.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
    return out;
  };
  std::vector<double> v;
  for (int r = 0; r < resamples; ++r) v.push_back(kid(subset(a), subset(b)));
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0;
}

struct MetricsReport {
  double fid = 0;
  double kid = 0;
  double all_at1 = 0;
  double class_at1 = 0;
  double orient_agree = 0;
};

}  // namespace r2i
