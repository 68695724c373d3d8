#pragma once

// End-to-end verification: numbered acceptance criteria plus invariants of the trained models.
// Shared by the acceptance test binary and `r2i verify`.

#include <chrono>
#include <cstdio>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "r2i/grad_suite.hpp"
#include "r2i/workflow.hpp"

namespace r2i {

struct CheckLine {
  std::string id;  // "1".."10" for criteria, "M<n>" for model invariants
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

inline std::string format_check(const CheckLine& c) {
  std::ostringstream s;
  s << (c.pass ? "PASS" : "FAIL") << "  " << (c.id.size() < 2 ? " " : "") << c.id << "  " << c.name << ": " << c.detail
    << " [" << std::fixed << std::setprecision(1) << c.seconds << " s]";
  return s.str();
}

namespace detail {

inline std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Checker {
 public:
  explicit Checker(std::function<void(const CheckLine&)> sink) : sink_(std::move(sink)) {}

  template <class F>
  void run(const std::string& id, const std::string& name, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckLine line{id, name, false, "", 0};
    try {
      std::tie(line.pass, line.detail) = body();
    } catch (const std::exception& e) {
      line.pass = false;
      line.detail = std::string("error: ") + e.what();
    }
    line.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (sink_) sink_(line);
    lines_.push_back(line);
  }

  std::vector<CheckLine> lines() const { return lines_; }

 private:
  std::function<void(const CheckLine&)> sink_;
  std::vector<CheckLine> lines_;
};

inline FeatureMatrix normal_features(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng, double shift = 0) {
  std::normal_distribution<double> nd;
  FeatureMatrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = nd(rng) + shift;
  return x;
}

inline Tensor normal_latents(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  Tensor t(s);
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

inline Tensor first_n(const Tensor& x, std::int64_t n) { return slice_batch(x, 0, std::min(n, x.dim(0))); }

}  // namespace detail

/// Criteria that need no trained model: 1, 2, 3, 6, 7.
inline void verify_model_free(detail::Checker& ck) {
  using detail::fmt;
  ck.run("1", "gradient correctness", [] {
    double worst = 0;
    std::string name;
    std::size_t checked = 0;
    for (const auto& r : run_grad_suite(20, 0)) {
      checked += r.checked;
      if (r.max_rel >= worst) worst = r.max_rel, name = r.name;
    }
    return std::pair{worst < 1e-3, fmt("max rel err %.2e (%s) over %zu entries, %zu ops + codec/unet/classifier", worst,
                                       name.c_str(), checked, primitive_ops().size())};
  });

  ck.run("2", "forward-process marginals", [] {
    const NoiseSchedule s = make_default_schedule();
    const std::int64_t n = 10000;
    bool ok = true;
    std::string d;
    int i = 0;
    for (auto [z0v, k] : {std::pair{1.0, 10}, {-2.0, 50}, {0.5, 95}}) {
      std::mt19937_64 rng(100 + i++);
      std::normal_distribution<double> nd;
      BasicTensor<double> z0({n}, z0v), eps({n});
      for (auto& v : eps.data()) v = nd(rng);
      const auto zk = forward_diffuse(z0, k, eps, s);
      double m = 0, sq = 0;
      for (double v : zk.data()) m += v;
      m /= double(n);
      for (double v : zk.data()) sq += (v - m) * (v - m);
      const double sd = std::sqrt(sq / double(n - 1));
      const double want_m = std::sqrt(s.alpha_bar(k)) * z0v, want_sd = std::sqrt(1 - s.alpha_bar(k));
      const double se_m = want_sd / std::sqrt(double(n)), se_sd = want_sd / std::sqrt(2.0 * double(n - 1));
      const double zm = std::abs(m - want_m) / se_m, zs = std::abs(sd - want_sd) / se_sd;
      ok &= zm <= 3 && zs <= 3;
      d += fmt("%sk=%d mean %.1f SE, std %.1f SE", d.empty() ? "" : "; ", k, zm, zs);
    }
    return std::pair{ok, d};
  });

  ck.run("3", "fraction-to-step grids", [] {
    bool ok = true;
    for (auto [f, k] : std::vector<std::pair<double, int>>{
             {0.5, 50}, {0.6, 60}, {0.7, 70}, {0.8, 80}, {0.9, 90}, {0.95, 95}, {1.0, 100}, {0.25, 25}, {0.75, 75}})
      ok &= step_from_fraction(f, 100) == k;
    return std::pair{ok, std::string(ok ? "{0.5..0.95,1}->{50..95,100} and quarters->{25,50,75,100}" : "mismatch")};
  });

  ck.run("6", "metric oracles", [] {
    std::mt19937_64 rng(61);
    const FeatureMatrix a = detail::normal_features(10000, 8, rng);
    const FeatureMatrix b = detail::normal_features(10000, 8, rng, std::sqrt(4.0 / 8.0));
    const double shifted = fid(a, b), self = fid(a, a);
    const int reps = 30;
    std::vector<double> ks;
    for (int r = 0; r < reps; ++r)
      ks.push_back(kid(detail::normal_features(200, 8, rng), detail::normal_features(200, 8, rng)));
    double m = 0, v = 0;
    for (double x : ks) m += x;
    m /= reps;
    for (double x : ks) v += (x - m) * (x - m);
    const double se = std::sqrt(v / (reps - 1) / reps);
    const bool ok = std::abs(shifted - 4.0) <= 0.2 && std::abs(self) <= 1e-6 && std::abs(m) <= 3 * se;
    return std::pair{ok, fmt("FID shifted %.4f (4 +- 0.2), FID(A,A) %.1e, KID same-dist mean %.2e (SE %.2e)", shifted,
                             self, m, se)};
  });

  ck.run("7", "top-1 bookkeeping", [] {
    std::vector<int> truth(121), pred(121, 6);
    for (int i = 0; i < 121; ++i) truth[i] = i % 6;
    for (int i = 0; i < 112; ++i) pred[i] = truth[i];
    const auto [all, cls] = top1_scores(pred, truth, 6);
    const std::string printed = fmt("%.2f", 100 * cls);
    return std::pair{printed == "92.56", "112/121 -> Class@1 " + printed + ", All@1 " + fmt("%.2f", 100 * all)};
  });
}

struct SweepPoint {
  MetricsReport metrics;
  double pixel_distance = 0;
  double seconds = 0;
};

/// Translations of the test set memoised by (fraction, scale, template).
class TranslationRuns {
 public:
  TranslationRuns(const TestSet& test, const Models& m, const FeatureMatrix& ref, TranslationConfig base)
      : test_(test), m_(m), ref_(ref), base_(base) {}

  const SweepPoint& at(double fraction, double scale, PromptTemplate t) {
    const auto key = std::tuple{fraction, scale, static_cast<int>(t)};
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const auto t0 = std::chrono::steady_clock::now();
    TranslationConfig cfg = base_;
    cfg.fraction = fraction;
    cfg.guidance_scale = scale;
    cfg.prompt = t;
    const Tensor out = translate_batch(test_.images, test_.class_ids, cfg, m_);
    SweepPoint p{score_outputs(out, test_, m_.classifier, ref_), mean_abs_diff(out, test_.images), 0};
    p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return cache_.emplace(key, p).first->second;
  }

 private:
  const TestSet& test_;
  const Models& m_;
  const FeatureMatrix& ref_;
  TranslationConfig base_;
  std::map<std::tuple<double, double, int>, SweepPoint> cache_;
};

/// Criteria 4, 5, 8, 9, 10 and the trained-model invariants.
inline void verify_trained(detail::Checker& ck, const Experiment& e, const Models& m, TranslationRuns& runs) {
  using detail::fmt;
  const NoiseSchedule& sched = m.schedule;
  const Vocabulary& vocab = m.denoiser.vocab;
  const int T = sched.steps();
  const int classes = vocab.class_count();
  const Tensor z_test = encode(m.codec, detail::first_n(e.target_test.images, 50));
  std::vector<int> y_test = e.target_test.labels();
  y_test.resize(static_cast<std::size_t>(z_test.dim(0)));
  auto conds_for = [&](const std::vector<int>& ids, PromptTemplate t) {
    std::vector<TokenSeq> out;
    for (int c : ids) out.push_back(template_tokens(t, c, vocab));
    return out;
  };
  const auto matched = conds_for(y_test, PromptTemplate::head_of_class);

  ck.run("4", "deterministic cycle consistency", [&] {
    const int k = 50;
    auto round_trip = [&](int sub) {
      const Tensor zk = invert_chain(z_test, k, guided_eps(m.denoiser, matched, 1.0), sched, sub);
      SamplerConfig sc;
      sc.guidance_scale = 1.0;
      sc.substeps = sub;
      return reverse_chain(zk, k, guided_eps(m.denoiser, matched, 1.0), sc, sched);
    };
    const Tensor r1 = round_trip(1), r2 = round_trip(2);
    const std::int64_t n = z_test.dim(0);
    int better = 0;
    double e1 = 0, e2 = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double a = mean_abs_diff(slice_batch(r1, i, i + 1), slice_batch(z_test, i, i + 1));
      const double b = mean_abs_diff(slice_batch(r2, i, i + 1), slice_batch(z_test, i, i + 1));
      e1 += a / double(n);
      e2 += b / double(n);
      better += b < a;
    }
    const bool ok = e1 <= 1e-2 && better >= static_cast<int>(std::ceil(0.9 * double(n))) && n == 50;
    return std::pair{ok, fmt("k=50 mean |err| %.2e (<= 1e-2); 2x grid better in %d/%lld trials (mean %.2e)", e1, better,
                             static_cast<long long>(n), e2)};
  });

  ck.run("5", "classifier-free guidance contracts", [&] {
    const int k = 40;
    const Tensor zk = forward_diffuse(detail::first_n(z_test, 4), k, detail::normal_latents(detail::first_n(z_test, 4).shape(), 5), sched);
    const std::vector<int> a{0, 1, 2, 3}, b{5, 4, 3, 2};
    SamplerConfig sc;
    sc.guidance_scale = 0.0;
    const bool zero = bitwise_equal(reverse_chain(zk, k, guided_eps(m.denoiser, conds_for(a, PromptTemplate::class_only), 0.0), sc, sched),
                                    reverse_chain(zk, k, guided_eps(m.denoiser, conds_for(b, PromptTemplate::head_of_class), 0.0), sc, sched));
    sc.guidance_scale = 1.0;
    const auto conds = conds_for(a, PromptTemplate::head_of_class);
    const EpsFn cond_only = [&](const Tensor& z, double t) {
      return predict_noise_batch(m.denoiser, z, std::vector<double>(static_cast<std::size_t>(z.dim(0)), t), conds);
    };
    const bool one = bitwise_equal(reverse_chain(zk, k, guided_eps(m.denoiser, conds, 1.0), sc, sched),
                                   reverse_chain(zk, k, cond_only, sc, sched));
    return std::pair{zero && one, fmt("s=0 condition-independent: %s; s=1 equals conditional branch: %s",
                                      zero ? "bitwise" : "NO", one ? "bitwise" : "NO")};
  });

  const double s_cfg = e.config.translation.guidance_scale;
  const auto hoc = PromptTemplate::head_of_class;
  ck.run("8", "fraction sweep trend", [&] {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<double> grid{0.5, 0.7, 0.8, 0.95};
    std::vector<MetricsReport> r;
    for (double f : grid) r.push_back(runs.at(f, s_cfg, hoc).metrics);
    const MetricsReport full = runs.at(1.0, s_cfg, hoc).metrics;
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool nondecreasing = true;
    for (std::size_t i = 1; i < r.size(); ++i) nondecreasing &= r[i].all_at1 >= r[i - 1].all_at1;
    const bool ok = nondecreasing && r[3].all_at1 >= 0.9 && r[3].class_at1 > r[0].class_at1 &&
                    r[0].orient_agree >= full.orient_agree && sec < 15 * 60;
    std::string d = "All@1";
    for (const auto& x : r) d += fmt(" %.3f", x.all_at1);
    d += fmt("; Class@1 %.3f@0.5 vs %.3f@0.95; orient %.3f@0.5 vs %.3f@1.0; %.0f s", r[0].class_at1, r[3].class_at1,
             r[0].orient_agree, full.orient_agree, sec);
    return std::pair{ok, d};
  });

  const double f_cfg = e.config.translation.fraction;
  ck.run("9", "guidance-scale trend", [&] {
    const double lo = runs.at(f_cfg, 1.0, hoc).metrics.class_at1, hi = runs.at(f_cfg, 7.5, hoc).metrics.class_at1;
    return std::pair{hi >= lo, fmt("Class@1 %.3f at s=7.5 vs %.3f at s=1", hi, lo)};
  });

  ck.run("10", "template ablation direction", [&] {
    const double g = runs.at(f_cfg, s_cfg, PromptTemplate::generic).metrics.class_at1;
    const double h = runs.at(f_cfg, s_cfg, hoc).metrics.class_at1;
    return std::pair{g < h, fmt("Class@1 generic %.3f vs head_of_class %.3f", g, h)};
  });

  // Invariants of the trained models.
  ck.run("M1", "codec round trip", [&] {
    const Tensor x = detail::both(e.target_test.images, e.source_test.images);
    const double mae = mean_abs_diff(decode(m.codec, encode(m.codec, x)), x);
    return std::pair{mae < 0.05, fmt("held-out MAE %.4f (< 0.05) on %lld images", mae, static_cast<long long>(x.dim(0)))};
  });

  ck.run("M2", "evaluation classifier", [&] {
    const auto pc = classifier_predict(m.classifier, e.target_test.images);
    const auto truth = e.target_test.labels();
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) ok += pc[i] == truth[i];
    const auto ps = classifier_predict(m.classifier, e.source_test.images);
    const double acc = double(ok) / double(pc.size());
    const double rej = double(std::count(ps.begin(), ps.end(), m.classifier.reject_id())) / double(ps.size());
    return std::pair{acc >= 0.97 && rej >= 0.95, fmt("accuracy %.3f (>= 0.97), reject %.3f (>= 0.95)", acc, rej)};
  });

  ck.run("M3", "class embeddings distinct", [&] {
    double worst = -1;
    for (int a = 0; a < classes; ++a)
      for (int b = a + 1; b < classes; ++b) {
        const Tensor ea = embed_condition(m.denoiser, {vocab.class_token(a)}).embedding;
        const Tensor eb = embed_condition(m.denoiser, {vocab.class_token(b)}).embedding;
        const std::int64_t d = m.denoiser.config.context_dim;
        double dot = 0, na = 0, nb = 0;
        for (std::int64_t j = 0; j < d; ++j) dot += double(ea[j]) * eb[j], na += double(ea[j]) * ea[j], nb += double(eb[j]) * eb[j];
        worst = std::max(worst, dot / std::sqrt(na * nb));
      }
    return std::pair{worst < 0.99, fmt("max pairwise cosine %.3f (< 0.99)", worst)};
  });

  ck.run("M4", "conditioning carries information", [&] {
    std::mt19937_64 rng(44);
    std::uniform_int_distribution<int> step(1, T);
    std::vector<double> times;
    for (std::int64_t i = 0; i < z_test.dim(0); ++i) times.push_back(step(rng));
    const Tensor eps = detail::normal_latents(z_test.shape(), 45);
    Tensor zt(z_test.shape());
    const std::size_t per = z_test.size() / static_cast<std::size_t>(z_test.dim(0));
    for (std::int64_t i = 0; i < z_test.dim(0); ++i) {
      const Tensor zi = forward_diffuse(slice_batch(z_test, i, i + 1), static_cast<int>(times[i]), slice_batch(eps, i, i + 1), sched);
      std::copy_n(zi.ptr(), per, zt.ptr() + i * static_cast<std::int64_t>(per));
    }
    std::vector<int> wrong;
    for (int c : y_test) wrong.push_back((c + 1) % classes);
    auto err = [&](const std::vector<TokenSeq>& conds) {
      const Tensor p = predict_noise_batch(m.denoiser, zt, times, conds);
      double s = 0;
      for (std::size_t i = 0; i < p.size(); ++i) s += (double(p[i]) - eps[i]) * (double(p[i]) - eps[i]);
      return s / double(p.size());
    };
    const double good = err(matched), bad = err(conds_for(wrong, hoc));
    return std::pair{good < bad, fmt("eps-MSE true %.4f < mismatched %.4f", good, bad)};
  });

  const int n_samples = 60;
  const Tensor zT = detail::normal_latents({n_samples, z_test.dim(1), z_test.dim(2), z_test.dim(3)}, 46);
  ck.run("M5", "unconditional samples land in the target domain", [&] {
    SamplerConfig sc;
    sc.guidance_scale = 0.0;
    const auto p = classifier_predict(m.classifier, decode(m.codec, reverse(zT, T, null_tokens(), sc, sched, m.denoiser)));
    const double rate = 1.0 - double(std::count(p.begin(), p.end(), m.classifier.reject_id())) / double(p.size());
    return std::pair{rate >= 0.8, fmt("%.3f of %d classified as some target class (>= 0.8)", rate, n_samples)};
  });

  ck.run("M6", "conditional samples follow the class", [&] {
    std::vector<int> want;
    for (int i = 0; i < n_samples; ++i) want.push_back(i % classes);
    SamplerConfig sc;
    sc.guidance_scale = 7.5;
    const auto p = classifier_predict(
        m.classifier, decode(m.codec, reverse_chain(zT, T, guided_eps(m.denoiser, conds_for(want, hoc), 7.5), sc, sched)));
    std::size_t ok = 0;
    for (int i = 0; i < n_samples; ++i) ok += p[i] == want[i];
    const double rate = double(ok) / n_samples;
    return std::pair{rate >= 0.7, fmt("%.3f exact class at s=7.5 (>= 0.7)", rate)};
  });

  ck.run("M7", "mismatched round trip drifts further", [&] {
    const int k = 50;
    const Tensor zk = invert_chain(z_test, k, guided_eps(m.denoiser, matched, 1.0), sched);
    SamplerConfig s1;
    s1.guidance_scale = 1.0;
    const double same = mean_abs_diff(reverse_chain(zk, k, guided_eps(m.denoiser, matched, 1.0), s1, sched), z_test);
    std::vector<int> other;
    for (int c : y_test) other.push_back((c + 3) % classes);
    SamplerConfig s75;
    s75.guidance_scale = 7.5;
    const double diff =
        mean_abs_diff(reverse_chain(zk, k, guided_eps(m.denoiser, conds_for(other, hoc), 7.5), s75, sched), z_test);
    return std::pair{diff > same, fmt("mean |err| mismatched %.4f > matched %.4f", diff, same)};
  });

  ck.run("M8", "single translation keeps class and pose", [&] {
    const int cls = std::min(2, classes - 1);
    std::size_t idx = 0;
    while (idx < e.source_test.records.size() && e.source_test.records[idx].class_id != cls) ++idx;
    if (idx == e.source_test.records.size()) return std::pair{false, std::string("no test image of that class")};
    const Tensor src = slice_batch(e.source_test.images, static_cast<std::int64_t>(idx), static_cast<std::int64_t>(idx) + 1);
    const Shape one{src.dim(1), src.dim(2), 3};
    TranslationConfig cfg = e.config.translation;
    cfg.fraction = 0.95;
    cfg.guidance_scale = 7.5;
    const Tensor out = translate(src.reshaped(one), cls, cfg, m, idx);
    const int pred = classifier_predict(m.classifier, unsqueeze0(out))[0];
    Orientation o = Orientation::unknown;
    try {
      o = orientation_of(out);
    } catch (const std::exception&) {
    }
    const Orientation want = e.source_test.records[idx].orientation;
    return std::pair{pred == cls && o == want,
                     fmt("%s: predicted %s, facing %s (source faces %s)", e.source_test.records[idx].path.c_str(),
                         pred == m.classifier.reject_id() ? "reject" : vocab.classes()[pred].c_str(), to_string(o),
                         to_string(want))};
  });

  ck.run("M9", "partial encoding stays closer to the source", [&] {
    const double lo = runs.at(0.5, s_cfg, hoc).pixel_distance, hi = runs.at(1.0, s_cfg, hoc).pixel_distance;
    return std::pair{lo < hi, fmt("pixel distance %.4f at f=0.5 < %.4f at f=1.0", lo, hi)};
  });

  ck.run("M10", "translation is deterministic", [&] {
    TranslationConfig cfg = e.config.translation;
    const Tensor x = detail::first_n(e.source_test.images, 3);
    std::vector<int> ids = e.source_test.labels();
    ids.resize(static_cast<std::size_t>(x.dim(0)));
    const bool same = bitwise_equal(translate_batch(x, ids, cfg, m), translate_batch(x, ids, cfg, m));
    return std::pair{same, std::string(same ? "two runs bitwise identical" : "runs differ")};
  });
}

}  // namespace r2i
