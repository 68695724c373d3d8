#pragma once

// Encode -> partial forward diffusion -> guided reverse -> decode, and the sweeps over it.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "r2i/codec.hpp"
#include "r2i/data.hpp"
#include "r2i/eval.hpp"
#include "r2i/sampler.hpp"

namespace r2i {

struct TranslationConfig {
  double fraction = 0.95;
  double guidance_scale = 7.5;
  int steps = 100;  // T
  double eta = 0.0;
  std::uint64_t seed = 0;
  PromptTemplate prompt = PromptTemplate::head_of_class;
};

struct Models {
  CodecModel codec;
  DenoiserModel denoiser;
  ClassifierModel classifier;
  NoiseSchedule schedule;
};

inline void require_trained(const Models& m) {
  if (!m.codec.trained) throw std::invalid_argument("codec is untrained");
  if (!m.denoiser.trained()) throw std::invalid_argument("denoiser is untrained");
}

/// Forward-process noise for image `index`, independent of batch composition.
inline Tensor forward_noise(std::uint64_t seed, std::uint64_t index, const Shape& latent_shape) {
  std::mt19937_64 rng(detail::stream_seed(seed ^ 0xf0f0f0f0a5a5a5a5ULL, index));
  std::normal_distribution<float> nd;
  Tensor e(latent_shape);
  for (auto& v : e.data()) v = nd(rng);
  return e;
}

inline SamplerConfig sampler_config(const TranslationConfig& cfg) {
  SamplerConfig s;
  s.eta = cfg.eta;
  s.guidance_scale = cfg.guidance_scale;
  s.seed = cfg.seed;
  return s;
}

/// Translates a batch [N,H,W,3]; item i targets class_ids[i] and uses noise stream first_index + i.
inline Tensor translate_batch(const Tensor& images, const std::vector<int>& class_ids, const TranslationConfig& cfg,
                              const Models& m, std::uint64_t first_index = 0) {
  require_trained(m);
  if (cfg.steps != m.schedule.steps()) {
    throw std::invalid_argument("translation steps " + std::to_string(cfg.steps) + " differ from schedule T=" +
                                std::to_string(m.schedule.steps()));
  }
  if (images.rank() != 4 || static_cast<std::int64_t>(class_ids.size()) != images.dim(0)) {
    throw ShapeError("translate: " + std::to_string(class_ids.size()) + " classes for images " + shape_string(images.shape()));
  }
  const int k = step_from_fraction(cfg.fraction, cfg.steps);
  const Tensor z = encode(m.codec, images);
  const Shape one{z.dim(1), z.dim(2), z.dim(3)};
  std::vector<Tensor> noise;
  std::vector<TokenSeq> conds;
  for (std::int64_t i = 0; i < z.dim(0); ++i) {
    noise.push_back(unsqueeze0(forward_noise(cfg.seed, first_index + i, one)));
    conds.push_back(template_tokens(cfg.prompt, class_ids[static_cast<std::size_t>(i)], m.denoiser.vocab));
  }
  const Tensor zk = forward_diffuse(z, k, stack_batch<float>(noise), m.schedule);
  const Tensor z0 = reverse_chain(zk, k, guided_eps(m.denoiser, conds, cfg.guidance_scale), sampler_config(cfg),
                                  m.schedule, first_index);
  return decode(m.codec, z0);
}

/// Single image [H,W,3] -> translated image [H,W,3].
inline Tensor translate(const Tensor& image, int class_id, const TranslationConfig& cfg, const Models& m,
                        std::uint64_t index = 0) {
  if (image.rank() != 3) throw ShapeError("translate: expected [H,W,3], got " + shape_string(image.shape()));
  const Tensor out = translate_batch(unsqueeze0(image), {class_id}, cfg, m, index);
  return out.reshaped(image.shape());
}

enum class SweepAxis { fraction, cfg_scale, prompt_template };

inline const char* to_string(SweepAxis a) {
  return a == SweepAxis::fraction ? "fraction" : a == SweepAxis::cfg_scale ? "cfg" : "template";
}

struct TestSet {
  Tensor images;                          // [N,H,W,3] source domain
  std::vector<int> class_ids;
  std::vector<Orientation> orientations;  // of the sources
  std::vector<std::string> ids;           // output file stems
};

struct SweepRow {
  std::string axis_value;
  MetricsReport metrics;
  double pixel_distance = 0;  // mean |output - source|
};

struct SweepResult {
  SweepAxis axis = SweepAxis::fraction;
  std::vector<SweepRow> rows;
};

/// Scores translated images against their sources and a reference feature set.
inline MetricsReport score_outputs(const Tensor& outputs, const TestSet& test, const ClassifierModel& clf,
                                   const FeatureMatrix& reference) {
  MetricsReport r;
  const FeatureMatrix f = to_features(classifier_features(clf, outputs));
  r.fid = fid(f, reference);
  r.kid = kid(f, reference);
  std::tie(r.all_at1, r.class_at1) = top1_scores(classifier_predict(clf, outputs), test.class_ids, clf.reject_id());
  std::size_t agree = 0;
  for (std::int64_t i = 0; i < outputs.dim(0); ++i) {
    const Tensor img = slice_batch(outputs, i, i + 1).reshaped({outputs.dim(1), outputs.dim(2), 3});
    try {
      agree += orientation_of(img) == test.orientations[static_cast<std::size_t>(i)];
    } catch (const std::exception&) {
      // no subject or no decision: counts as disagreement
    }
  }
  r.orient_agree = double(agree) / double(outputs.dim(0));
  return r;
}

inline std::string format_axis_value(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

/// Translates the whole test set once per value and scores each run. When `out_dir` is set,
/// images go to out_dir/<sweep>/<value>/<id>.png.
inline SweepResult run_sweep(SweepAxis axis, const std::vector<std::string>& values, const TranslationConfig& base,
                             const TestSet& test, const Models& m, const FeatureMatrix& reference,
                             const std::filesystem::path& out_dir = {},
                             const std::function<void(const SweepRow&)>& on_row = {}) {
  if (values.empty()) throw std::invalid_argument("run_sweep: no values");
  if (test.images.rank() != 4 || test.images.dim(0) == 0) throw std::invalid_argument("run_sweep: empty test set");
  if (!m.classifier.trained) throw std::invalid_argument("classifier is untrained");
  SweepResult res;
  res.axis = axis;
  for (const auto& v : values) {
    TranslationConfig cfg = base;
    if (axis == SweepAxis::fraction) cfg.fraction = std::stod(v);
    if (axis == SweepAxis::cfg_scale) cfg.guidance_scale = std::stod(v);
    if (axis == SweepAxis::prompt_template) cfg.prompt = parse_template(v);
    const Tensor out = translate_batch(test.images, test.class_ids, cfg, m);
    SweepRow row;
    row.axis_value = v;
    row.metrics = score_outputs(out, test, m.classifier, reference);
    row.pixel_distance = mean_abs_diff(out, test.images);
    if (!out_dir.empty()) {
      for (std::int64_t i = 0; i < out.dim(0); ++i) {
        const std::string id = i < static_cast<std::int64_t>(test.ids.size()) ? test.ids[i] : std::to_string(i);
        write_png(out_dir / (std::string("sweep-") + to_string(axis)) / v / (id + ".png"),
                  slice_batch(out, i, i + 1).reshaped({out.dim(1), out.dim(2), 3}));
      }
    }
    if (on_row) on_row(row);
    res.rows.push_back(std::move(row));
  }
  return res;
}

inline const char* sweep_csv_header = "axis_value,fid,kid,all_at1,class_at1,orient_agree";

inline std::string csv_row(const std::string& axis_value, const MetricsReport& r) {
  std::ostringstream s;
  s << axis_value << std::setprecision(8) << ',' << r.fid << ',' << r.kid << ',' << r.all_at1 << ',' << r.class_at1
    << ',' << r.orient_agree;
  return s.str();
}

inline void write_sweep_csv(const std::filesystem::path& file, const SweepResult& res) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  out << sweep_csv_header << '\n';
  for (const auto& row : res.rows) out << csv_row(row.axis_value, row.metrics) << '\n';
  if (!out) throw std::runtime_error("cannot write " + file.string());
}

}  // namespace r2i
