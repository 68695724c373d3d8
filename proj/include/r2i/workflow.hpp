#pragma once

// Stages of a configured run: dataset, the three trained models, and the translation test set.
// Checkpoints carry a JSON sidecar with a fingerprint of everything that shaped them, so a
// stale checkpoint is never silently reused.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"
#include "r2i/config.hpp"
#include "r2i/hash.hpp"
#include "r2i/pipeline.hpp"

namespace r2i {

using Log = std::function<void(const std::string&)>;

/// Training frees and reallocates the same large activations every step. glibc would hand each
/// of them back to the kernel via mmap/munmap; keeping them on the heap removes most system time.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

struct DomainSplit {
  std::vector<ManifestRecord> records;
  Tensor images;  // [N,H,W,3]; empty when there are no records

  std::int64_t size() const { return static_cast<std::int64_t>(records.size()); }
  std::vector<int> labels() const { return class_ids(records); }
};

struct Experiment {
  RunConfig config;
  DatasetManifest manifest;
  std::string manifest_digest;
  DomainSplit source_train, source_test, target_train, target_test;
};

/// Reads `manifest.jsonl` when present, otherwise scans the directory tree.
inline DatasetManifest open_dataset(const fs::path& root, double test_fraction) {
  if (fs::exists(root / "manifest.jsonl")) return read_manifest_jsonl(root / "manifest.jsonl");
  return load_manifest(root, test_fraction);
}

inline std::string manifest_digest(const DatasetManifest& m) {
  Sha256 h;
  for (const auto& r : m.records) h.update(to_json(r).dump()).update("\n");
  return h.hex();
}

inline Experiment load_experiment(const RunConfig& cfg, const Log& log = {}) {
  Experiment e;
  e.config = cfg;
  e.manifest = open_dataset(cfg.data_root, cfg.test_fraction);
  for (const auto& w : e.manifest.warnings)
    if (log) log("warning: " + w);
  const auto classes = cfg.vocab().classes();
  if (e.manifest.class_names != classes) {
    std::string got;
    for (const auto& n : e.manifest.class_names) got += " " + n;
    throw std::invalid_argument("dataset classes [" + got + " ] differ from the configured vocabulary");
  }
  e.manifest_digest = manifest_digest(e.manifest);
  auto take = [&](const std::string& domain, Split s) {
    DomainSplit d;
    d.records = e.manifest.select(domain, s);
    d.images = load_images(e.manifest.root, d.records);
    return d;
  };
  e.source_train = take(cfg.source_domain, Split::train);
  e.source_test = take(cfg.source_domain, Split::test);
  e.target_train = take(cfg.target_domain, Split::train);
  e.target_test = take(cfg.target_domain, Split::test);
  if (e.target_train.size() == 0) throw std::invalid_argument("no " + cfg.target_domain + " training images");
  if (e.source_test.size() == 0) throw std::invalid_argument("no " + cfg.source_domain + " test images");
  if (log) {
    std::ostringstream s;
    s << "data: " << cfg.source_domain << " " << e.source_train.size() << "/" << e.source_test.size() << ", "
      << cfg.target_domain << " " << e.target_train.size() << "/" << e.target_test.size() << " (train/test)";
    log(s.str());
  }
  return e;
}

enum class Stage { codec, classifier, denoiser };

inline const char* to_string(Stage s) {
  return s == Stage::codec ? "codec" : s == Stage::classifier ? "classifier" : "denoiser";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "codec") return Stage::codec;
  if (s == "classifier") return Stage::classifier;
  if (s == "denoiser") return Stage::denoiser;
  throw std::invalid_argument("unknown stage '" + s + "' (expected codec, denoiser or classifier)");
}

inline fs::path checkpoint_path(const RunConfig& c, Stage s) {
  return fs::path(c.checkpoint_dir) / (std::string(to_string(s)) + ".r2i");
}

inline fs::path sidecar_path(const RunConfig& c, Stage s) {
  return fs::path(c.checkpoint_dir) / (std::string(to_string(s)) + ".json");
}

/// Hash of the config sections, data and upstream checkpoints that determine a stage's weights.
inline std::string stage_fingerprint(const Experiment& e, Stage s) {
  const auto doc = toml::parse(to_toml(e.config));
  auto section = [&](const char* name) {
    std::ostringstream o;
    o << *doc[name].as_table();
    return o.str();
  };
  Sha256 h;
  h.update(to_string(s)).update("|seed=" + std::to_string(e.config.seed)).update("|data=" + e.manifest_digest);
  h.update("|" + e.config.source_domain + ">" + e.config.target_domain);
  switch (s) {
    case Stage::codec: h.update(section("codec")); break;
    case Stage::classifier: h.update(section("classifier")); break;
    case Stage::denoiser:
      h.update(section("denoiser")).update(section("schedule"));
      h.update("|codec=" + sha256_file(checkpoint_path(e.config, Stage::codec)));
      break;
  }
  return h.hex();
}

/// True when the stage's checkpoint exists, is intact and was trained from the current inputs.
inline bool checkpoint_current(const Experiment& e, Stage s) {
  const fs::path ck = checkpoint_path(e.config, s), side = sidecar_path(e.config, s);
  if (!fs::exists(ck) || !fs::exists(side)) return false;
  if (s == Stage::denoiser && !fs::exists(checkpoint_path(e.config, Stage::codec))) return false;
  std::ifstream in(side);
  nlohmann::json j;
  try {
    in >> j;
    return j.at("fingerprint") == stage_fingerprint(e, s) && j.at("sha256") == sha256_file(ck);
  } catch (const std::exception&) {
    return false;
  }
}

namespace detail {

inline void write_stage(const Experiment& e, Stage s, const ParamSet<float>& ckpt, nlohmann::json metrics) {
  fs::create_directories(e.config.checkpoint_dir);
  const fs::path ck = checkpoint_path(e.config, s);
  save_checkpoint(ck.string(), ckpt);
  nlohmann::json j{{"stage", to_string(s)},
                   {"fingerprint", stage_fingerprint(e, s)},
                   {"sha256", sha256_file(ck)},
                   {"manifest_sha256", e.manifest_digest},
                   {"metrics", std::move(metrics)}};
  std::ofstream out(sidecar_path(e.config, s));
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + sidecar_path(e.config, s).string());
}

inline Tensor both(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4) return b;
  if (b.rank() != 4) return a;
  return stack_batch<float>(std::vector<Tensor>{a, b});
}

inline std::function<void(int, double)> epoch_logger(const Log& log, Stage s, int epochs) {
  if (!log) return {};
  const auto t0 = std::chrono::steady_clock::now();
  return [=](int epoch, double loss) {
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream o;
    o << to_string(s) << " epoch " << epoch + 1 << "/" << epochs << " loss " << loss << " (" << std::fixed
      << std::setprecision(0) << sec << " s)";
    log(o.str());
  };
}

}  // namespace detail

/// Trains one stage from scratch and writes its checkpoint and sidecar.
inline void train_stage(const Experiment& e, Stage s, const Log& log = {}) {
  const RunConfig& c = e.config;
  switch (s) {
    case Stage::codec: {
      const auto r = train_codec(detail::both(e.target_train.images, e.source_train.images),
                                 detail::both(e.target_test.images, e.source_test.images), c.codec, c.codec_train,
                                 detail::epoch_logger(log, s, c.codec_train.epochs));
      if (log) log("codec held-out MAE " + std::to_string(r.holdout_mae));
      detail::write_stage(e, s, codec_checkpoint(r.model),
                          {{"holdout_mae", r.holdout_mae}, {"holdout_mse", r.holdout_mse},
                           {"latent_scale", r.model.latent_scale}});
      break;
    }
    case Stage::classifier: {
      const auto r = train_classifier(e.target_train.images, e.target_train.labels(), e.source_train.images,
                                      c.vocab().class_count(), c.classifier_train, e.target_test.images,
                                      e.target_test.labels(), e.source_test.images,
                                      detail::epoch_logger(log, s, c.classifier_train.epochs));
      if (log) log("classifier held-out accuracy " + std::to_string(r.holdout_accuracy) + ", reject " +
                   std::to_string(r.holdout_reject));
      detail::write_stage(e, s, classifier_checkpoint(r.model),
                          {{"holdout_accuracy", r.holdout_accuracy}, {"holdout_reject", r.holdout_reject}});
      break;
    }
    case Stage::denoiser: {
      if (!checkpoint_current(e, Stage::codec)) throw std::runtime_error("denoiser training needs a current codec checkpoint");
      const CodecModel codec = codec_from_checkpoint(load_checkpoint(checkpoint_path(c, Stage::codec).string()));
      const auto r = train_denoiser(e.target_train.images, e.target_train.labels(), e.source_train.images,
                                    e.source_train.labels(), codec,
                                    c.vocab(), build_schedule(c.schedule), c.unet, c.denoiser_train,
                                    detail::epoch_logger(log, s, c.denoiser_train.epochs));
      detail::write_stage(e, s, denoiser_checkpoint(r.model),
                          {{"final_loss", r.epoch_loss.empty() ? 0.0 : r.epoch_loss.back()},
                           {"trained_steps", r.model.trained_steps}});
      break;
    }
  }
}

/// Loads all models. Missing or stale stages are trained when `train_missing`, otherwise rejected.
inline Models prepare_models(const Experiment& e, bool train_missing, const Log& log = {}) {
  for (Stage s : {Stage::codec, Stage::classifier, Stage::denoiser}) {
    if (checkpoint_current(e, s)) continue;
    if (!train_missing) {
      throw std::runtime_error(std::string("no current ") + to_string(s) + " checkpoint in " + e.config.checkpoint_dir +
                               "; run `r2i train " + to_string(s) + "` with this config");
    }
    if (log) log(std::string("training ") + to_string(s));
    train_stage(e, s, log);
  }
  const RunConfig& c = e.config;
  Models m{codec_from_checkpoint(load_checkpoint(checkpoint_path(c, Stage::codec).string())),
           denoiser_from_checkpoint(load_checkpoint(checkpoint_path(c, Stage::denoiser).string()), c.vocab()),
           classifier_from_checkpoint(load_checkpoint(checkpoint_path(c, Stage::classifier).string())),
           build_schedule(c.schedule)};
  return m;
}

/// Source test split as translation inputs; outputs are named after the source file stems.
inline TestSet make_test_set(const Experiment& e) {
  TestSet t;
  t.images = e.source_test.images;
  t.class_ids = e.source_test.labels();
  for (const auto& r : e.source_test.records) {
    t.orientations.push_back(r.orientation);
    t.ids.push_back(fs::path(r.path).stem().string());
  }
  return t;
}

/// Feature reference for FID/KID: the held-out target images.
inline FeatureMatrix reference_features(const Experiment& e, const Models& m) {
  if (e.target_test.size() == 0) throw std::invalid_argument("no " + e.config.target_domain + " test images for FID/KID");
  return to_features(classifier_features(m.classifier, e.target_test.images));
}

/// SHA-256 of every artifact a run depends on.
inline nlohmann::json provenance(const Experiment& e) {
  nlohmann::json j{{"manifest_sha256", e.manifest_digest}};
  if (fs::exists(fs::path(e.config.data_root) / "manifest.jsonl"))
    j["manifest_file_sha256"] = sha256_file(fs::path(e.config.data_root) / "manifest.jsonl");
  for (Stage s : {Stage::codec, Stage::classifier, Stage::denoiser}) {
    const fs::path ck = checkpoint_path(e.config, s);
    if (fs::exists(ck)) j["checkpoints"][to_string(s)] = {{"path", ck.string()}, {"sha256", sha256_file(ck)}};
  }
  return j;
}

}  // namespace r2i
