#pragma once

// Run configuration: every input of a command except raw data, as TOML.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "r2i/codec.hpp"
#include "r2i/data.hpp"
#include "r2i/denoiser.hpp"
#include "r2i/eval.hpp"
#include "r2i/pipeline.hpp"
#include "r2i/schedule.hpp"
#include "toml.hpp"

namespace r2i {

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.0;  // 0: solve so that alpha_bar[T] = terminal_alpha_bar (linear only)
  double terminal_alpha_bar = 4e-3;
};

inline NoiseSchedule build_schedule(const ScheduleConfig& c) {
  if (c.beta_end > 0.0) return make_schedule(c.kind, c.steps, c.beta_start, c.beta_end);
  if (c.kind != ScheduleKind::linear) throw std::invalid_argument("schedule: beta_end must be set for cosine");
  if (c.beta_start != 1e-4) throw std::invalid_argument("schedule: a solved beta_end assumes beta_start = 1e-4");
  return make_default_schedule(c.steps, c.terminal_alpha_bar);
}

struct RunConfig {
  std::string data_root = "data";
  std::string checkpoint_dir = "checkpoints";
  std::string out_dir = "out";
  std::uint64_t seed = 0;

  int train_count = 1080;
  int test_count = 121;
  double test_fraction = default_test_fraction;
  std::string source_domain = "skeleton";
  std::string target_domain = "creature";

  ScheduleConfig schedule;
  CodecConfig codec;
  CodecTrainConfig codec_train;
  UNetConfig unet;
  DenoiserTrainConfig denoiser_train;
  ClassifierTrainConfig classifier_train;
  TranslationConfig translation;

  std::vector<std::string> vocabulary = Vocabulary(toy_class_names()).tokens();
  std::vector<double> fraction_values = {0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0};
  std::vector<double> cfg_values = {5, 6, 7, 7.5, 8, 9, 10};
  std::vector<std::string> template_values = {"head_of_class", "generic", "class_only", "class_head"};

  /// Classes are the vocabulary entries after the five reserved tokens.
  Vocabulary vocab() const {
    const auto reserved = Vocabulary(std::vector<std::string>{}).tokens();
    if (vocabulary.size() <= reserved.size() || !std::equal(reserved.begin(), reserved.end(), vocabulary.begin())) {
      throw std::invalid_argument("vocabulary must start with <null>, <pad>, photo, head, skull and name at least one class");
    }
    return Vocabulary(std::vector<std::string>(vocabulary.begin() + reserved.size(), vocabulary.end()));
  }
};

namespace detail {

template <class T>
toml::array to_array(const std::vector<T>& v) {
  toml::array a;
  for (const auto& x : v) a.push_back(x);
  return a;
}

class TomlReader {
 public:
  TomlReader(const toml::table& t, std::string where) : t_(t), where_(std::move(where)) {}

  template <class T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    const toml::node* n = t_.get(key);
    if (!n) return;
    if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = n->value<std::string>()) return void(out = *v);
    } else if constexpr (std::is_same_v<T, bool>) {
      if (auto v = n->value<bool>()) return void(out = *v);
    } else if constexpr (std::is_integral_v<T>) {
      if (auto v = n->value<std::int64_t>()) {
        if (*v < 0 && std::is_unsigned_v<T>) fail(key, "must be non-negative");
        return void(out = static_cast<T>(*v));
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (n->is_number()) return void(out = static_cast<T>(*n->value<double>()));
    }
    fail(key, "has the wrong type");
  }

  template <class T>
  void get_list(const char* key, std::vector<T>& out) {
    seen_.push_back(key);
    const toml::node* n = t_.get(key);
    if (!n) return;
    const toml::array* a = n->as_array();
    if (!a) fail(key, "must be an array");
    out.clear();
    for (const auto& e : *a) {
      if constexpr (std::is_same_v<T, std::string>) {
        if (!e.is_string()) fail(key, "must hold strings");
        out.push_back(*e.value<std::string>());
      } else {
        if (!e.is_number()) fail(key, "must hold numbers");
        out.push_back(static_cast<T>(*e.value<double>()));
      }
    }
  }

  void finish() const {
    for (const auto& [k, v] : t_) {
      if (v.is_table()) continue;
      if (std::find(seen_.begin(), seen_.end(), std::string(k.str())) == seen_.end()) {
        throw std::invalid_argument("config: unknown key '" + where_ + std::string(k.str()) + "'");
      }
    }
  }

 private:
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw std::invalid_argument("config: '" + where_ + key + "' " + what);
  }
  const toml::table& t_;
  std::string where_;
  std::vector<std::string> seen_;
};

inline const toml::table& subtable(const toml::table& root, const char* name) {
  static const toml::table empty;
  const toml::node* n = root.get(name);
  if (!n) return empty;
  if (!n->is_table()) throw std::invalid_argument(std::string("config: '") + name + "' must be a table");
  return *n->as_table();
}

}  // namespace detail

inline std::string to_toml(const RunConfig& c) {
  toml::table root{
      {"data_root", c.data_root},
      {"checkpoint_dir", c.checkpoint_dir},
      {"out_dir", c.out_dir},
      {"seed", static_cast<std::int64_t>(c.seed)},
      {"data", toml::table{{"train_count", c.train_count}, {"test_count", c.test_count}, {"test_fraction", c.test_fraction},
                              {"source_domain", c.source_domain},
                              {"target_domain", c.target_domain}}},
      {"schedule", toml::table{{"kind", to_string(c.schedule.kind)},
                               {"steps", c.schedule.steps},
                               {"beta_start", c.schedule.beta_start},
                               {"beta_end", c.schedule.beta_end},
                               {"terminal_alpha_bar", c.schedule.terminal_alpha_bar}}},
      {"codec", toml::table{{"image_size", c.codec.image_size},
                            {"factor", c.codec.factor},
                            {"latent_channels", c.codec.latent_channels},
                            {"width", c.codec.width},
                            {"epochs", c.codec_train.epochs},
                            {"lr", c.codec_train.lr},
                            {"batch", c.codec_train.batch}}},
      {"denoiser", toml::table{{"base_width", c.unet.base_width},
                               {"heads", c.unet.heads},
                               {"context_dim", c.unet.context_dim},
                               {"max_tokens", c.unet.max_tokens},
                               {"time_features", c.unet.time_features},
                               {"emb_dim", c.unet.emb_dim},
                               {"epochs", c.denoiser_train.epochs},
                               {"lr", c.denoiser_train.lr},
                               {"batch", c.denoiser_train.batch},
                               {"cond_dropout", c.denoiser_train.cond_dropout},
                               {"source_share", c.denoiser_train.source_share},
                               {"source_class_caption", c.denoiser_train.source_class_caption},
                               {"vocabulary", detail::to_array(c.vocabulary)}}},
      {"classifier", toml::table{{"epochs", c.classifier_train.epochs},
                                 {"lr", c.classifier_train.lr},
                                 {"batch", c.classifier_train.batch}}},
      {"translation", toml::table{{"fraction", c.translation.fraction},
                                  {"cfg_scale", c.translation.guidance_scale},
                                  {"eta", c.translation.eta},
                                  {"template", to_string(c.translation.prompt)}}},
      {"sweep", toml::table{{"fraction_values", detail::to_array(c.fraction_values)},
                            {"cfg_values", detail::to_array(c.cfg_values)},
                            {"template_values", detail::to_array(c.template_values)}}},
  };
  std::ostringstream s;
  s << root << '\n';
  return s.str();
}

/// Parses TOML over the defaults; unknown keys are rejected.
inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw std::invalid_argument(source + ": " + std::string(e.description()));
  }
  RunConfig c;
  detail::TomlReader top(root, "");
  top.get("data_root", c.data_root);
  top.get("checkpoint_dir", c.checkpoint_dir);
  top.get("out_dir", c.out_dir);
  top.get("seed", c.seed);
  top.finish();
  for (const auto& [k, v] : root)
    if (v.is_table()) {
      static const std::vector<std::string> known{"data", "schedule", "codec", "denoiser", "classifier", "translation", "sweep"};
      if (std::find(known.begin(), known.end(), std::string(k.str())) == known.end()) {
        throw std::invalid_argument("config: unknown table '" + std::string(k.str()) + "'");
      }
    }

  detail::TomlReader data(detail::subtable(root, "data"), "data.");
  data.get("train_count", c.train_count);
  data.get("test_count", c.test_count);
  data.get("test_fraction", c.test_fraction);
  data.get("source_domain", c.source_domain);
  data.get("target_domain", c.target_domain);
  data.finish();

  detail::TomlReader sch(detail::subtable(root, "schedule"), "schedule.");
  std::string kind = to_string(c.schedule.kind);
  sch.get("kind", kind);
  c.schedule.kind = parse_schedule_kind(kind);
  sch.get("steps", c.schedule.steps);
  sch.get("beta_start", c.schedule.beta_start);
  sch.get("beta_end", c.schedule.beta_end);
  sch.get("terminal_alpha_bar", c.schedule.terminal_alpha_bar);
  sch.finish();

  detail::TomlReader co(detail::subtable(root, "codec"), "codec.");
  co.get("image_size", c.codec.image_size);
  co.get("factor", c.codec.factor);
  co.get("latent_channels", c.codec.latent_channels);
  co.get("width", c.codec.width);
  co.get("epochs", c.codec_train.epochs);
  co.get("lr", c.codec_train.lr);
  co.get("batch", c.codec_train.batch);
  co.finish();

  detail::TomlReader de(detail::subtable(root, "denoiser"), "denoiser.");
  de.get("base_width", c.unet.base_width);
  de.get("heads", c.unet.heads);
  de.get("context_dim", c.unet.context_dim);
  de.get("max_tokens", c.unet.max_tokens);
  de.get("time_features", c.unet.time_features);
  de.get("emb_dim", c.unet.emb_dim);
  de.get("epochs", c.denoiser_train.epochs);
  de.get("lr", c.denoiser_train.lr);
  de.get("batch", c.denoiser_train.batch);
  de.get("cond_dropout", c.denoiser_train.cond_dropout);
  de.get("source_share", c.denoiser_train.source_share);
  de.get("source_class_caption", c.denoiser_train.source_class_caption);
  de.get_list("vocabulary", c.vocabulary);
  de.finish();

  detail::TomlReader cl(detail::subtable(root, "classifier"), "classifier.");
  cl.get("epochs", c.classifier_train.epochs);
  cl.get("lr", c.classifier_train.lr);
  cl.get("batch", c.classifier_train.batch);
  cl.finish();

  detail::TomlReader tr(detail::subtable(root, "translation"), "translation.");
  tr.get("fraction", c.translation.fraction);
  tr.get("cfg_scale", c.translation.guidance_scale);
  tr.get("eta", c.translation.eta);
  std::string tmpl = to_string(c.translation.prompt);
  tr.get("template", tmpl);
  c.translation.prompt = parse_template(tmpl);
  tr.finish();

  detail::TomlReader sw(detail::subtable(root, "sweep"), "sweep.");
  sw.get_list("fraction_values", c.fraction_values);
  sw.get_list("cfg_values", c.cfg_values);
  sw.get_list("template_values", c.template_values);
  sw.finish();

  c.vocab();
  c.codec.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open config " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), p.string());
}

/// Seeds of every stage derive from the run seed so one number pins a run.
inline void propagate_seed(RunConfig& c) {
  c.codec_train.seed = c.seed;
  c.denoiser_train.seed = c.seed + 1;
  c.classifier_train.seed = c.seed + 2;
  c.translation.seed = c.seed;
  c.translation.steps = c.schedule.steps;
  c.unet.latent_channels = c.codec.latent_channels;
  c.unet.vocab_size = static_cast<std::int64_t>(c.vocabulary.size());
}

}  // namespace r2i
