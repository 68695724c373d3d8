// r2i: command-line front end for data generation, training, translation, sweeps and checks.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "r2i/verify.hpp"

using namespace r2i;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> fraction, cfg_scale;
  std::optional<std::string> prompt;
  std::optional<int> steps;
  std::optional<std::string> data, checkpoints, out;
};

RunConfig effective_config(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.fraction) c.translation.fraction = *o.fraction;
  if (o.cfg_scale) c.translation.guidance_scale = *o.cfg_scale;
  if (o.prompt) c.translation.prompt = parse_template(*o.prompt);
  if (o.steps) c.schedule.steps = *o.steps;
  if (o.data) c.data_root = *o.data;
  if (o.checkpoints) c.checkpoint_dir = *o.checkpoints;
  if (o.out) c.out_dir = *o.out;
  // Round-trip through TOML so flag values get the same validation as file values.
  c = parse_run_config(to_toml(c), "effective config");
  propagate_seed(c);
  return c;
}

void log_line(const std::string& s) { std::cout << s << std::endl; }

/// Creates out_dir/<name> and records the config and artifact hashes the run used.
fs::path run_dir(const RunConfig& c, const std::string& name, const nlohmann::json& prov) {
  const fs::path dir = fs::path(c.out_dir) / name;
  fs::create_directories(dir);
  std::ofstream(dir / "config.toml") << to_toml(c);
  std::ofstream(dir / "provenance.json") << prov.dump(2) << '\n';
  return dir;
}

int resolve_class(const std::string& s, const Vocabulary& v) {
  const auto names = v.classes();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == s) return static_cast<int>(i);
  std::size_t used = 0;
  int id = -1;
  try {
    id = std::stoi(s, &used);
  } catch (const std::exception&) {
  }
  if (used != s.size() || id < 0 || id >= v.class_count()) {
    std::string known;
    for (const auto& n : names) known += " " + n;
    throw std::invalid_argument("unknown class '" + s + "'; use an index 0-" + std::to_string(v.class_count() - 1) +
                                " or one of:" + known);
  }
  return id;
}

std::vector<std::string> sweep_values(const RunConfig& c, SweepAxis axis) {
  std::vector<std::string> out;
  if (axis == SweepAxis::fraction)
    for (double v : c.fraction_values) out.push_back(format_axis_value(v));
  if (axis == SweepAxis::cfg_scale)
    for (double v : c.cfg_values) out.push_back(format_axis_value(v));
  if (axis == SweepAxis::prompt_template) out = c.template_values;
  return out;
}

int cmd_sweep(const RunConfig& c, SweepAxis axis) {
  const Experiment e = load_experiment(c, log_line);
  const Models m = prepare_models(e, false, log_line);
  const TestSet test = make_test_set(e);
  const fs::path dir = run_dir(c, std::string("sweep-") + to_string(axis), provenance(e));
  const auto values = sweep_values(c, axis);
  std::ofstream csv(dir / "metrics.csv");
  csv << sweep_csv_header << '\n';
  run_sweep(axis, values, c.translation, test, m, reference_features(e, m), dir.parent_path(), [&](const SweepRow& r) {
    csv << csv_row(r.axis_value, r.metrics) << std::endl;
    log_line(std::string(to_string(axis)) + "=" + r.axis_value + "  " + csv_row(r.axis_value, r.metrics));
  });
  log_line("wrote " + (dir / "metrics.csv").string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent diffusion image-to-image translation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");
  Overrides o;
  app.add_option("--config", o.config, "TOML run config; flags override its values")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Run seed (every stage seed derives from it)");
  app.add_option("--fraction", o.fraction, "Share of forward steps, in (0, 1]");
  app.add_option("--cfg-scale", o.cfg_scale, "Classifier-free guidance scale");
  app.add_option("--template", o.prompt, "Prompt template: head_of_class, generic, class_only, class_head");
  app.add_option("--steps", o.steps, "Diffusion steps T");
  app.add_option("--data", o.data, "Dataset root");
  app.add_option("--checkpoints", o.checkpoints, "Checkpoint directory");
  app.add_option("--out", o.out, "Output directory");

  auto* gen = app.add_subcommand("gen-data", "Write the procedural skeleton/creature dataset and its manifest");
  auto* train = app.add_subcommand("train", "Train one model and write its checkpoint");
  std::string stage;
  train->add_option("stage", stage, "codec, denoiser or classifier")->required()->check(CLI::IsMember({"codec", "denoiser", "classifier"}));
  auto* translate_cmd = app.add_subcommand("translate", "Translate one image into a target class");
  std::string in_path, class_arg, out_file;
  translate_cmd->add_option("--in", in_path, "Source PNG")->required()->check(CLI::ExistingFile);
  translate_cmd->add_option("--class", class_arg, "Target class: name or zero-based index")->required();
  translate_cmd->add_option("--output", out_file, "Output PNG (default: <out>/translate/<stem>-<class>.png)");
  auto* sweep_f = app.add_subcommand("sweep-fraction", "Score the test set over the configured fractions");
  auto* sweep_c = app.add_subcommand("sweep-cfg", "Score the test set over the configured guidance scales");
  auto* sweep_t = app.add_subcommand("sweep-template", "Score the test set over the configured prompt templates");
  auto* eval_cmd = app.add_subcommand("eval", "Score one configuration (or a folder of outputs) as a single CSV row");
  std::string images_dir;
  eval_cmd->add_option("--images", images_dir, "Score <id>.png files here instead of translating")->check(CLI::ExistingDirectory);
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of every op and model");
  int trials = 20;
  grad_cmd->add_option("--trials", trials, "Random shapes per op")->check(CLI::PositiveNumber);
  auto* verify_cmd = app.add_subcommand("verify", "Run the acceptance criteria and model invariants");
  bool train_missing = false;
  verify_cmd->add_flag("--train-missing", train_missing, "Train models whose checkpoints are missing or stale");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  tune_allocator();
  try {
    const RunConfig c = effective_config(o);
    if (gen->parsed()) {
      const auto m = gen_toy_dataset(c.data_root, c.seed, {c.train_count, c.test_count});
      std::size_t test = 0;
      for (const auto& r : m.records) test += r.split == Split::test;
      log_line("gen-data: " + std::to_string(m.records.size()) + " images (" + std::to_string(test) + " test) under " +
               c.data_root + ", manifest sha256 " + sha256_file(fs::path(c.data_root) / "manifest.jsonl"));
      return 0;
    }
    if (train->parsed()) {
      const Experiment e = load_experiment(c, log_line);
      const Stage s = parse_stage(stage);
      train_stage(e, s, log_line);
      run_dir(c, std::string("train-") + stage, provenance(e));
      log_line("wrote " + checkpoint_path(c, s).string() + " sha256 " + sha256_file(checkpoint_path(c, s)));
      return 0;
    }
    if (translate_cmd->parsed()) {
      const Experiment e = load_experiment(c);
      const Models m = prepare_models(e, false);
      const int cls = resolve_class(class_arg, m.denoiser.vocab);
      const Tensor src = read_png(in_path);
      const Tensor out = translate(src, cls, c.translation, m);
      const fs::path dir = run_dir(c, "translate", provenance(e));
      const fs::path dest = out_file.empty()
                                ? dir / (fs::path(in_path).stem().string() + "-" + m.denoiser.vocab.classes()[cls] + ".png")
                                : fs::path(out_file);
      write_png(dest, out);
      log_line("translate: k=" + std::to_string(step_from_fraction(c.translation.fraction, m.schedule.steps())) + " of T=" +
               std::to_string(m.schedule.steps()) + ", class " + m.denoiser.vocab.classes()[cls] + ", template " +
               to_string(c.translation.prompt) + ", s=" + format_axis_value(c.translation.guidance_scale) + " -> " +
               dest.string());
      return 0;
    }
    if (sweep_f->parsed()) return cmd_sweep(c, SweepAxis::fraction);
    if (sweep_c->parsed()) return cmd_sweep(c, SweepAxis::cfg_scale);
    if (sweep_t->parsed()) return cmd_sweep(c, SweepAxis::prompt_template);
    if (eval_cmd->parsed()) {
      const Experiment e = load_experiment(c, log_line);
      const Models m = prepare_models(e, false, log_line);
      const TestSet test = make_test_set(e);
      Tensor out;
      if (images_dir.empty()) {
        out = translate_batch(test.images, test.class_ids, c.translation, m);
      } else {
        std::vector<Tensor> imgs;
        for (const auto& id : test.ids) imgs.push_back(unsqueeze0(read_png(fs::path(images_dir) / (id + ".png"))));
        out = stack_batch<float>(imgs);
      }
      const MetricsReport r = score_outputs(out, test, m.classifier, reference_features(e, m));
      const fs::path dir = run_dir(c, "eval", provenance(e));
      const std::string label = images_dir.empty() ? "config" : images_dir;
      std::ofstream(dir / "metrics.csv") << sweep_csv_header << '\n' << csv_row(label, r) << '\n';
      log_line(sweep_csv_header);
      log_line(csv_row(label, r));
      return 0;
    }
    if (grad_cmd->parsed()) {
      bool ok = true;
      run_grad_suite(trials, c.seed, [&](const GradSuiteRow& r) {
        ok &= r.max_rel < 1e-3;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-22s %8zu entries  max rel err %.3e  %s", r.name.c_str(), r.checked, r.max_rel,
                      r.max_rel < 1e-3 ? "ok" : "FAIL");
        log_line(buf);
      });
      return ok ? 0 : 1;
    }
    if (verify_cmd->parsed()) {
      const Experiment e = load_experiment(c, log_line);
      const Models m = prepare_models(e, train_missing, log_line);
      const TestSet test = make_test_set(e);
      const FeatureMatrix ref = reference_features(e, m);
      TranslationRuns runs(test, m, ref, c.translation);
      const fs::path dir = run_dir(c, "verify", provenance(e));
      std::ofstream report(dir / "report.txt");
      detail::Checker ck([&](const CheckLine& l) {
        log_line(format_check(l));
        report << format_check(l) << std::endl;
      });
      verify_model_free(ck);
      verify_trained(ck, e, m, runs);
      std::size_t failed = 0;
      for (const auto& l : ck.lines()) failed += !l.pass;
      log_line(std::to_string(ck.lines().size() - failed) + "/" + std::to_string(ck.lines().size()) + " checks passed");
      return failed ? 1 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "r2i: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
