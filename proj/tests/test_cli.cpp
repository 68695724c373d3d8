#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "r2i/workflow.hpp"

using namespace r2i;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// A run small enough to train every stage in seconds.
const char* tiny_toml = R"(
seed = 3
[data]
train_count = 36
test_count = 12
[codec]
epochs = 1
width = 8
[denoiser]
epochs = 1
base_width = 8
heads = 2
context_dim = 8
time_features = 8
emb_dim = 16
[classifier]
epochs = 1
)";

RunConfig tiny_config(const fs::path& dir) {
  RunConfig c = parse_run_config(tiny_toml);
  c.data_root = (dir / "data").string();
  c.checkpoint_dir = (dir / "ck").string();
  c.out_dir = (dir / "out").string();
  propagate_seed(c);
  return c;
}

struct CliRun {
  int code;
  std::string out;
};

CliRun run_cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "r2i_cli_test.log";
  const int status = std::system((std::string(R2I_BIN) + " " + args + " > " + log.string() + " 2>&1").c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a)) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b)) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& f : fa)
    if (fs::is_regular_file(a / f) && slurp(a / f) != slurp(b / f)) return false;
  return true;
}

}  // namespace

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const fs::path f = fs::temp_directory_path() / "r2i_sha_test.bin";
  std::string big(200000, 'x');
  std::ofstream(f, std::ios::binary) << big;
  EXPECT_EQ(sha256_file(f), sha256_hex(big));
  fs::remove(f);
  EXPECT_THROW(sha256_file(f), std::runtime_error);
}

TEST(RunConfig, TomlRoundTripIsStable) {
  RunConfig c;
  c.seed = 11;
  c.translation.fraction = 0.8;
  c.translation.prompt = PromptTemplate::class_head;
  c.denoiser_train.source_share = 0.3;
  c.denoiser_train.source_class_caption = 0.25;
  c.cfg_values = {1, 2.5};
  c.template_values = {"generic"};
  const std::string text = to_toml(c);
  const RunConfig back = parse_run_config(text);
  EXPECT_EQ(to_toml(back), text);
  EXPECT_EQ(back.seed, 11u);
  EXPECT_EQ(back.translation.prompt, PromptTemplate::class_head);
  EXPECT_EQ(back.cfg_values, (std::vector<double>{1, 2.5}));
  EXPECT_DOUBLE_EQ(back.denoiser_train.source_share, 0.3);
  EXPECT_DOUBLE_EQ(back.denoiser_train.source_class_caption, 0.25);
}

TEST(RunConfig, RejectsUnknownKeysTablesAndWrongTypes) {
  EXPECT_THROW(parse_run_config("sed = 1"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("[codec]\nepoch = 3"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("[extras]\nx = 1"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("[codec]\nepochs = \"ten\""), std::invalid_argument);
  EXPECT_THROW(parse_run_config("seed = -1"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("[translation]\ntemplate = \"ode\""), std::invalid_argument);
  EXPECT_THROW(parse_run_config("[codec]\nfactor = 3"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("[denoiser]\nvocabulary = [\"a\"]"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("seed = "), std::invalid_argument);
  EXPECT_NO_THROW(parse_run_config(""));
}

TEST(RunConfig, SeedPropagatesToEveryStage) {
  RunConfig c;
  c.seed = 5;
  c.schedule.steps = 50;
  propagate_seed(c);
  EXPECT_EQ(c.codec_train.seed, 5u);
  EXPECT_EQ(c.denoiser_train.seed, 6u);
  EXPECT_EQ(c.classifier_train.seed, 7u);
  EXPECT_EQ(c.translation.seed, 5u);
  EXPECT_EQ(c.translation.steps, 50);
  EXPECT_EQ(c.unet.vocab_size, 11);
}

TEST(Workflow, CheckpointsAreReusedOnlyWhileCurrent) {
  const fs::path dir = fs::temp_directory_path() / "r2i_workflow_test";
  fs::remove_all(dir);
  RunConfig c = tiny_config(dir);
  gen_toy_dataset(c.data_root, c.seed, {c.train_count, c.test_count});
  const Experiment e = load_experiment(c);
  EXPECT_EQ(e.target_train.size() + e.target_test.size(), 48);
  EXPECT_GT(e.source_test.size(), 0);
  EXPECT_THROW(prepare_models(e, false), std::runtime_error);

  const Models m = prepare_models(e, true);
  EXPECT_TRUE(m.codec.trained);
  EXPECT_TRUE(m.denoiser.trained());
  for (Stage s : {Stage::codec, Stage::classifier, Stage::denoiser}) EXPECT_TRUE(checkpoint_current(e, s));
  const std::string den_hash = sha256_file(checkpoint_path(c, Stage::denoiser));
  prepare_models(e, true);  // nothing stale: nothing retrained
  EXPECT_EQ(sha256_file(checkpoint_path(c, Stage::denoiser)), den_hash);

  // A new codec invalidates the denoiser trained on its latents; the classifier stays current.
  Experiment e2 = e;
  e2.config.codec_train.epochs = 2;
  EXPECT_FALSE(checkpoint_current(e2, Stage::codec));
  train_stage(e2, Stage::codec);
  EXPECT_FALSE(checkpoint_current(e2, Stage::denoiser));
  EXPECT_TRUE(checkpoint_current(e2, Stage::classifier));

  // A tampered checkpoint is stale too.
  std::ofstream(checkpoint_path(c, Stage::classifier), std::ios::app) << "x";
  EXPECT_FALSE(checkpoint_current(e2, Stage::classifier));

  const TestSet t = make_test_set(e);
  EXPECT_EQ(t.images.dim(0), e.source_test.size());
  EXPECT_EQ(t.ids.size(), t.class_ids.size());
  EXPECT_EQ(t.ids[0], fs::path(e.source_test.records[0].path).stem().string());
  EXPECT_TRUE(provenance(e).contains("manifest_file_sha256"));

  RunConfig wrong = c;
  wrong.vocabulary.pop_back();
  EXPECT_THROW(load_experiment(wrong), std::invalid_argument);
  fs::remove_all(dir);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("paint").code, 2);
  EXPECT_EQ(run_cli("gen-data --bogus").code, 2);
  EXPECT_EQ(run_cli("train optimizer").code, 2);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST(Cli, GenDataIsByteReproducible) {
  const fs::path dir = fs::temp_directory_path() / "r2i_cli_gen";
  fs::remove_all(dir);
  ASSERT_EQ(run_cli("--seed 7 --data " + (dir / "a").string() + " gen-data").code, 0);
  ASSERT_EQ(run_cli("--seed 7 --data " + (dir / "b").string() + " gen-data").code, 0);
  EXPECT_TRUE(same_tree(dir / "a", dir / "b"));
  ASSERT_EQ(run_cli("--seed 8 --data " + (dir / "c").string() + " gen-data").code, 0);
  EXPECT_FALSE(same_tree(dir / "a", dir / "c"));
  fs::remove_all(dir);
}

TEST(Cli, TrainTranslateAndFailures) {
  const fs::path dir = fs::temp_directory_path() / "r2i_cli_run";
  fs::remove_all(dir);
  fs::create_directories(dir);
  // Root keys must precede the first table.
  std::ofstream(dir / "tiny.toml") << "data_root = \"" << (dir / "data").string() << "\"\ncheckpoint_dir = \""
                                   << (dir / "ck").string() << "\"\nout_dir = \"" << (dir / "out").string() << "\"\n"
                                   << tiny_toml;
  const std::string cfg = "--config " + (dir / "tiny.toml").string() + " ";
  ASSERT_EQ(run_cli(cfg + "gen-data").code, 0);

  const DatasetManifest man = read_manifest_jsonl(dir / "data" / "manifest.jsonl");
  const std::string src = (dir / "data" / man.select("skeleton", Split::test).at(0).path).string();
  const CliRun missing = run_cli(cfg + "translate --in " + src + " --class 3");
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.out.find("r2i train codec"), std::string::npos) << missing.out;

  for (const char* s : {"codec", "classifier", "denoiser"}) ASSERT_EQ(run_cli(cfg + "train " + s).code, 0) << s;
  const CliRun tr = run_cli(cfg + "--fraction 0.95 --cfg-scale 7.5 translate --in " + src + " --class 3");
  ASSERT_EQ(tr.code, 0) << tr.out;
  EXPECT_NE(tr.out.find("k=95 of T=100"), std::string::npos) << tr.out;
  EXPECT_NE(tr.out.find("class 4-spike"), std::string::npos) << tr.out;
  EXPECT_EQ(png_size(dir / "out" / "translate" / (fs::path(src).stem().string() + "-4-spike.png")),
            (std::pair<std::int64_t, std::int64_t>{32, 32}));
  const std::string echoed = slurp(dir / "out" / "translate" / "config.toml");
  EXPECT_EQ(parse_run_config(echoed).translation.fraction, 0.95);
  EXPECT_NE(slurp(dir / "out" / "translate" / "provenance.json").find("denoiser"), std::string::npos);

  EXPECT_EQ(run_cli(cfg + "translate --in " + src + " --class 9").code, 1);
  EXPECT_EQ(run_cli(cfg + "--fraction 1.5 translate --in " + src + " --class 0").code, 1);
  EXPECT_EQ(run_cli(cfg + "--steps 50 translate --in " + src + " --class 0").code, 1);  // checkpoint is for T=100

  const CliRun ev = run_cli(cfg + "--fraction 0.5 eval");
  ASSERT_EQ(ev.code, 0) << ev.out;
  std::ifstream csv(dir / "out" / "eval" / "metrics.csv");
  std::string header, row, extra;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, sweep_csv_header);
  EXPECT_EQ(row.rfind("config,", 0), 0u);
  EXPECT_FALSE(std::getline(csv, extra));
  fs::remove_all(dir);
}
