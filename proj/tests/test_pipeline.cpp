#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "r2i/pipeline.hpp"

using namespace r2i;

namespace {

// Untrained weights flagged as trained: enough to exercise plumbing and determinism.
Models small_models(std::uint64_t seed = 1) {
  Models m;
  m.codec.config = {16, 4, 4, 8};
  m.codec.params = init_codec_params<float>(m.codec.config, seed);
  m.codec.trained = true;
  m.denoiser.vocab = Vocabulary(toy_class_names());
  m.denoiser.config.base_width = 8;
  m.denoiser.config.heads = 2;
  m.denoiser.config.context_dim = 8;
  m.denoiser.config.time_features = 8;
  m.denoiser.config.emb_dim = 16;
  m.denoiser.config.vocab_size = m.denoiser.vocab.size();
  m.denoiser.params = init_unet_params<float>(m.denoiser.config, seed + 1);
  m.denoiser.trained_steps = 1;
  m.classifier.params = init_classifier_params<float>(6, seed + 2);
  m.classifier.trained = true;
  m.schedule = make_default_schedule(20);
  return m;
}

Tensor random_images(std::int64_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  Tensor x({n, 16, 16, 3});
  for (auto& v : x.data()) v = u(rng);
  return x;
}

TranslationConfig small_config() {
  TranslationConfig c;
  c.steps = 20;
  c.fraction = 0.5;
  return c;
}

}  // namespace

// Noise streams depend only on (seed, index), so batch composition cannot change the draw. The
// GEMM kernel picks its blocking from the matrix sizes, so agreement is to rounding, not bitwise.
TEST(Translate, BatchMatchesItemByItem) {
  const Models m = small_models();
  const Tensor x = random_images(3, 2);
  const std::vector<int> cls{0, 4, 2};
  const Tensor batch = translate_batch(x, cls, small_config(), m);
  for (std::int64_t i = 0; i < 3; ++i) {
    const Tensor one = translate(slice_batch(x, i, i + 1).reshaped({16, 16, 3}), cls[i], small_config(), m, i);
    const Tensor row = slice_batch(batch, i, i + 1).reshaped({16, 16, 3});
    float worst = 0;
    for (std::size_t j = 0; j < one.data().size(); ++j) worst = std::max(worst, std::abs(one.data()[j] - row.data()[j]));
    EXPECT_LT(worst, 1e-4f) << i;
    // A different stream index gives a visibly different draw.
    const Tensor other = translate(slice_batch(x, i, i + 1).reshaped({16, 16, 3}), cls[i], small_config(), m, i + 7);
    float diff = 0;
    for (std::size_t j = 0; j < one.data().size(); ++j) diff = std::max(diff, std::abs(one.data()[j] - other.data()[j]));
    EXPECT_GT(diff, 1e-3f) << i;
  }
}

TEST(Translate, SeedPinsTheOutput) {
  const Models m = small_models();
  const Tensor x = random_images(2, 3);
  TranslationConfig c = small_config();
  const Tensor a = translate_batch(x, {1, 5}, c, m);
  EXPECT_TRUE(bitwise_equal(a, translate_batch(x, {1, 5}, c, m)));
  c.seed = 9;
  EXPECT_FALSE(bitwise_equal(a, translate_batch(x, {1, 5}, c, m)));
  EXPECT_EQ(a.shape(), x.shape());
  for (float v : a.data()) ASSERT_TRUE(v >= -1.0f && v <= 1.0f);
}

TEST(Translate, RejectsMismatchedStepsUntrainedModelsAndBadClasses) {
  Models m = small_models();
  const Tensor x = random_images(1, 4);
  TranslationConfig c = small_config();
  c.steps = 100;
  EXPECT_THROW(translate_batch(x, {0}, c, m), std::invalid_argument);
  EXPECT_THROW(translate_batch(x, {0, 1}, small_config(), m), ShapeError);
  EXPECT_THROW(translate_batch(x, {6}, small_config(), m), std::out_of_range);
  m.codec.trained = false;
  EXPECT_THROW(translate_batch(x, {0}, small_config(), m), std::invalid_argument);
}

TEST(ForwardNoise, DependsOnlyOnSeedAndIndex) {
  const Tensor a = forward_noise(3, 7, {4, 4, 4});
  EXPECT_TRUE(bitwise_equal(a, forward_noise(3, 7, {4, 4, 4})));
  EXPECT_FALSE(bitwise_equal(a, forward_noise(3, 8, {4, 4, 4})));
  EXPECT_FALSE(bitwise_equal(a, forward_noise(4, 7, {4, 4, 4})));
}

TEST(ScoreOutputs, OrientationAgreementUsesTheDetector) {
  Models m = small_models();
  std::mt19937_64 rng(5);
  TestSet t;
  std::vector<Tensor> imgs, flipped;
  for (int i = 0; i < 4; ++i) {
    const GlyphSpec g{i, i % 2 ? Orientation::left : Orientation::right, sample_jitter(Domain::creature, rng), Domain::creature};
    const Tensor img = render_glyph(g);
    imgs.push_back(unsqueeze0(img));
    flipped.push_back(unsqueeze0(flip_horizontal(img)));
    t.class_ids.push_back(i);
    t.orientations.push_back(g.orientation);
  }
  t.images = stack_batch<float>(imgs);
  const FeatureMatrix ref = to_features(classifier_features(m.classifier, t.images));
  EXPECT_EQ(score_outputs(t.images, t, m.classifier, ref).orient_agree, 1.0);
  EXPECT_EQ(score_outputs(stack_batch<float>(flipped), t, m.classifier, ref).orient_agree, 0.0);
  const Tensor blank({4, 32, 32, 3}, -1.0f);  // no subject: counted as disagreement
  EXPECT_EQ(score_outputs(blank, t, m.classifier, ref).orient_agree, 0.0);
}

TEST(Sweep, WritesImagesRowsAndCsv) {
  const Models m = small_models();
  TestSet t;
  t.images = random_images(3, 6);
  t.class_ids = {0, 1, 2};
  t.orientations = {Orientation::left, Orientation::right, Orientation::left};
  t.ids = {"a", "b", "c"};
  const FeatureMatrix ref = to_features(classifier_features(m.classifier, random_images(5, 7)));
  const fs::path dir = fs::temp_directory_path() / "r2i_sweep_test";
  fs::remove_all(dir);
  int rows = 0;
  const SweepResult r = run_sweep(SweepAxis::fraction, {"0.25", "1"}, small_config(), t, m, ref, dir,
                                  [&](const SweepRow&) { ++rows; });
  EXPECT_EQ(rows, 2);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].axis_value, "0.25");
  EXPECT_TRUE(fs::exists(dir / "sweep-fraction" / "0.25" / "b.png"));
  EXPECT_TRUE(fs::exists(dir / "sweep-fraction" / "1" / "c.png"));
  EXPECT_EQ(png_size(dir / "sweep-fraction" / "1" / "a.png"), (std::pair<std::int64_t, std::int64_t>{16, 16}));

  write_sweep_csv(dir / "m.csv", r);
  std::ifstream in(dir / "m.csv");
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "axis_value,fid,kid,all_at1,class_at1,orient_agree");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 5), "0.25,");
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
  fs::remove_all(dir);

  EXPECT_THROW(run_sweep(SweepAxis::cfg_scale, {}, small_config(), t, m, ref), std::invalid_argument);
  EXPECT_THROW(run_sweep(SweepAxis::prompt_template, {"sonnet"}, small_config(), t, m, ref), std::invalid_argument);
}

TEST(Sweep, AxisNames) {
  EXPECT_STREQ(to_string(SweepAxis::fraction), "fraction");
  EXPECT_STREQ(to_string(SweepAxis::cfg_scale), "cfg");
  EXPECT_STREQ(to_string(SweepAxis::prompt_template), "template");
  EXPECT_EQ(csv_row("x", {1.5, 0.25, 1, 0.5, 0.75}), "x,1.5,0.25,1,0.5,0.75");
}
