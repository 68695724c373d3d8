#include <gtest/gtest.h>

#include <random>

#include "r2i/codec.hpp"
#include "r2i/grad_check.hpp"

using namespace r2i;

namespace {

CodecModel fresh_codec(CodecConfig cfg, std::uint64_t seed = 1) {
  CodecModel m;
  m.config = cfg;
  m.params = init_codec_params<float>(cfg, seed);
  return m;
}

// Smooth blobs on black, standing in for rendered images.
Tensor blob_images(std::int64_t n, std::int64_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor x({n, size, size, 3}, -1.0f);
  for (std::int64_t i = 0; i < n; ++i) {
    const double cx = size * (0.3 + 0.4 * u(rng)), cy = size * (0.3 + 0.4 * u(rng)), r = size * (0.15 + 0.1 * u(rng));
    const double col[3] = {u(rng), u(rng), u(rng)};
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t xx = 0; xx < size; ++xx)
        if ((xx - cx) * (xx - cx) + (y - cy) * (y - cy) < r * r)
          for (int c = 0; c < 3; ++c) x[((i * size + y) * size + xx) * 3 + c] = static_cast<float>(2 * col[c] - 1);
  }
  return x;
}

}  // namespace

TEST(Codec, ToyPresetShape) {
  const CodecModel m = fresh_codec({32, 4, 4, 16});
  const Tensor z = encode(m, Tensor({32, 32, 3}));
  EXPECT_EQ(z.shape(), (Shape{8, 8, 4}));
  EXPECT_EQ(decode(m, z).shape(), (Shape{32, 32, 3}));
}

TEST(Codec, FactorEightShape) {
  const CodecModel m = fresh_codec({256, 8, 4, 8});
  const Tensor z = encode(m, Tensor({256, 256, 3}));
  EXPECT_EQ(z.shape(), (Shape{32, 32, 4}));
}

TEST(Codec, ZeroInputsStayFinite) {
  const CodecModel m = fresh_codec({32, 4, 4, 16});
  EXPECT_TRUE(encode(m, Tensor({32, 32, 3})).all_finite());
  const Tensor x = decode(m, Tensor({8, 8, 4}));
  EXPECT_TRUE(x.all_finite());
  for (float v : x.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Codec, ShapeRoundTripBatch) {
  const CodecModel m = fresh_codec({32, 4, 4, 16});
  const Tensor x = blob_images(3, 32, 2);
  EXPECT_EQ(decode(m, encode(m, x)).shape(), x.shape());
}

TEST(Codec, RejectsBadInputs) {
  const CodecModel m = fresh_codec({32, 4, 4, 16});
  EXPECT_THROW(encode(m, Tensor({30, 32, 3})), ShapeError);
  EXPECT_THROW(encode(m, Tensor({32, 32, 4})), ShapeError);
  EXPECT_THROW(encode(m, Tensor({32, 32, 3}, 2.0f)), std::invalid_argument);
  EXPECT_THROW(decode(m, Tensor({8, 8, 3})), ShapeError);
  EXPECT_THROW((CodecConfig{32, 3, 4, 16}.validate()), std::invalid_argument);
}

TEST(Codec, TrainingRejectsEmptySet) {
  EXPECT_THROW(train_codec(Tensor({0, 32, 32, 3}), Tensor(), {32, 4, 4, 8}, {}), std::invalid_argument);
}

TEST(Codec, TrainingIsDeterministicAndLossDecreases) {
  const CodecConfig cfg{16, 4, 4, 8};
  const Tensor train = blob_images(48, 16, 3), hold = blob_images(8, 16, 4);
  CodecTrainConfig tc;
  tc.epochs = 6;
  tc.batch = 16;
  tc.seed = 11;
  const auto a = train_codec(train, hold, cfg, tc);
  const auto b = train_codec(train, hold, cfg, tc);
  EXPECT_TRUE(a.model.params == b.model.params);
  EXPECT_EQ(a.model.latent_scale, b.model.latent_scale);
  ASSERT_EQ(a.epoch_loss.size(), 6u);
  for (std::size_t i = 1; i < a.epoch_loss.size(); ++i) EXPECT_LE(a.epoch_loss[i], a.epoch_loss[i - 1] * 1.05);
  EXPECT_LT(a.epoch_loss.back(), a.epoch_loss.front());
  EXPECT_TRUE(a.model.trained);
  EXPECT_GT(a.holdout_mae, 0.0);
}

TEST(Codec, LatentScaleGivesUnitRms) {
  const CodecConfig cfg{16, 4, 4, 8};
  const Tensor train = blob_images(32, 16, 5);
  CodecTrainConfig tc;
  tc.epochs = 1;
  const auto r = train_codec(train, Tensor(), cfg, tc);
  const Tensor z = encode(r.model, train);
  double sq = 0;
  for (float v : z.data()) sq += double(v) * v;
  EXPECT_NEAR(std::sqrt(sq / z.size()), 1.0, 1e-3);
}

TEST(Codec, CheckpointRoundTrip) {
  CodecModel m = fresh_codec({32, 4, 4, 16}, 3);
  m.latent_scale = 0.7f;
  m.trained = true;
  std::stringstream ss;
  write_checkpoint(ss, codec_checkpoint(m));
  const CodecModel back = codec_from_checkpoint(read_checkpoint(ss));
  EXPECT_TRUE(back.params == m.params);
  EXPECT_EQ(back.latent_scale, 0.7f);
  EXPECT_TRUE(back.trained);
  const Tensor x = blob_images(1, 32, 9);
  EXPECT_TRUE(bitwise_equal(encode(m, x), encode(back, x)));
}

// A change confined to one 8x8 pixel patch moves the latent mostly inside the
// corresponding 2x2 latent cells plus a one-cell border.
TEST(Codec, LatentLocality) {
  const CodecModel m = fresh_codec({32, 4, 4, 16}, 4);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-1, 1);
  int trials = 0, ok = 0;
  for (int py = 0; py < 32; py += 8)
    for (int px = 0; px < 32; px += 8) {
      Tensor a = blob_images(1, 32, 20 + trials).reshaped({32, 32, 3}), b = a;
      for (int y = py; y < py + 8; ++y)
        for (int x = px; x < px + 8; ++x)
          for (int c = 0; c < 3; ++c) b[(y * 32 + x) * 3 + c] = u(rng);
      const Tensor za = encode(m, a), zb = encode(m, b);
      double inside = 0, total = 0;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          for (int c = 0; c < 4; ++c) {
            const double d = za[(y * 8 + x) * 4 + c] - zb[(y * 8 + x) * 4 + c];
            total += d * d;
            if (y >= py / 4 - 1 && y <= py / 4 + 2 && x >= px / 4 - 1 && x <= px / 4 + 2) inside += d * d;
          }
      ++trials;
      if (inside >= 0.7 * total) ++ok;
    }
  EXPECT_EQ(ok, trials);
}

TEST(Codec, GradientsMatchFiniteDifferences) {
  const CodecConfig cfg{8, 2, 2, 4};
  const ParamSet<double> p = init_codec_params<double>(cfg, 5);
  const BasicTensor<double> x = blob_images(2, 8, 6).cast<double>();
  const auto report = grad_check(
      [&](const Bound<double>& b, Var<double> xv) {
        return mse(decoder_forward(b, cfg, encoder_forward(b, cfg, xv)), xv);
      },
      p, x, {.max_per_tensor = 12, .seed = 3});
  EXPECT_FALSE(report.empty());
  EXPECT_LT(report.max_rel(), 1e-3);
}
