#pragma once

// Deterministic latent autoencoder: pixels [N,H,W,3] in [-1,1] <-> latents [N,H/f,W/f,c].

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "r2i/adam.hpp"
#include "r2i/layers.hpp"

namespace r2i {

struct CodecConfig {
  std::int64_t image_size = 32;
  std::int64_t factor = 4;  // power of two
  std::int64_t latent_channels = 4;
  std::int64_t width = 16;

  std::int64_t stages() const { return std::countr_zero(static_cast<std::uint64_t>(factor)); }
  std::int64_t latent_size() const { return image_size / factor; }
  /// Channels after `s` stride-2 stages, capped at 64.
  std::int64_t width_at(std::int64_t s) const { return std::min<std::int64_t>(width << s, 64); }

  void validate() const {
    if (factor < 2 || !std::has_single_bit(static_cast<std::uint64_t>(factor))) {
      throw std::invalid_argument("codec factor must be a power of two >= 2, got " + std::to_string(factor));
    }
    if (image_size % factor != 0) {
      throw std::invalid_argument("image size " + std::to_string(image_size) + " not divisible by factor " +
                                  std::to_string(factor));
    }
    if (latent_channels < 1 || width < 1) throw std::invalid_argument("codec widths must be positive");
  }
};

/// Trained (or freshly initialised) codec weights plus the latent normalisation constant.
struct CodecModel {
  CodecConfig config;
  ParamSet<float> params;
  float latent_scale = 1.0f;
  bool trained = false;
};

template <class T>
ParamSet<T> init_codec_params(const CodecConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSet<T> p;
  const std::int64_t s = cfg.stages();
  layers::add_conv(p, "codec.enc.in", 3, 3, cfg.width_at(0), rng);
  for (std::int64_t i = 0; i < s; ++i) {
    layers::add_conv(p, "codec.enc.down" + std::to_string(i), 3, cfg.width_at(i), cfg.width_at(i + 1), rng);
    if (i + 1 < s) layers::add_conv(p, "codec.enc.mix" + std::to_string(i), 3, cfg.width_at(i + 1), cfg.width_at(i + 1), rng);
  }
  layers::add_conv(p, "codec.enc.out", 1, cfg.width_at(s), cfg.latent_channels, rng);

  layers::add_conv(p, "codec.dec.in", 3, cfg.latent_channels, cfg.width_at(s), rng);
  layers::add_res_block(p, "codec.dec.res", cfg.width_at(s), cfg.width_at(s), 0, rng);
  for (std::int64_t i = s; i > 0; --i)
    layers::add_conv(p, "codec.dec.up" + std::to_string(i - 1), 3, cfg.width_at(i), cfg.width_at(i - 1), rng);
  layers::add_conv(p, "codec.dec.out", 3, cfg.width_at(0), 3, rng);
  return p;
}

// The encoder has no normalisation and a 1x1 head, so each latent cell only sees a small
// pixel neighbourhood.
template <class T>
Var<T> encoder_forward(const Bound<T>& p, const CodecConfig& cfg, Var<T> x) {
  Var<T> h = layers::conv(p, "codec.enc.in", x);
  for (std::int64_t i = 0; i < cfg.stages(); ++i) {
    h = layers::conv(p, "codec.enc.down" + std::to_string(i), silu(h), 2);
    if (i + 1 < cfg.stages()) h = add(h, layers::conv(p, "codec.enc.mix" + std::to_string(i), silu(h)));
  }
  return layers::conv(p, "codec.enc.out", silu(h));
}

template <class T>
Var<T> decoder_forward(const Bound<T>& p, const CodecConfig& cfg, Var<T> z) {
  Var<T> h = layers::conv(p, "codec.dec.in", z);
  h = layers::res_block(p, "codec.dec.res", h);
  for (std::int64_t i = cfg.stages(); i > 0; --i) {
    h = resize_nearest(silu(h), 2 * h.dim(1), 2 * h.dim(2));
    h = layers::conv(p, "codec.dec.up" + std::to_string(i - 1), h);
  }
  return layers::conv(p, "codec.dec.out", silu(h));
}

namespace detail {

inline Tensor as_batch(const Tensor& x, std::size_t rank_single) {
  return x.rank() == rank_single ? unsqueeze0(x) : x;
}

template <class F>
Tensor map_chunks(const Tensor& batch, std::int64_t chunk, F&& fn) {
  std::vector<Tensor> parts;
  for (std::int64_t b = 0; b < batch.dim(0); b += chunk)
    parts.push_back(fn(slice_batch(batch, b, std::min(batch.dim(0), b + chunk))));
  return parts.size() == 1 ? std::move(parts[0]) : stack_batch<float>(parts);
}

}  // namespace detail

/// Pixels in [-1,1], [H,W,3] or [N,H,W,3] -> normalised latents of matching rank.
inline Tensor encode(const CodecModel& codec, const Tensor& images) {
  const auto& cfg = codec.config;
  const Tensor x = detail::as_batch(images, 3);
  if (x.rank() != 4 || x.dim(3) != 3 || x.dim(1) % cfg.factor != 0 || x.dim(2) % cfg.factor != 0) {
    throw ShapeError("encode: expected [N,H,W,3] with H, W divisible by " + std::to_string(cfg.factor) + ", got " +
                     shape_string(images.shape()));
  }
  for (float v : x.data())
    if (!(v >= -1.0f - 1e-5f && v <= 1.0f + 1e-5f)) throw std::invalid_argument("encode: pixel outside [-1, 1]");
  Tensor z = detail::map_chunks(x, 64, [&](const Tensor& chunk) {
    Tape<float> tape;
    Bound<float> p(tape, codec.params, false);
    return encoder_forward(p, cfg, tape.constant(chunk)).value();
  });
  for (auto& v : z.data()) v /= codec.latent_scale;
  return images.rank() == 3 ? z.reshaped({z.dim(1), z.dim(2), z.dim(3)}) : z;
}

/// Normalised latents -> pixels clamped to [-1,1].
inline Tensor decode(const CodecModel& codec, const Tensor& latents) {
  const auto& cfg = codec.config;
  Tensor z = detail::as_batch(latents, 3);
  if (z.rank() != 4 || z.dim(3) != cfg.latent_channels) {
    throw ShapeError("decode: expected [N,h,w," + std::to_string(cfg.latent_channels) + "], got " +
                     shape_string(latents.shape()));
  }
  for (auto& v : z.data()) v *= codec.latent_scale;
  Tensor x = detail::map_chunks(z, 64, [&](const Tensor& chunk) {
    Tape<float> tape;
    Bound<float> p(tape, codec.params, false);
    return decoder_forward(p, cfg, tape.constant(chunk)).value();
  });
  for (auto& v : x.data()) v = std::clamp(v, -1.0f, 1.0f);
  return latents.rank() == 3 ? x.reshaped({x.dim(1), x.dim(2), x.dim(3)}) : x;
}

struct CodecTrainConfig {
  int epochs = 30;
  double lr = 2e-3;
  int batch = 32;
  std::uint64_t seed = 0;
};

struct CodecTrainResult {
  CodecModel model;
  std::vector<double> epoch_loss;
  double holdout_mse = 0;
  double holdout_mae = 0;
};

/// Pixel-MSE autoencoder training. Deterministic given the seed.
inline CodecTrainResult train_codec(const Tensor& train, const Tensor& holdout, const CodecConfig& cfg,
                                    const CodecTrainConfig& tc,
                                    const std::function<void(int, double)>& on_epoch = {}) {
  cfg.validate();
  if (train.rank() != 4 || train.dim(0) == 0) throw std::invalid_argument("train_codec: empty dataset");
  if (train.dim(1) != cfg.image_size || train.dim(2) != cfg.image_size || train.dim(3) != 3) {
    throw ShapeError("train_codec: images " + shape_string(train.shape()) + " do not match codec size " +
                     std::to_string(cfg.image_size));
  }
  CodecTrainResult res;
  res.model.config = cfg;
  res.model.params = init_codec_params<float>(cfg, tc.seed);
  AdamState<float> adam;
  std::mt19937_64 rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::int64_t n = train.dim(0);
  const std::size_t img = train.size() / static_cast<std::size_t>(n);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::int64_t b = 0; b < n; b += tc.batch) {
      const std::int64_t m = std::min<std::int64_t>(tc.batch, n - b);
      Tensor x({m, train.dim(1), train.dim(2), 3});
      for (std::int64_t i = 0; i < m; ++i)
        std::copy_n(train.ptr() + order[b + i] * img, img, x.ptr() + i * img);
      Tape<float> tape;
      Bound<float> p(tape, res.model.params, true);
      const Var<float> xv = tape.constant(x);
      const Var<float> loss = mse(decoder_forward(p, cfg, encoder_forward(p, cfg, xv)), xv);
      total += loss.value().item() * static_cast<double>(m);
      adam_step(res.model.params, tape.backward(loss), adam, {tc.lr});
    }
    res.epoch_loss.push_back(total / static_cast<double>(n));
    if (on_epoch) on_epoch(epoch, res.epoch_loss.back());
  }

  // Latent normalisation: unit RMS over the training set.
  {
    CodecModel raw = res.model;
    const Tensor z = encode(raw, train);
    double sq = 0;
    for (float v : z.data()) sq += double(v) * v;
    res.model.latent_scale = static_cast<float>(std::sqrt(sq / static_cast<double>(z.size())));
    if (!(res.model.latent_scale > 0)) res.model.latent_scale = 1.0f;
  }
  res.model.trained = true;

  if (holdout.rank() == 4 && holdout.dim(0) > 0) {
    const Tensor rec = decode(res.model, encode(res.model, holdout));
    double se = 0, ae = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
      const double d = double(rec[i]) - holdout[i];
      se += d * d;
      ae += std::abs(d);
    }
    res.holdout_mse = se / static_cast<double>(rec.size());
    res.holdout_mae = ae / static_cast<double>(rec.size());
  }
  return res;
}

/// Checkpoint tensors: weights plus "codec.meta.*" (config, latent scale).
inline ParamSet<float> codec_checkpoint(const CodecModel& m) {
  ParamSet<float> out = m.params;
  const auto& c = m.config;
  out.add("codec.meta.config", Tensor({4}, {float(c.image_size), float(c.factor), float(c.latent_channels), float(c.width)}));
  out.add("codec.meta.latent_scale", Tensor::scalar(m.latent_scale));
  out.add("codec.meta.trained", Tensor::scalar(m.trained ? 1.0f : 0.0f));
  return out;
}

inline CodecModel codec_from_checkpoint(const ParamSet<float>& ckpt) {
  CodecModel m;
  const Tensor& c = ckpt.at("codec.meta.config");
  m.config = {std::int64_t(c[0]), std::int64_t(c[1]), std::int64_t(c[2]), std::int64_t(c[3])};
  m.config.validate();
  m.latent_scale = ckpt.at("codec.meta.latent_scale").item();
  m.trained = ckpt.at("codec.meta.trained").item() != 0.0f;
  const ParamSet<float> expected = init_codec_params<float>(m.config, 0);
  for (const auto& [name, t] : expected) {
    const Tensor& v = ckpt.at(name);
    require_same_shape(v, t, "codec checkpoint");
    m.params.add(name, v);
  }
  return m;
}

}  // namespace r2i
