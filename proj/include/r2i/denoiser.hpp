#pragma once

// Conditional noise predictor eps(z_t, t, c): a two-level UNet with sinusoidal time
// embedding and cross-attention over condition-token embeddings.

#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "r2i/adam.hpp"
#include "r2i/codec.hpp"
#include "r2i/layers.hpp"
#include "r2i/schedule.hpp"

namespace r2i {

using TokenSeq = std::vector<int>;

/// Fixed token list: null, pad, the template words, then one token per class.
class Vocabulary {
 public:
  static constexpr int null_id = 0;
  static constexpr int pad_id = 1;
  static constexpr int photo_id = 2;
  static constexpr int head_id = 3;
  static constexpr int skull_id = 4;
  static constexpr int first_class_id = 5;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> class_names) : classes_(std::move(class_names)) {
    tokens_ = {"<null>", "<pad>", "photo", "head", "skull"};
    tokens_.insert(tokens_.end(), classes_.begin(), classes_.end());
  }

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  int class_count() const noexcept { return static_cast<int>(classes_.size()); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::vector<std::string>& classes() const noexcept { return classes_; }

  int class_token(int class_id) const {
    if (class_id < 0 || class_id >= class_count()) {
      throw std::out_of_range("class id " + std::to_string(class_id) + " not in vocabulary");
    }
    return first_class_id + class_id;
  }

 private:
  std::vector<std::string> classes_;
  std::vector<std::string> tokens_;
};

enum class PromptTemplate { head_of_class, generic, class_only, class_head };

inline const char* to_string(PromptTemplate t) {
  switch (t) {
    case PromptTemplate::head_of_class: return "head_of_class";
    case PromptTemplate::generic: return "generic";
    case PromptTemplate::class_only: return "class_only";
    case PromptTemplate::class_head: return "class_head";
  }
  return "?";
}

inline PromptTemplate parse_template(const std::string& s) {
  for (auto t : {PromptTemplate::head_of_class, PromptTemplate::generic, PromptTemplate::class_only,
                 PromptTemplate::class_head})
    if (s == to_string(t)) return t;
  throw std::invalid_argument("unknown prompt template '" + s + "'");
}

/// "a photo of the head of <class>" -> [photo, head, <class>]; generic drops the class;
/// "<class>" -> [<class>]; "<class> head" -> [<class>, head].
inline TokenSeq template_tokens(PromptTemplate t, int class_id, const Vocabulary& vocab) {
  switch (t) {
    case PromptTemplate::head_of_class: return {Vocabulary::photo_id, Vocabulary::head_id, vocab.class_token(class_id)};
    case PromptTemplate::generic: return {Vocabulary::photo_id, Vocabulary::head_id};
    case PromptTemplate::class_only: return {vocab.class_token(class_id)};
    case PromptTemplate::class_head: return {vocab.class_token(class_id), Vocabulary::head_id};
  }
  throw std::invalid_argument("bad template");
}

inline TokenSeq null_tokens() { return {Vocabulary::null_id}; }

struct UNetConfig {
  std::int64_t latent_channels = 4;
  std::int64_t base_width = 32;  // level widths: base, 2 * base
  std::int64_t heads = 4;
  std::int64_t context_dim = 64;  // d_tau
  std::int64_t max_tokens = 8;    // M_max
  std::int64_t vocab_size = 11;
  std::int64_t time_features = 32;
  std::int64_t emb_dim = 128;
};

/// Token embedding matrix [M_max, d_tau] with its attention mask (1 = real token).
struct ConditionEmbedding {
  Tensor embedding;
  Tensor mask;
  bool is_unconditional = false;
};

struct DenoiserModel {
  UNetConfig config;
  Vocabulary vocab;
  ParamSet<float> params;
  std::int64_t trained_steps = 0;

  bool trained() const noexcept { return trained_steps > 0; }
};

template <class T>
ParamSet<T> init_unet_params(const UNetConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet<T> p;
  const std::int64_t w0 = c.base_width, w1 = 2 * c.base_width;
  std::normal_distribution<double> nd(0.0, 1.0);
  BasicTensor<T> tok({c.vocab_size, c.context_dim}), pos({c.max_tokens, c.context_dim});
  for (auto& v : tok.data()) v = static_cast<T>(nd(rng));
  for (auto& v : pos.data()) v = static_cast<T>(0.1 * nd(rng));
  p.add("denoiser.tok", std::move(tok));
  p.add("denoiser.pos", std::move(pos));
  layers::add_linear(p, "denoiser.time1", c.time_features, c.emb_dim, rng);
  layers::add_linear(p, "denoiser.time2", c.emb_dim, c.emb_dim, rng);
  layers::add_conv(p, "denoiser.in", 3, c.latent_channels, w0, rng);
  layers::add_res_block(p, "denoiser.d0a", w0, w0, c.emb_dim, rng);
  layers::add_res_block(p, "denoiser.d0b", w0, w0, c.emb_dim, rng);
  layers::add_conv(p, "denoiser.down", 3, w0, w0, rng);
  layers::add_res_block(p, "denoiser.d1a", w0, w1, c.emb_dim, rng);
  layers::add_res_block(p, "denoiser.d1b", w1, w1, c.emb_dim, rng);
  layers::add_cross_attention(p, "denoiser.attn_d1", w1, c.context_dim, rng);
  layers::add_res_block(p, "denoiser.mid1", w1, w1, c.emb_dim, rng);
  layers::add_cross_attention(p, "denoiser.attn_mid", w1, c.context_dim, rng);
  layers::add_res_block(p, "denoiser.mid2", w1, w1, c.emb_dim, rng);
  layers::add_res_block(p, "denoiser.u1a", 2 * w1, w1, c.emb_dim, rng);
  layers::add_res_block(p, "denoiser.u1b", w1, w1, c.emb_dim, rng);
  layers::add_conv(p, "denoiser.up", 3, w1, w0, rng);
  layers::add_res_block(p, "denoiser.u0a", 2 * w0, w0, c.emb_dim, rng);
  layers::add_res_block(p, "denoiser.u0b", w0, w0, c.emb_dim, rng);
  layers::add_norm(p, "denoiser.out_norm", w0);
  layers::add_conv(p, "denoiser.out", 3, w0, c.latent_channels, rng, 0.1);
  return p;
}

/// Sinusoidal features [N, F] of continuous time.
template <class T>
BasicTensor<T> time_features(std::span<const double> t, std::int64_t features) {
  const std::int64_t half = features / 2;
  BasicTensor<T> out({static_cast<std::int64_t>(t.size()), features});
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::int64_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * double(j) / double(half));
      out[i * features + j] = static_cast<T>(std::sin(t[i] * freq));
      out[i * features + half + j] = static_cast<T>(std::cos(t[i] * freq));
    }
  return out;
}

/// Pads token sequences to M_max; returns flattened ids [N*M] and mask [N, M].
inline std::pair<std::vector<std::int64_t>, Tensor> pack_tokens(std::span<const TokenSeq> conds, const UNetConfig& c) {
  const std::int64_t n = static_cast<std::int64_t>(conds.size());
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n * c.max_tokens), Vocabulary::pad_id);
  Tensor mask({n, c.max_tokens});
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& seq = conds[i];
    if (seq.empty() || static_cast<std::int64_t>(seq.size()) > c.max_tokens) {
      throw std::invalid_argument("condition length " + std::to_string(seq.size()) + " outside [1, " +
                                  std::to_string(c.max_tokens) + "]");
    }
    for (std::size_t j = 0; j < seq.size(); ++j) {
      if (seq[j] < 0 || seq[j] >= c.vocab_size || seq[j] == Vocabulary::pad_id) {
        throw std::out_of_range("unknown token id " + std::to_string(seq[j]));
      }
      ids[i * c.max_tokens + j] = seq[j];
      mask[i * c.max_tokens + j] = 1.0f;
    }
  }
  return {std::move(ids), std::move(mask)};
}

/// Token + position embeddings on the tape, [N, M, d_tau].
template <class T>
Var<T> context_forward(const Bound<T>& p, const UNetConfig& c, const std::vector<std::int64_t>& ids) {
  const std::int64_t n = static_cast<std::int64_t>(ids.size()) / c.max_tokens;
  std::vector<std::int64_t> pos_ids(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos_ids[i] = static_cast<std::int64_t>(i) % c.max_tokens;
  const Var<T> e = add(gather_rows(p("denoiser.tok"), ids), gather_rows(p("denoiser.pos"), pos_ids));
  return reshape(e, {n, c.max_tokens, c.context_dim});
}

/// UNet forward. z [N,h,w,c], t [N] continuous times, ctx [N,M,d_tau], mask [N,M].
template <class T>
Var<T> unet_forward(const Bound<T>& p, const UNetConfig& c, Var<T> z, std::span<const double> t, Var<T> ctx,
                    const BasicTensor<T>& mask) {
  Tape<T>& tape = p.tape();
  if (z.shape().size() != 4 || z.dim(3) != c.latent_channels || z.dim(1) % 2 || z.dim(2) % 2) {
    throw ShapeError("unet: latent " + shape_string(z.shape()) + " must be [N, even, even, " +
                     std::to_string(c.latent_channels) + "]");
  }
  if (static_cast<std::int64_t>(t.size()) != z.dim(0)) throw ShapeError("unet: one time per batch item required");
  Var<T> emb = tape.constant(time_features<T>(t, c.time_features));
  emb = layers::linear(p, "denoiser.time2", silu(layers::linear(p, "denoiser.time1", emb)));
  const Var<T> e = silu(emb);

  Var<T> h = layers::conv(p, "denoiser.in", z);
  h = layers::res_block(p, "denoiser.d0a", h, &e);
  h = layers::res_block(p, "denoiser.d0b", h, &e);
  const Var<T> skip0 = h;
  h = layers::conv(p, "denoiser.down", h, 2);
  h = layers::res_block(p, "denoiser.d1a", h, &e);
  h = layers::res_block(p, "denoiser.d1b", h, &e);
  h = layers::cross_attention(p, "denoiser.attn_d1", h, ctx, mask, c.heads);
  const Var<T> skip1 = h;
  h = layers::res_block(p, "denoiser.mid1", h, &e);
  h = layers::cross_attention(p, "denoiser.attn_mid", h, ctx, mask, c.heads);
  h = layers::res_block(p, "denoiser.mid2", h, &e);
  h = layers::res_block(p, "denoiser.u1a", concat(h, skip1), &e);
  h = layers::res_block(p, "denoiser.u1b", h, &e);
  h = layers::conv(p, "denoiser.up", resize_nearest(h, skip0.dim(1), skip0.dim(2)));
  h = layers::res_block(p, "denoiser.u0a", concat(h, skip0), &e);
  h = layers::res_block(p, "denoiser.u0b", h, &e);
  return layers::conv(p, "denoiser.out", silu(layers::norm(p, "denoiser.out_norm", h)));
}

/// Embedding of one token sequence, [M_max, d_tau]; a pure function of the parameters.
inline ConditionEmbedding embed_condition(const DenoiserModel& m, const TokenSeq& tokens) {
  const TokenSeq seqs[] = {tokens};
  auto [ids, mask] = pack_tokens(seqs, m.config);
  Tape<float> tape;
  Bound<float> p(tape, m.params, false);
  ConditionEmbedding out;
  out.embedding = context_forward(p, m.config, ids).value().reshaped({m.config.max_tokens, m.config.context_dim});
  out.mask = mask.reshaped({m.config.max_tokens});
  out.is_unconditional = tokens == null_tokens();
  return out;
}

/// Batched noise prediction; z [N,h,w,c], one time and one token sequence per item.
inline Tensor predict_noise_batch(const DenoiserModel& m, const Tensor& z, std::span<const double> t,
                                  std::span<const TokenSeq> conds) {
  if (z.rank() != 4 || static_cast<std::size_t>(z.dim(0)) != t.size() || t.size() != conds.size()) {
    throw ShapeError("predict_noise: batch of " + shape_string(z.shape()) + " with " + std::to_string(t.size()) +
                     " times and " + std::to_string(conds.size()) + " conditions");
  }
  constexpr std::int64_t chunk = 128;
  std::vector<Tensor> parts;
  for (std::int64_t b = 0; b < z.dim(0); b += chunk) {
    const std::int64_t e = std::min(z.dim(0), b + chunk);
    auto [ids, mask] = pack_tokens(conds.subspan(b, e - b), m.config);
    Tape<float> tape;
    Bound<float> p(tape, m.params, false);
    const Var<float> ctx = context_forward(p, m.config, ids);
    parts.push_back(unet_forward(p, m.config, tape.constant(slice_batch(z, b, e)), t.subspan(b, e - b), ctx, mask).value());
  }
  return parts.size() == 1 ? std::move(parts[0]) : stack_batch<float>(parts);
}

/// eps-hat for a single latent [h,w,c] at integer step t in [1, T].
inline Tensor predict_noise(const DenoiserModel& m, const Tensor& z_t, int t, const TokenSeq& cond, int steps) {
  if (t < 1 || t > steps) throw std::out_of_range("predict_noise: t=" + std::to_string(t) + " outside [1, T]");
  const double times[] = {static_cast<double>(t)};
  const TokenSeq conds[] = {cond};
  const Tensor out = predict_noise_batch(m, unsqueeze0(z_t), times, conds);
  return out.reshaped(z_t.shape());
}

struct DenoiserTrainConfig {
  int epochs = 60;
  double lr = 1e-3;
  int batch = 32;
  double cond_dropout = 0.1;
  // Source-domain images mixed into training, as a share of the target count. They teach the
  // prior what the source looks like.
  double source_share = 0.1;
  // Probability that a source example is captioned with a class template instead of a skull
  // sequence, like loosely captioned web images.
  double source_class_caption = 0.5;
  std::uint64_t seed = 0;
};

/// One training example: a clean latent and the class it depicts. Source-domain examples are
/// conditioned on skull sequences instead of class templates.
struct LatentExample {
  Tensor latent;  // [h, w, c]
  int class_id = 0;
  bool source_domain = false;
};

/// Conditions used for source-domain images: [photo, head, skull], [skull], [skull, head].
inline TokenSeq source_tokens(int variant) {
  switch (variant) {
    case 0: return {Vocabulary::photo_id, Vocabulary::head_id, Vocabulary::skull_id};
    case 1: return {Vocabulary::skull_id};
    case 2: return {Vocabulary::skull_id, Vocabulary::head_id};
  }
  throw std::out_of_range("source condition variant " + std::to_string(variant));
}

struct DenoiserTrainResult {
  DenoiserModel model;
  std::vector<double> epoch_loss;
};

/// Draws the prompt template uniformly; with probability cond_dropout the condition becomes null.
inline TokenSeq sample_training_condition(int class_id, const Vocabulary& vocab, double cond_dropout,
                                          std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < cond_dropout) return null_tokens();
  std::uniform_int_distribution<int> pick(0, 3);
  return template_tokens(static_cast<PromptTemplate>(pick(rng)), class_id, vocab);
}

inline TokenSeq sample_training_condition(const LatentExample& ex, const Vocabulary& vocab, double cond_dropout,
                                          std::mt19937_64& rng, double source_class_caption = 0.0) {
  if (!ex.source_domain) return sample_training_condition(ex.class_id, vocab, cond_dropout, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < cond_dropout) return null_tokens();
  if (source_class_caption > 0.0 && u(rng) < source_class_caption) return sample_training_condition(ex.class_id, vocab, 0.0, rng);
  std::uniform_int_distribution<int> pick(0, 2);
  return source_tokens(pick(rng));
}

/// Evenly spaced indices taking round(share * target_count) of `available` items, capped at all of them.
inline std::vector<std::size_t> source_subset(std::size_t available, double share, std::size_t target_count) {
  if (share < 0.0) throw std::invalid_argument("source_share must be non-negative");
  const auto want = std::min<std::size_t>(available, static_cast<std::size_t>(std::llround(share * double(target_count))));
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < want; ++i) idx.push_back(i * available / want);
  return idx;
}

/// Standard eps-prediction objective with condition dropout. Deterministic given the seed.
inline DenoiserTrainResult train_denoiser(std::span<const LatentExample> data, const Vocabulary& vocab,
                                          const NoiseSchedule& sched, const UNetConfig& ucfg,
                                          const DenoiserTrainConfig& tc,
                                          const std::function<void(int, double)>& on_epoch = {}) {
  if (data.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  for (double p : {tc.cond_dropout, tc.source_class_caption})
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("train_denoiser: probabilities must lie in [0, 1]");
  DenoiserTrainResult res;
  res.model.config = ucfg;
  res.model.config.vocab_size = vocab.size();
  res.model.vocab = vocab;
  res.model.params = init_unet_params<float>(res.model.config, tc.seed);
  const auto& cfg = res.model.config;
  const Shape ls = data[0].latent.shape();
  AdamState<float> adam;
  std::mt19937_64 rng(tc.seed ^ 0x2545f4914f6cdd1dULL);
  std::normal_distribution<float> normal;
  std::uniform_int_distribution<int> step(1, sched.steps());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(tc.batch)) {
      const std::size_t m = std::min<std::size_t>(tc.batch, order.size() - b);
      std::vector<Tensor> noisy, noise;
      std::vector<double> times;
      std::vector<TokenSeq> conds;
      for (std::size_t i = 0; i < m; ++i) {
        const auto& ex = data[order[b + i]];
        if (ex.latent.shape() != ls) throw ShapeError("train_denoiser: mixed latent shapes");
        const int t = step(rng);
        Tensor eps(ls);
        for (auto& v : eps.data()) v = normal(rng);
        noisy.push_back(unsqueeze0(forward_diffuse(ex.latent, t, eps, sched)));
        noise.push_back(unsqueeze0(eps));
        times.push_back(t);
        conds.push_back(sample_training_condition(ex, vocab, tc.cond_dropout, rng, tc.source_class_caption));
      }
      auto [ids, mask] = pack_tokens(conds, cfg);
      Tape<float> tape;
      Bound<float> p(tape, res.model.params, true);
      const Var<float> pred = unet_forward(p, cfg, tape.constant(stack_batch<float>(noisy)), times,
                                           context_forward(p, cfg, ids), mask);
      const Var<float> loss = mse(pred, tape.constant(stack_batch<float>(noise)));
      total += loss.value().item() * static_cast<double>(m);
      adam_step(res.model.params, tape.backward(loss), adam, {tc.lr});
      ++res.model.trained_steps;
    }
    res.epoch_loss.push_back(total / static_cast<double>(data.size()));
    if (on_epoch) on_epoch(epoch, res.epoch_loss.back());
  }
  return res;
}

/// Encodes labelled target-domain images with a trained codec.
inline std::vector<LatentExample> encode_dataset(const CodecModel& codec, const Tensor& images,
                                                 const std::vector<int>& labels) {
  if (!codec.trained) throw std::invalid_argument("codec is untrained");
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("encode_dataset: empty dataset");
  if (static_cast<std::int64_t>(labels.size()) != images.dim(0)) throw ShapeError("encode_dataset: label count mismatch");
  const Tensor z = encode(codec, images);
  std::vector<LatentExample> out;
  for (std::int64_t i = 0; i < z.dim(0); ++i) {
    const Tensor zi = slice_batch(z, i, i + 1);
    out.push_back({zi.reshaped({z.dim(1), z.dim(2), z.dim(3)}), labels[static_cast<std::size_t>(i)]});
  }
  return out;
}

inline DenoiserTrainResult train_denoiser(const Tensor& images, const std::vector<int>& labels,
                                          const CodecModel& codec, const Vocabulary& vocab,
                                          const NoiseSchedule& sched, const UNetConfig& ucfg,
                                          const DenoiserTrainConfig& tc,
                                          const std::function<void(int, double)>& on_epoch = {}) {
  const auto data = encode_dataset(codec, images, labels);
  return train_denoiser(std::span<const LatentExample>(data), vocab, sched, ucfg, tc, on_epoch);
}

/// Target images plus a source_share subset of the labelled `source_images` [N,H,W,3].
inline DenoiserTrainResult train_denoiser(const Tensor& images, const std::vector<int>& labels,
                                          const Tensor& source_images, const std::vector<int>& source_labels,
                                          const CodecModel& codec,
                                          const Vocabulary& vocab, const NoiseSchedule& sched,
                                          const UNetConfig& ucfg, const DenoiserTrainConfig& tc,
                                          const std::function<void(int, double)>& on_epoch = {}) {
  auto data = encode_dataset(codec, images, labels);
  const auto pick = source_subset(source_images.rank() == 4 ? static_cast<std::size_t>(source_images.dim(0)) : 0,
                                  tc.source_share, data.size());
  if (!pick.empty()) {
    if (source_labels.size() != static_cast<std::size_t>(source_images.dim(0))) throw ShapeError("train_denoiser: source label count mismatch");
    std::vector<Tensor> chosen;
    std::vector<int> chosen_labels;
    for (auto i : pick) {
      chosen.push_back(slice_batch(source_images, static_cast<std::int64_t>(i), static_cast<std::int64_t>(i) + 1));
      chosen_labels.push_back(source_labels[i]);
    }
    for (auto& ex : encode_dataset(codec, stack_batch<float>(chosen), chosen_labels)) {
      ex.source_domain = true;
      data.push_back(std::move(ex));
    }
  }
  return train_denoiser(std::span<const LatentExample>(data), vocab, sched, ucfg, tc, on_epoch);
}

inline ParamSet<float> denoiser_checkpoint(const DenoiserModel& m) {
  ParamSet<float> out = m.params;
  const auto& c = m.config;
  out.add("denoiser.meta.config",
          Tensor({8}, {float(c.latent_channels), float(c.base_width), float(c.heads), float(c.context_dim),
                       float(c.max_tokens), float(c.vocab_size), float(c.time_features), float(c.emb_dim)}));
  out.add("denoiser.meta.trained_steps", Tensor::scalar(static_cast<float>(m.trained_steps)));
  return out;
}

inline DenoiserModel denoiser_from_checkpoint(const ParamSet<float>& ckpt, const Vocabulary& vocab) {
  DenoiserModel m;
  const Tensor& c = ckpt.at("denoiser.meta.config");
  m.config = {std::int64_t(c[0]), std::int64_t(c[1]), std::int64_t(c[2]), std::int64_t(c[3]),
              std::int64_t(c[4]), std::int64_t(c[5]), std::int64_t(c[6]), std::int64_t(c[7])};
  if (m.config.vocab_size != vocab.size()) {
    throw std::invalid_argument("denoiser checkpoint vocabulary size " + std::to_string(m.config.vocab_size) +
                                " does not match configured vocabulary of " + std::to_string(vocab.size()));
  }
  m.vocab = vocab;
  m.trained_steps = static_cast<std::int64_t>(ckpt.at("denoiser.meta.trained_steps").item());
  for (const auto& [name, t] : init_unet_params<float>(m.config, 0)) {
    const Tensor& v = ckpt.at(name);
    require_same_shape(v, t, "denoiser checkpoint");
    m.params.add(name, v);
  }
  return m;
}

}  // namespace r2i
