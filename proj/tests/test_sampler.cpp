#include <gtest/gtest.h>

#include <random>

#include "r2i/data.hpp"
#include "r2i/sampler.hpp"

using namespace r2i;

namespace {

Tensor normal_tensor(Shape s, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = scale * nd(rng);
  return t;
}

DenoiserModel small_model(std::uint64_t seed = 1) {
  DenoiserModel m;
  m.vocab = Vocabulary(toy_class_names());
  m.config.base_width = 8;
  m.config.heads = 2;
  m.config.context_dim = 8;
  m.config.time_features = 8;
  m.config.emb_dim = 16;
  m.config.vocab_size = m.vocab.size();
  m.params = init_unet_params<float>(m.config, seed);
  m.trained_steps = 1;
  return m;
}

// Exact noise for the single trajectory through z0: eps(z, t) = (z - sqrt(ab_t) z0) / sqrt(1 - ab_t).
EpsFn oracle_eps(const Tensor& z0, const NoiseSchedule& s) {
  return [z0, &s](const Tensor& z, double t) {
    const double ab = s.alpha_bar_at(t);
    Tensor e(z.shape());
    for (std::size_t i = 0; i < e.size(); ++i)
      e[i] = static_cast<float>((double(z[i]) - std::sqrt(ab) * z0[i]) / std::sqrt(1 - ab));
    return e;
  };
}

}  // namespace

TEST(CfgCombine, EndpointsAndArithmetic) {
  const Tensor u = normal_tensor({5}, 1), c = normal_tensor({5}, 2);
  EXPECT_TRUE(bitwise_equal(cfg_combine(u, c, 1.0), c));
  EXPECT_TRUE(bitwise_equal(cfg_combine(u, c, 0.0), u));
  EXPECT_EQ(cfg_combine(Tensor::scalar(0.0f), Tensor::scalar(1.0f), 7.5).item(), 7.5f);
  EXPECT_THROW(cfg_combine(u, Tensor({4}), 2.0), ShapeError);
}

TEST(DdimStep, SubstitutionIdentity) {
  const NoiseSchedule s = make_default_schedule();
  const Tensor z0 = normal_tensor({8, 8, 4}, 3), eps = normal_tensor({8, 8, 4}, 4);
  for (auto [from, to] : {std::pair{100, 99}, {60, 30}, {10, 0}, {95, 0}}) {
    const Tensor zt = forward_diffuse(z0, from, eps, s);
    const Tensor got = ddim_step(zt, from, to, eps, 0.0, s);
    EXPECT_LE(max_abs_diff(got, forward_diffuse(z0, to, eps, s)), 1e-5) << from << "->" << to;
    EXPECT_TRUE(bitwise_equal(got, ddim_step(zt, from, to, eps, 0.0, s)));
  }
}

TEST(DdimStep, RejectsBadOrderAndMissingNoise) {
  const NoiseSchedule s = make_default_schedule();
  const Tensor z = normal_tensor({4}, 1);
  EXPECT_THROW(ddim_step(z, 10, 10, z, 0.0, s), std::invalid_argument);
  EXPECT_THROW(ddim_step(z, 10, 20, z, 0.0, s), std::invalid_argument);
  EXPECT_THROW(ddim_step(z, 101, 20, z, 0.0, s), std::invalid_argument);
  EXPECT_THROW(ddim_step(z, 10, 5, z, 1.0, s), std::invalid_argument);
  EXPECT_THROW(ddim_step(z, 10, 5, Tensor({3}), 0.0, s), ShapeError);
}

TEST(DdimStep, AncestralVarianceMatchesPosterior) {
  // eta = 1 with the exact eps: z_to = mean + sigma * noise, sigma^2 = (1-ab_to)/(1-ab_t) (1 - ab_t/ab_to).
  const NoiseSchedule s = make_default_schedule();
  const Tensor z = normal_tensor({1}, 1), eps = normal_tensor({1}, 2), noise = Tensor({1}, 1.0f);
  const double a = s.alpha_bar(50), b = s.alpha_bar(49);
  const double sigma = std::sqrt((1 - b) / (1 - a)) * std::sqrt(1 - a / b);
  const double diff = ddim_step(z, 50, 49, eps, 1.0, s, &noise)[0] - ddim_step(z, 50, 49, eps, 0.0, s)[0];
  const double mean_shift = (std::sqrt(1 - b - sigma * sigma) - std::sqrt(1 - b)) * eps[0];
  EXPECT_NEAR(diff, sigma + mean_shift, 1e-5);
}

TEST(ReverseChain, OracleFullChainRecoversClean) {
  const NoiseSchedule s = make_default_schedule();
  const Tensor z0 = unsqueeze0(normal_tensor({8, 8, 4}, 5)), eps = normal_tensor({1, 8, 8, 4}, 6);
  const Tensor zT = forward_diffuse(z0, 100, eps, s);
  SamplerConfig cfg;
  const Tensor rec = reverse_chain(zT, 100, oracle_eps(z0, s), cfg, s);
  EXPECT_LE(max_abs_diff(rec, z0), 1e-3);
  EXPECT_TRUE(bitwise_equal(rec, reverse_chain(zT, 100, oracle_eps(z0, s), cfg, s)));
}

TEST(ReverseChain, AncestralNoiseFollowsSeed) {
  const NoiseSchedule s = make_default_schedule();
  const Tensor zk = normal_tensor({1, 4, 4, 4}, 6);
  // Any estimate that does not pin z0 lets the injected noise reach the output.
  const EpsFn shrink = [](const Tensor& z, double) {
    Tensor e = z;
    for (auto& v : e.data()) v *= 0.5f;
    return e;
  };
  SamplerConfig cfg;
  cfg.eta = 1.0;
  cfg.seed = 1;
  const Tensor a = reverse_chain(zk, 40, shrink, cfg, s);
  EXPECT_TRUE(bitwise_equal(a, reverse_chain(zk, 40, shrink, cfg, s)));
  cfg.seed = 2;
  EXPECT_FALSE(bitwise_equal(a, reverse_chain(zk, 40, shrink, cfg, s)));
  cfg.eta = 0.0;
  const Tensor d = reverse_chain(zk, 40, shrink, cfg, s);
  cfg.seed = 3;
  EXPECT_TRUE(bitwise_equal(d, reverse_chain(zk, 40, shrink, cfg, s)));
}

TEST(Invert, KZeroIsIdentityAndOracleRoundTripIsExact) {
  const NoiseSchedule s = make_default_schedule();
  const DenoiserModel m = small_model();
  const Tensor z0 = normal_tensor({4, 4, 4}, 7);
  EXPECT_TRUE(bitwise_equal(ddim_invert(z0, 0, {Vocabulary::photo_id}, s, m), z0));
  const Tensor zb = unsqueeze0(z0);
  const Tensor zk = invert_chain(zb, 50, oracle_eps(zb, s), s);
  EXPECT_LE(max_abs_diff(reverse_chain(zk, 50, oracle_eps(zb, s), {}, s), zb), 1e-4);
  EXPECT_THROW(ddim_invert(z0, 101, {Vocabulary::photo_id}, s, m), std::out_of_range);
}

TEST(Invert, RoundTripErrorShrinksWithFinerGrid) {
  const NoiseSchedule s = make_default_schedule();
  const DenoiserModel m = small_model(2);
  const TokenSeq cond = template_tokens(PromptTemplate::head_of_class, 3, m.vocab);
  SamplerConfig cfg;
  cfg.guidance_scale = 1.0;
  auto err = [&](int sub) {
    const Tensor z0 = normal_tensor({4, 4, 4, 4}, 9);
    cfg.substeps = sub;
    const Tensor back = reverse(ddim_invert(z0, 20, cond, s, m, 1.0, sub), 20, cond, cfg, s, m);
    return mean_abs_diff(back, z0);
  };
  const double e1 = err(1), e2 = err(2);
  EXPECT_LT(e2, e1);
}

TEST(Guidance, ScaleZeroIgnoresConditionBitwise) {
  const NoiseSchedule s = make_default_schedule();
  const DenoiserModel m = small_model(3);
  const Tensor zk = normal_tensor({2, 4, 4, 4}, 10);
  SamplerConfig cfg;
  cfg.guidance_scale = 0.0;
  const Tensor a = reverse(zk, 30, template_tokens(PromptTemplate::class_only, 0, m.vocab), cfg, s, m);
  const Tensor b = reverse(zk, 30, template_tokens(PromptTemplate::class_only, 5, m.vocab), cfg, s, m);
  EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(Guidance, ScaleOneEqualsConditionalBranchBitwise) {
  const NoiseSchedule s = make_default_schedule();
  const DenoiserModel m = small_model(4);
  const Tensor zk = normal_tensor({2, 4, 4, 4}, 11);
  const TokenSeq cond = template_tokens(PromptTemplate::head_of_class, 2, m.vocab);
  SamplerConfig cfg;
  cfg.guidance_scale = 1.0;
  const EpsFn cond_only = [&](const Tensor& z, double t) {
    const std::vector<double> times(2, t);
    const std::vector<TokenSeq> conds(2, cond);
    return predict_noise_batch(m, z, times, conds);
  };
  EXPECT_TRUE(bitwise_equal(reverse(zk, 30, cond, cfg, s, m), reverse_chain(zk, 30, cond_only, cfg, s)));
}

TEST(Guidance, GuidedEstimateCombinesBothBranches) {
  const DenoiserModel m = small_model(5);
  const Tensor z = normal_tensor({1, 4, 4, 4}, 12);
  const TokenSeq cond = template_tokens(PromptTemplate::class_head, 1, m.vocab);
  const std::vector<double> t{33};
  const Tensor eu = predict_noise_batch(m, z, t, std::vector<TokenSeq>{null_tokens()});
  const Tensor ec = predict_noise_batch(m, z, t, std::vector<TokenSeq>{cond});
  const Tensor g = guided_eps(m, {cond}, 7.5)(z, 33);
  EXPECT_LE(max_abs_diff(g, cfg_combine(eu, ec, 7.5)), 1e-5);
}

TEST(Reverse, RejectsUntrainedModelAndBadK) {
  const NoiseSchedule s = make_default_schedule();
  DenoiserModel m = small_model();
  const Tensor z = normal_tensor({4, 4, 4}, 1);
  EXPECT_THROW(reverse(z, 0, {Vocabulary::photo_id}, {}, s, m), std::out_of_range);
  m.trained_steps = 0;
  EXPECT_THROW(reverse(z, 10, {Vocabulary::photo_id}, {}, s, m), std::invalid_argument);
}
