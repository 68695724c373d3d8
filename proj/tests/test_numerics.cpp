#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "r2i/adam.hpp"
#include "r2i/grad_check.hpp"
#include "r2i/grad_suite.hpp"
#include "r2i/layers.hpp"
#include "r2i/ops.hpp"
#include "r2i/params.hpp"

using namespace r2i;

namespace {

template <class T = float>
BasicTensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  BasicTensor<T> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

// Reference implementations, deliberately loop-only.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::int64_t l = 0; l < k; ++l) s += double(a[i * k + l]) * b[l * n + j];
      c[i * n + j] = static_cast<float>(s);
    }
  return c;
}

Tensor naive_conv(const Tensor& x, const Tensor& w, std::int64_t stride, std::int64_t pad) {
  const auto n = x.dim(0), h = x.dim(1), wd = x.dim(2), ci = x.dim(3);
  const auto kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
  const auto ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  Tensor y({n, ho, wo, co});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox)
        for (std::int64_t o = 0; o < co; ++o) {
          double s = 0;
          for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const auto iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              for (std::int64_t c = 0; c < ci; ++c)
                s += double(x[((b * h + iy) * wd + ix) * ci + c]) * w[((ky * kw + kx) * ci + c) * co + o];
            }
          y[((b * ho + oy) * wo + ox) * co + o] = static_cast<float>(s);
        }
  return y;
}

// Reduces any op output to a scalar with a fixed random projection.
Var<double> project(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.tape->constant(random_tensor<double>(y.shape(), rng))));
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  std::mt19937_64 rng(1);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1;
  const Tensor a = random_tensor({3, 3}, rng);
  Tape<float> t;
  EXPECT_TRUE(bitwise_equal(matmul(t.constant(eye), t.constant(a)).value(), a));
}

TEST(Matmul, MatchesNaiveLoops) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> dim(1, 40);
  for (int trial = 0; trial < 25; ++trial) {
    const Tensor a = random_tensor({dim(rng), dim(rng)}, rng);
    const Tensor b = random_tensor({a.dim(1), dim(rng)}, rng);
    Tape<float> t;
    EXPECT_LE(max_abs_diff(matmul(t.constant(a), t.constant(b)).value(), naive_matmul(a, b)), 1e-5f);
  }
}

TEST(Matmul, BatchedMatchesPerSlice) {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor({3, 4, 5}, rng), b = random_tensor({3, 5, 2}, rng);
  Tape<float> t;
  const Tensor c = matmul(t.constant(a), t.constant(b)).value();
  for (int i = 0; i < 3; ++i) {
    const Tensor ref = naive_matmul(slice_batch(a, i, i + 1).reshaped({4, 5}), slice_batch(b, i, i + 1).reshaped({5, 2}));
    EXPECT_LE(max_abs_diff(slice_batch(c, i, i + 1).reshaped({4, 2}), ref), 1e-5f);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<float> t;
  try {
    matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({4, 5})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4, 5]"), std::string::npos);
  }
}

TEST(Conv2d, ZeroKernelGivesZeroOutput) {
  std::mt19937_64 rng(4);
  Tape<float> t;
  const Tensor y = conv2d(t.constant(random_tensor({2, 5, 5, 3}, rng)), t.constant(Tensor({3, 3, 3, 4})), 1, 1).value();
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, OnesKernelOverOnesImageSumsNine) {
  Tape<float> t;
  const Tensor x({1, 4, 4, 1}, 1.0f), w({3, 3, 1, 1}, 1.0f);
  const Tensor y = conv2d(t.constant(x), t.constant(w), 1, 0).value();
  const Tensor expected = naive_conv(x, w, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 1}));
  for (std::size_t i = 0; i < y.size(); ++i) {
    EXPECT_EQ(expected[i], 9.0f);
    EXPECT_EQ(y[i], 9.0f);
  }
}

TEST(Conv2d, MatchesNaiveLoops) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> small(1, 6), ks(1, 3), st(1, 2);
  for (int trial = 0; trial < 25; ++trial) {
    const int k = ks(rng), stride = st(rng), pad = k / 2;
    const Tensor x = random_tensor({small(rng), small(rng) + 2, small(rng) + 2, small(rng)}, rng);
    const Tensor w = random_tensor({k, k, x.dim(3), small(rng)}, rng);
    Tape<float> t;
    const Tensor y = conv2d(t.constant(x), t.constant(w), stride, pad).value();
    EXPECT_LE(max_abs_diff(y, naive_conv(x, w, stride, pad)), 1e-5f) << "trial " << trial;
  }
}

TEST(Conv2d, ChannelMismatchRejected) {
  Tape<float> t;
  EXPECT_THROW(conv2d(t.constant(Tensor({1, 4, 4, 2})), t.constant(Tensor({3, 3, 3, 1}))), ShapeError);
}

TEST(Ops, NonFiniteOutputRejected) {
  Tape<float> t;
  Tensor big({2}, 3e38f);
  EXPECT_THROW(add(t.constant(big), t.constant(big)), NumericError);
}

TEST(Backward, SumOfSquaresGivesTwiceTheWeights) {
  Tape<float> t;
  const Var<float> w = t.leaf(Tensor({3}, {1, 2, 3}), "w", true);
  const auto g = t.backward(sum(mul(w, w)));
  EXPECT_EQ(g.at("w").vec(), (std::vector<float>{2, 4, 6}));
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  Tape<float> t;
  t.leaf(Tensor({3}, {1, 2, 3}), "w", true);
  const Var<float> c = t.constant(Tensor({2}, {4, 5}));
  const auto g = t.backward(sum(mul(c, c)));
  EXPECT_EQ(g.at("w").vec(), (std::vector<float>{0, 0, 0}));
}

TEST(Backward, NonScalarLossRejected) {
  Tape<float> t;
  const Var<float> w = t.leaf(Tensor({3}, 1.0f), "w", true);
  EXPECT_THROW(t.backward(mul(w, w)), ShapeError);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  ParamSet<double> p;
  layers::add_linear(p, "l1", 5, 7, rng);
  layers::add_linear(p, "l2", 7, 3, rng);
  for (auto& [_, v] : p)
    for (auto& x : v.data()) x += 0.1;  // non-zero biases
  const auto report = grad_check(
      [](const Bound<double>& b, Var<double> x) {
        return project(layers::linear(b, "l2", silu(layers::linear(b, "l1", x))), 9);
      },
      p, random_tensor<double>({4, 5}, rng));
  ASSERT_EQ(report.entries.size(), 4u);
  EXPECT_LT(report.max_rel(), 1e-3);
}

// Every primitive op against central differences on randomized small shapes.
class OpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradient, TwentyRandomTrials) {
  const std::string op = GetParam();
  std::mt19937_64 rng(fnv1a(op));
  for (int trial = 0; trial < 20; ++trial) {
    const GradCase g = primitive_case(op, trial, rng);
    const auto report = grad_check(g.fragment, g.params, g.input);
    ASSERT_FALSE(report.empty());
    EXPECT_LT(report.max_rel(), 1e-3) << op << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, OpGradient, ::testing::ValuesIn(primitive_ops()));

TEST(GradSuite, CoversEveryOpAndModel) {
  const auto rows = run_grad_suite(2, 4);
  EXPECT_EQ(rows.size(), primitive_ops().size() + 3);
  for (const auto& r : rows) {
    EXPECT_GT(r.checked, 0u) << r.name;
    EXPECT_LT(r.max_rel, 1e-3) << r.name;
  }
}

TEST(Backward, SplitGraphComposesByChainRule) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor({2, 4, 4, 3}, rng);
  const auto k1 = random_tensor({3, 3, 3, 5}, rng);
  const auto k2 = random_tensor({3, 3, 5, 2}, rng);
  auto second = [](Var<float> h, Var<float> k) { return sum(mul(silu(conv2d(h, k, 1, 1)), silu(conv2d(h, k, 1, 1)))); };

  Tape<float> whole;
  const Var<float> wk1 = whole.leaf(k1, "k1", true);
  const auto full = whole.backward(second(silu(conv2d(whole.constant(x), wk1, 1, 1)), whole.constant(k2)));

  // Downstream half: gradient w.r.t. the cut activation.
  Tape<float> first;
  const Tensor cut = silu(conv2d(first.constant(x), first.constant(k1), 1, 1)).value();
  Tape<float> down;
  const auto upstream = down.backward(second(down.leaf(cut, "cut", true), down.constant(k2))).at("cut");

  // Upstream half driven by that gradient.
  Tape<float> up;
  const Var<float> uk1 = up.leaf(k1, "k1", true);
  const auto composed =
      up.backward(sum(mul(silu(conv2d(up.constant(x), uk1, 1, 1)), up.constant(upstream)))).at("k1");
  EXPECT_LE(max_abs_diff(full.at("k1"), composed), 1e-4f * (1 + max_abs_diff(composed, Tensor(composed.shape()))));
}

TEST(Adam, ZeroGradientsLeaveParametersBitwiseUnchanged) {
  std::mt19937_64 rng(8);
  ParamSet<float> p;
  p.add("w", random_tensor({4, 3}, rng));
  p.add("b", Tensor({3}, {-0.0f, 0.0f, 1.5f}));
  const ParamSet<float> before = p;
  Gradients<float> g{{"w", Tensor({4, 3})}, {"b", Tensor({3})}};
  AdamState<float> s;
  adam_step(p, g, s, {});
  EXPECT_TRUE(p == before);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet<float> p;
  p.add("x", Tensor({1}, {0.0f}));
  AdamState<float> s;
  adam_step(p, {{"x", Tensor({1}, {1.0f})}}, s, {0.1, 0.9, 0.999, 1e-8});
  // m = 0.1, v = 0.001; bias-corrected both are 1, so the step is -lr.
  EXPECT_NEAR(p.at("x")[0], -0.1f, 1e-6f);
  adam_step(p, {{"x", Tensor({1}, {1.0f})}}, s, {0.1, 0.9, 0.999, 1e-8});
  EXPECT_EQ(s.step, 2);
}

TEST(Adam, ShapeMismatchRejected) {
  ParamSet<float> p;
  p.add("x", Tensor({2}));
  AdamState<float> s;
  EXPECT_THROW(adam_step(p, {{"x", Tensor({3})}}, s, {}), ShapeError);
}

TEST(GradCheck, LinearLayer) {
  std::mt19937_64 rng(9);
  ParamSet<float> p;
  layers::add_linear(p, "lin", 6, 4, rng);
  const auto report = grad_check(
      [](const Bound<double>& b, Var<double> x) { return project(layers::linear(b, "lin", x), 3); }, p,
      random_tensor({5, 6}, rng));
  EXPECT_FALSE(report.empty());
  EXPECT_LT(report.max_rel(), 1e-3);
}

TEST(GradCheck, FrozenFragmentGivesEmptyReport) {
  std::mt19937_64 rng(10);
  ParamSet<float> p;
  layers::add_linear(p, "lin", 3, 2, rng);
  GradCheckOptions opt;
  opt.trainable = false;
  const auto report = grad_check(
      [](const Bound<double>& b, Var<double> x) { return project(layers::linear(b, "lin", x), 3); }, p,
      random_tensor({2, 3}, rng), opt);
  EXPECT_TRUE(report.empty());
}

TEST(GradCheck, CrossAttentionBlock) {
  std::mt19937_64 rng(11);
  ParamSet<float> p;
  layers::add_cross_attention(p, "xa", 8, 6, rng);
  p.add("ctx", random_tensor({2, 3, 6}, rng));
  BasicTensor<double> mask({2, 3}, 1.0);
  mask[5] = 0;
  const auto report = grad_check(
      [mask](const Bound<double>& b, Var<double> x) {
        return project(layers::cross_attention(b, "xa", x, b("ctx"), mask, 4), 5);
      },
      p, random_tensor({2, 2, 2, 8}, rng));
  EXPECT_LT(report.max_rel(), 1e-3);
}

TEST(CrossAttention, RowsSumToOneAndMaskedKeysGetNothing) {
  std::mt19937_64 rng(12);
  ParamSet<float> p;
  layers::add_cross_attention(p, "xa", 16, 8, rng);
  Tape<float> t;
  Bound<float> b(t, p, false);
  Tensor mask({2, 4}, 1.0f);
  mask[2] = mask[3] = 0;  // sample 0 has two padding tokens
  Var<float> w;
  layers::cross_attention(b, "xa", t.constant(random_tensor({2, 3, 3, 16}, rng)), t.constant(random_tensor({2, 4, 8}, rng)),
                          mask, 4, &w);
  const Tensor& a = w.value();
  const std::int64_t rows = a.dim(0) * a.dim(1);
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += a[r * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-5);
    if (r < rows / 2) {
      EXPECT_EQ(a[r * 4 + 2], 0.0f);
      EXPECT_EQ(a[r * 4 + 3], 0.0f);
    }
  }
}

TEST(Checkpoint, ByteLayoutAndRoundTrip) {
  ParamSet<float> p;
  p.add("codec.w", Tensor({2, 1}, {1.0f, -2.5f}));
  std::stringstream ss;
  write_checkpoint(ss, p);
  const std::string bytes = ss.str();
  // magic + u32 count + u16 len + "codec.w" + u8 rank + 2 dims + 2 floats
  ASSERT_EQ(bytes.size(), 4u + 4 + 2 + 7 + 1 + 16 + 8);
  EXPECT_EQ(bytes.substr(0, 4), "R2I1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 7);
  EXPECT_EQ(bytes.substr(10, 7), "codec.w");
  EXPECT_EQ(bytes[17], 2);
  EXPECT_EQ(bytes[18], 2);
  EXPECT_TRUE(read_checkpoint(ss) == p);
}

TEST(Checkpoint, BadMagicRejected) {
  std::stringstream ss("XXXX");
  EXPECT_THROW(read_checkpoint(ss), std::runtime_error);
}
