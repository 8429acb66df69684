// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "covt/error.hpp"
#include "covt/nn.hpp"
#include "covt/ops.hpp"
#include "covt/verification.hpp"
#include "helpers.hpp"

using namespace covt;
using covt::test::max_abs_diff;
using covt::test::randn;

namespace {

Conv2dSpec spec_of(std::size_t cin, std::size_t cout, std::size_t k, std::size_t s, std::size_t p, std::size_t d) {
  Conv2dSpec spec;
  spec.in_channels = cin;
  spec.out_channels = cout;
  spec.kernel = {k, k};
  spec.stride = {s, s};
  spec.padding = {p, p};
  spec.dilation = {d, d};
  return spec;
}

AttentionParams random_attention(std::size_t c, std::uint64_t seed) {
  AttentionParams p;
  p.wq = randn({c, c}, seed + 1, 0.4);
  p.bq = randn({c}, seed + 2, 0.1);
  p.wk = randn({c, c}, seed + 3, 0.4);
  p.bk = randn({c}, seed + 4, 0.1);
  p.wv = randn({c, c}, seed + 5, 0.4);
  p.bv = randn({c}, seed + 6, 0.1);
  p.wo = randn({c, c}, seed + 7, 0.4);
  p.bo = randn({c}, seed + 8, 0.1);
  return p;
}

}  // namespace

TEST(Conv2d, OnesKernelOverOnesInput) {
  const Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor b = Tensor::zeros({1});
  const Tensor valid = conv2d(x, w, b, spec_of(1, 1, 3, 1, 0, 1));
  EXPECT_EQ(valid.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(valid.item(), 9.0);
  const Tensor same = conv2d(x, w, b, spec_of(1, 1, 3, 1, 1, 1));
  EXPECT_EQ(same.at({0, 0, 0, 0}), 4.0);
  EXPECT_EQ(same.at({0, 0, 1, 1}), 9.0);
  EXPECT_EQ(same.at({0, 0, 0, 1}), 6.0);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  const Tensor y = conv2d(randn({2, 3, 5, 5}, 1), Tensor::zeros({4, 3, 3, 3}), Tensor({4}, {1, 2, 3, 4}),
                          spec_of(3, 4, 3, 1, 2, 2));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(y.at({b, o, i, 2}), static_cast<double>(o + 1));
}

TEST(Conv2d, DilationTwoSkipsAlternatePixels) {
  // 5x5 ramp, 3x3 ones kernel at d=2 reads rows/cols 0, 2, 4.
  std::vector<double> v(25);
  for (std::size_t i = 0; i < 25; ++i) v[i] = static_cast<double>(i);
  const Tensor y = conv2d(Tensor({1, 1, 5, 5}, v), Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}),
                          spec_of(1, 1, 3, 1, 0, 2));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 0 + 2 + 4 + 10 + 12 + 14 + 20 + 22 + 24);
}

TEST(Conv2d, MatchesNaiveOracle) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = std::array<std::size_t, 3>{1, 3, 7}[rng() % 3];
    const std::size_t s = 1 + rng() % 2;
    const std::size_t d = 1 + rng() % 4;
    const std::size_t p = rng() % (d * (k - 1) / 2 + 1 + 1);
    const std::size_t cin = 1 + rng() % 3;
    const std::size_t cout = 1 + rng() % 3;
    const std::size_t hw = d * (k - 1) + 1 + rng() % 5;
    const Conv2dSpec spec = spec_of(cin, cout, k, s, p, d);
    const Tensor x = randn({2, cin, hw, hw + 1}, rng());
    const Tensor w = randn(spec.weight_shape(), rng());
    const Tensor b = randn({cout}, rng());
    EXPECT_LE(max_abs_diff(conv2d(x, w, b, spec), naive_conv2d(x, w, b, spec)), 1e-12)
        << "k=" << k << " s=" << s << " p=" << p << " d=" << d;
  }
}

TEST(Conv2d, BiasGradientCountsOutputPixels) {
  const Tensor b({2}, {0.0, 0.0}, true);
  {
    Tape tape;
    tape.backward(sum(conv2d(randn({3, 1, 6, 6}, 2), randn({2, 1, 3, 3}, 3), b, spec_of(1, 2, 3, 1, 1, 1))));
  }
  EXPECT_EQ(b.grad()[0], 3.0 * 36.0);
  EXPECT_EQ(b.grad()[1], 3.0 * 36.0);
}

TEST(Conv2d, ZeroKernelGivesZeroInputGradient) {
  const Tensor x = randn({1, 2, 5, 5}, 4).detach(true);
  {
    Tape tape;
    tape.backward(sum(conv2d(x, Tensor::zeros({3, 2, 3, 3}), Tensor::zeros({3}), spec_of(2, 3, 3, 1, 1, 3))));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Conv2d, GradcheckModelGeometries) {
  // stem (7x7, stride 2, pad 3) and every atrous branch rate.
  struct G {
    std::size_t k, s, p, d;
  };
  for (const G g : {G{7, 2, 3, 1}, G{3, 1, 1, 1}, G{3, 1, 2, 2}, G{3, 1, 3, 3}, G{3, 1, 4, 4}}) {
    const Conv2dSpec spec = spec_of(2, 2, g.k, g.s, g.p, g.d);
    const auto r = gradcheck(
        "conv2d", [spec](const std::vector<Tensor>& a) { return conv2d(a[0], a[1], a[2], spec); },
        {randn({1, 2, 9, 9}, 5), randn(spec.weight_shape(), 6, 0.3), randn({2}, 7)}, {"x", "w", "b"}, kOpTolerance,
        g.d);
    EXPECT_TRUE(r.pass) << "k=" << g.k << " d=" << g.d;
  }
}

TEST(Conv2d, OneByOneKernelEqualsLinearOverChannels) {
  const Tensor x = randn({2, 3, 4, 5}, 8);
  const Tensor w = randn({4, 3, 1, 1}, 9);
  const Tensor b = randn({4}, 10);
  const Tensor y = conv2d(x, w, b, spec_of(3, 4, 1, 1, 0, 1));
  // x as [B,H,W,C] times w^T as [C,O].
  const Tensor xl = permute(x, {0, 2, 3, 1});
  const Tensor wl = transpose(reshape(w, {4, 3}), 0, 1);
  const Tensor ref = permute(linear(xl, wl, b), {0, 3, 1, 2});
  EXPECT_LE(max_abs_diff(y, ref), 1e-12);
}

TEST(Conv2d, RejectsBadShapes) {
  EXPECT_THROW(conv2d(randn({1, 2, 5, 5}, 1), randn({1, 3, 3, 3}, 2), Tensor::zeros({1}), spec_of(3, 1, 3, 1, 0, 1)),
               ShapeError);
  EXPECT_THROW(conv2d(randn({1, 1, 2, 2}, 1), randn({1, 1, 3, 3}, 2), Tensor::zeros({1}), spec_of(1, 1, 3, 1, 0, 1)),
               ShapeError);
  EXPECT_THROW(spec_of(1, 1, 3, 0, 0, 1).validate(), ShapeError);
  EXPECT_THROW(spec_of(1, 1, 3, 1, 0, 0).validate(), ShapeError);
}

TEST(Conv2d, ExtentAndOutputSize) {
  const Conv2dSpec spec = spec_of(1, 1, 3, 1, 4, 4);
  EXPECT_EQ(spec.extent(0), 9u);
  EXPECT_EQ(spec.output_size(16, 16), (std::array<std::size_t, 2>{16, 16}));
  EXPECT_EQ(spec_of(1, 1, 7, 2, 3, 1).output_size(64, 64), (std::array<std::size_t, 2>{32, 32}));
}

TEST(Linear, HandExample) {
  const Tensor y = linear(Tensor({1, 2}, {1, 2}), Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}, {10, 20}));
  EXPECT_EQ(y.data()[0], 11.0);
  EXPECT_EQ(y.data()[1], 22.0);
}

TEST(Linear, AppliesOverLastAxisOfRankThree) {
  const Tensor x = randn({2, 3, 4}, 11);
  const Tensor w = randn({4, 5}, 12);
  const Tensor b = randn({5}, 13);
  const Tensor y = linear(x, w, b);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 5}));
  const Tensor row = linear(reshape(slice(slice(x, 0, 1, 2), 1, 2, 3), {1, 4}), w, b);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.at({1, 2, j}), row.data()[j]);
}

TEST(Linear, Gradcheck) {
  const auto r = gradcheck(
      "linear", [](const std::vector<Tensor>& a) { return linear(a[0], a[1], a[2]); },
      {randn({2, 3, 4}, 14), randn({4, 5}, 15), randn({5}, 16)}, {"x", "w", "b"}, 1e-5, 0);
  for (double e : r.max_rel_error) EXPECT_LT(e, 1e-5);
}

TEST(Linear, MismatchIsShapeError) {
  EXPECT_THROW(linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}), Tensor::zeros({5})), ShapeError);
}

TEST(Dropout, IdentityWithoutRngOrAtZeroRate) {
  const Tensor x = randn({4, 4}, 17);
  std::mt19937_64 rng(1);
  EXPECT_TRUE(covt::test::bitwise_equal(dropout(x, 0.5, nullptr), x));
  EXPECT_TRUE(covt::test::bitwise_equal(dropout(x, 0.0, &rng), x));
}

TEST(Dropout, KeptValuesAreRescaled) {
  const Tensor x = Tensor::full({1000}, 1.0);
  std::mt19937_64 rng(3);
  const Tensor y = dropout(x, 0.25, &rng);
  std::size_t kept = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
      ++kept;
    }
  }
  EXPECT_GT(kept, 650u);
  EXPECT_LT(kept, 850u);
}

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
  const AttentionParams p = random_attention(8, 20);
  const AttentionSpec spec{8, 2, 0.0};
  const Tensor x = randn({3, 1, 8}, 21);
  const Tensor y = multi_head_attention(x, p, spec);
  const Tensor ref = linear(linear(x, p.wv, p.bv), p.wo, p.bo);
  EXPECT_LE(max_abs_diff(y, ref), 1e-12);
}

TEST(Attention, ZeroQueryKeyWeightsAverageValues) {
  AttentionParams p = random_attention(4, 30);
  p.wq = Tensor::zeros({4, 4});
  p.wk = Tensor::zeros({4, 4});
  p.bq = Tensor::zeros({4});
  p.bk = Tensor::zeros({4});
  const Tensor x = randn({1, 5, 4}, 31);
  Tensor weights;
  const Tensor y = multi_head_attention(x, p, AttentionSpec{4, 2, 0.0}, nullptr, &weights);
  for (double w : weights.data()) EXPECT_NEAR(w, 0.2, 1e-15);
  const Tensor v_mean = mean_over_axis(linear(x, p.wv, p.bv), 1, true);
  const Tensor ref = linear(v_mean, p.wo, p.bo);
  for (std::size_t n = 0; n < 5; ++n)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.at({0, n, c}), ref.at({0, 0, c}), 1e-12);
}

TEST(Attention, WeightsRowsSumToOne) {
  Tensor weights;
  multi_head_attention(randn({2, 6, 8}, 40), random_attention(8, 41), AttentionSpec{8, 4, 0.0}, nullptr, &weights);
  EXPECT_EQ(weights.shape(), (Shape{2, 4, 6, 6}));
  for (std::size_t r = 0; r < weights.size() / 6; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += weights.data()[r * 6 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Attention, KeyBiasHasZeroGradient) {
  // q.(k_j + bk) shifts every logit of a row equally; softmax cancels it.
  AttentionParams p = random_attention(8, 50);
  p.bk = p.bk.detach(true);
  {
    Tape tape;
    tape.backward(sum(mul(multi_head_attention(randn({2, 5, 8}, 51), p, AttentionSpec{8, 2, 0.0}),
                          randn({2, 5, 8}, 52))));
  }
  for (double g : p.bk.grad()) EXPECT_LE(std::abs(g), 1e-12);
}

TEST(Attention, PermutationEquivariant) {
  const AttentionParams p = random_attention(8, 60);
  const Tensor x = randn({1, 4, 8}, 61);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<Tensor> rows;
  for (std::size_t i : perm) rows.push_back(slice(x, 1, i, i + 1));
  const Tensor xp = concat(rows, 1);
  const Tensor y = multi_head_attention(x, p, AttentionSpec{8, 2, 0.0});
  const Tensor yp = multi_head_attention(xp, p, AttentionSpec{8, 2, 0.0});
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(yp.at({0, n, c}), y.at({0, perm[n], c}), 1e-12);
}

TEST(Attention, GradcheckAllButKeyBias) {
  const auto reports = run_gradcheck_suite("multi_head_attention", 3);
  ASSERT_FALSE(reports.empty());
  for (const auto& r : reports) EXPECT_TRUE(r.pass) << r.op;
}

TEST(Attention, EmbedDimMustDivideByHeads) {
  EXPECT_THROW((AttentionSpec{10, 3, 0.0}.validate()), ShapeError);
  EXPECT_THROW(multi_head_attention(randn({1, 2, 10}, 1), random_attention(10, 2), AttentionSpec{10, 3, 0.0}),
               ShapeError);
}

TEST(Activation, NamesRoundTrip) {
  for (Activation a : {Activation::gelu, Activation::relu, Activation::identity})
    EXPECT_EQ(parse_activation(to_string(a)), a);
  EXPECT_THROW(parse_activation("swish"), std::invalid_argument);
}

TEST(Init, KaimingUniformBounds) {
  std::mt19937_64 rng(5);
  const Tensor w = kaiming_uniform({64, 3, 7, 7}, 3 * 49, rng);
  const double bound = std::sqrt(6.0 / (3 * 49));
  for (double v : w.data()) EXPECT_LE(std::abs(v), bound);
}

TEST(Init, TruncatedNormalWithinTwoSigma) {
  std::mt19937_64 rng(6);
  const Tensor w = trunc_normal({2000}, 0.02, rng);
  for (double v : w.data()) EXPECT_LE(std::abs(v), 0.04);
}
