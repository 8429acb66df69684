// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "covt/error.hpp"
#include "covt/model.hpp"
#include "covt/ops.hpp"
#include "covt/transformer.hpp"
#include "covt/verification.hpp"
#include "helpers.hpp"

using namespace covt;
using covt::test::bitwise_equal;
using covt::test::max_abs_diff;
using covt::test::randn;

namespace {

MlpWeights random_mlp(std::size_t c, std::size_t h, std::uint64_t seed) {
  return {randn({c, h}, seed, 0.3), randn({h}, seed + 1, 0.1), randn({h, c}, seed + 2, 0.3),
          randn({c}, seed + 3, 0.1)};
}

// Values k/8 with |k| < 64: sums of up to 8 of them, and the divide by a
// power-of-two token count, are exact.
Tensor dyadic(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = static_cast<double>(static_cast<int>(rng() % 127) - 63) / 8.0;
  return Tensor(std::move(s), std::move(v));
}

Tensor tile_tokens(const Tensor& token, std::size_t n) {
  return broadcast_to(token, {token.dim(0), n, token.dim(2)});
}

Tensor permute_tokens(const Tensor& x, const std::vector<std::size_t>& perm) {
  std::vector<Tensor> rows;
  for (std::size_t i : perm) rows.push_back(slice(x, 1, i, i + 1));
  return concat(rows, 1);
}

}  // namespace

TEST(ImprovedMlp, IdenticalTokensDoubleOriginal) {
  const MlpWeights w = random_mlp(6, 12, 1);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = tile_tokens(randn({2, 1, 6}, seed), 5);
    const Tensor orig = original_mlp(x, w, Activation::gelu);
    const Tensor impr = improved_mlp(x, MlpParams{w, std::nullopt}, Activation::gelu);
    EXPECT_TRUE(bitwise_equal(impr, mul_scalar(orig, 2.0))) << seed;
  }
}

TEST(ImprovedMlp, SingleTokenDoublesOriginal) {
  const MlpWeights w = random_mlp(6, 12, 2);
  const Tensor x = randn({3, 1, 6}, 3);
  const Tensor orig = original_mlp(x, w, Activation::gelu);
  EXPECT_TRUE(bitwise_equal(improved_mlp(x, MlpParams{w, std::nullopt}, Activation::gelu), mul_scalar(orig, 2.0)));
}

TEST(ImprovedMlp, MatchesScalarLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MlpWeights w = random_mlp(6, 12, 10 * seed);
    const Tensor x = randn({2, 5, 6}, seed + 100);
    EXPECT_LE(max_abs_diff(improved_mlp(x, MlpParams{w, std::nullopt}, Activation::gelu),
                           naive_improved_mlp(x, w, w, Activation::gelu)),
              1e-12);
  }
}

TEST(ImprovedMlp, UnsharedMatchesScalarLoopOracle) {
  const MlpWeights l = random_mlp(4, 8, 20);
  const MlpWeights g = random_mlp(4, 8, 30);
  const Tensor x = randn({2, 3, 4}, 40);
  EXPECT_LE(max_abs_diff(improved_mlp(x, MlpParams{l, g}, Activation::relu), naive_improved_mlp(x, l, g, Activation::relu)),
            1e-12);
}

TEST(ImprovedMlp, Gradcheck) {
  for (const auto& r : run_gradcheck_suite("improved_mlp", 5)) EXPECT_TRUE(r.pass) << r.op;
  for (const auto& r : run_gradcheck_suite("original_mlp", 5)) EXPECT_TRUE(r.pass) << r.op;
}

TEST(ImprovedMlp, DifferenceIsTokenConstantExactlyOnDyadicGrid) {
  // Inputs and weights on a 1/8 grid, ReLU, 8 tokens: every intermediate is
  // representable, so the subtraction recovers the pooled branch exactly.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MlpWeights w{dyadic({4, 8}, seed + 50), dyadic({8}, seed + 51), dyadic({8, 4}, seed + 52),
                       dyadic({4}, seed + 53)};
    const Tensor x = dyadic({2, 8, 4}, seed);
    const Tensor diff = sub(improved_mlp(x, MlpParams{w, std::nullopt}, Activation::relu),
                            original_mlp(x, w, Activation::relu));
    const Tensor pooled = original_mlp(mean_over_axis(x, 1, true), w, Activation::relu);
    EXPECT_TRUE(bitwise_equal(diff, tile_tokens(pooled, 8))) << seed;
  }
}

TEST(ImprovedMlp, DecomposesWithinRoundoffOnRandomInput) {
  const MlpWeights w = random_mlp(6, 12, 60);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = randn({2, 7, 6}, seed + 200);
    const Tensor diff = sub(improved_mlp(x, MlpParams{w, std::nullopt}, Activation::gelu),
                            original_mlp(x, w, Activation::gelu));
    // Oracle mean by plain summation.
    std::vector<double> mean(2 * 6, 0.0);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t n = 0; n < 7; ++n)
        for (std::size_t c = 0; c < 6; ++c) mean[b * 6 + c] += x.at({b, n, c}) / 7.0;
    const Tensor pooled = original_mlp(Tensor({2, 1, 6}, mean), w, Activation::gelu);
    EXPECT_LE(max_abs_diff(diff, tile_tokens(pooled, 7)), 1e-12);
  }
}

TEST(ImprovedMlp, PermutingTokensPermutesOutputExactly) {
  const MlpWeights w = random_mlp(6, 12, 70);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = randn({2, 5, 6}, seed + 300);
    const Tensor y = improved_mlp(x, MlpParams{w, std::nullopt}, Activation::gelu);
    const Tensor yp = improved_mlp(permute_tokens(x, perm), MlpParams{w, std::nullopt}, Activation::gelu);
    EXPECT_TRUE(bitwise_equal(yp, permute_tokens(y, perm)));
  }
}

TEST(ImprovedMlp, ZeroInputWithZeroBiasesIsZero) {
  MlpWeights w = random_mlp(4, 8, 80);
  w.fc1_bias = Tensor::zeros({8});
  w.fc2_bias = Tensor::zeros({4});
  const Tensor y = improved_mlp(Tensor::zeros({1, 3, 4}), MlpParams{w, std::nullopt}, Activation::gelu);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(ImprovedMlp, RejectsNonTokenInput) {
  EXPECT_THROW(improved_mlp(Tensor::zeros({3, 4}), MlpParams{random_mlp(4, 8, 1), std::nullopt}, Activation::gelu),
               ShapeError);
}

TEST(ImprovedMlp, SharedBranchAddsNoParameters) {
  for (const auto& name : {"covt-nano", "covt-micro", "covt-t"}) {
    ModelConfig on = ModelConfig::preset(name);
    ModelConfig off = on;
    off.encoder.global_branch = false;
    EXPECT_EQ(count_params(on), count_params(off)) << name;
  }
}

TEST(ImprovedMlp, UnsharedBranchDoublesMlpParameters) {
  ModelConfig shared = ModelConfig::preset("covt-micro");
  ModelConfig unshared = shared;
  unshared.encoder.share_mlp_weights = false;
  const std::size_t c = shared.encoder.embed_dim;
  const std::size_t h = shared.encoder.mlp_hidden();
  EXPECT_EQ(count_params(unshared) - count_params(shared), shared.encoder.depth * (2 * c * h + h + c));
}

TEST(ImprovedMlp, FlopOverheadIsOnePooledTokenPerBlock) {
  for (const auto& name : {"covt-nano", "covt-micro", "covt-s"}) {
    ModelConfig on = ModelConfig::preset(name);
    ModelConfig off = on;
    off.encoder.global_branch = false;
    EXPECT_EQ(count_flops(on) - count_flops(off),
              on.encoder.depth * 2 * on.encoder.embed_dim * on.encoder.mlp_hidden())
        << name;
  }
}

namespace {

BlockParams zero_residual_block(std::size_t c, std::size_t h, std::uint64_t seed) {
  BlockParams p;
  p.norm1_weight = Tensor::full({c}, 1.0);
  p.norm1_bias = Tensor::zeros({c});
  p.attn = {randn({c, c}, seed, 0.3), randn({c}, seed + 1), randn({c, c}, seed + 2, 0.3), randn({c}, seed + 3),
            randn({c, c}, seed + 4, 0.3), randn({c}, seed + 5), Tensor::zeros({c, c}), Tensor::zeros({c})};
  p.norm2_weight = Tensor::full({c}, 1.0);
  p.norm2_bias = Tensor::zeros({c});
  p.mlp.local = random_mlp(c, h, seed + 6);
  p.mlp.local.fc2_weight = Tensor::zeros({h, c});
  p.mlp.local.fc2_bias = Tensor::zeros({c});
  return p;
}

EncoderConfig small_encoder() {
  EncoderConfig cfg;
  cfg.depth = 1;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

}  // namespace

TEST(EncoderBlock, ZeroOutputProjectionsGiveIdentity) {
  const Tensor x = randn({2, 5, 8}, 90);
  for (bool global : {true, false}) {
    EncoderConfig cfg = small_encoder();
    cfg.global_branch = global;
    EXPECT_TRUE(bitwise_equal(encoder_block(x, zero_residual_block(8, 16, 91), cfg), x));
  }
}

TEST(EncoderBlock, EqualsExplicitComposition) {
  const EncoderConfig cfg = small_encoder();
  BlockParams p = zero_residual_block(8, 16, 92);
  p.attn.wo = randn({8, 8}, 93, 0.3);
  p.mlp.local = random_mlp(8, 16, 94);
  p.norm1_weight = randn({8}, 95);
  const Tensor x = randn({1, 4, 8}, 96);
  const Tensor x1 = add(x, multi_head_attention(layer_norm(x, p.norm1_weight, p.norm1_bias, cfg.norm_eps), p.attn,
                                                cfg.attention()));
  const Tensor y = add(x1, improved_mlp(layer_norm(x1, p.norm2_weight, p.norm2_bias, cfg.norm_eps), p.mlp,
                                        cfg.mlp_activation));
  EXPECT_TRUE(bitwise_equal(encoder_block(x, p, cfg), y));
}

TEST(EncoderBlock, Gradcheck) {
  const auto r = run_gradcheck_suite("encoder_block", 2);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_TRUE(r[0].pass);
}

TEST(EncoderConfig, Validation) {
  EncoderConfig cfg = small_encoder();
  cfg.num_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_encoder();
  cfg.depth = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_encoder();
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Tokenize, AveragingKernelGivesPatchMeans) {
  // One channel, 4x4 ramp, 2x2 patches, kernel of 1/4s.
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  TokenizerParams p{Tensor::full({1, 1, 2, 2}, 0.25), Tensor::zeros({1}), Tensor::zeros({1, 1, 1}),
                    Tensor::zeros({1, 5, 1})};
  const Tensor t = tokenize(Tensor({1, 1, 4, 4}, v), p, 2);
  EXPECT_EQ(t.shape(), (Shape{1, 5, 1}));
  const std::vector<double> expect{0.0, 2.5, 4.5, 10.5, 12.5};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(t.data()[i], expect[i]);
}

TEST(Tokenize, ClassTokenFirstAndPositionAdded) {
  TokenizerParams p{randn({3, 2, 4, 4}, 1), randn({3}, 2), Tensor({1, 1, 3}, {7, 8, 9}), Tensor::zeros({1, 3, 3})};
  p.pos_embed = Tensor({1, 3, 3}, {1, 1, 1, 0, 0, 0, 0, 0, 0});
  const Tensor t = tokenize(randn({2, 2, 4, 8}, 3), p, 4);
  EXPECT_EQ(t.shape(), (Shape{2, 3, 3}));
  for (std::size_t b = 0; b < 2; ++b) {
    EXPECT_EQ(t.at({b, 0, 0}), 8.0);
    EXPECT_EQ(t.at({b, 0, 1}), 9.0);
    EXPECT_EQ(t.at({b, 0, 2}), 10.0);
  }
}

TEST(Tokenize, TokenCountMatchesConfig) {
  for (const auto& name : ModelConfig::preset_names()) {
    const ModelConfig c = ModelConfig::preset(name);
    const auto g = c.feature_grid();
    EXPECT_EQ(c.num_tokens(), (g[0] / c.patch_size) * (g[1] / c.patch_size) + 1) << name;
  }
  EXPECT_EQ(ModelConfig::preset("covt-s").num_tokens(), 17u);
}

TEST(Tokenize, IndivisibleGridIsShapeError) {
  TokenizerParams p{randn({3, 2, 4, 4}, 1), randn({3}, 2), Tensor::zeros({1, 1, 3}), Tensor::zeros({1, 3, 3})};
  EXPECT_THROW(tokenize(randn({1, 2, 6, 8}, 3), p, 4), ShapeError);
}

TEST(Tokenize, Gradcheck) {
  const auto r = run_gradcheck_suite("tokenize", 4);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_TRUE(r[0].pass);
}
