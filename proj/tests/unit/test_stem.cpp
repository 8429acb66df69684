// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "covt/error.hpp"
#include "covt/ops.hpp"
#include "covt/stem.hpp"
#include "covt/verification.hpp"
#include "helpers.hpp"

using namespace covt;
using covt::test::max_abs_diff;
using covt::test::randn;

namespace {

StemConfig small_config(std::size_t stride = 2) {
  StemConfig c;
  c.stem_channels = 4;
  c.branch_channels = 3;
  c.stem_stride = stride;
  return c;
}

StemParams random_params(const StemConfig& c, std::uint64_t seed) {
  StemParams p;
  p.conv_weight = randn(c.stem_conv().weight_shape(), seed, 0.1);
  p.conv_bias = randn({c.stem_channels}, seed + 1, 0.1);
  for (std::size_t i = 0; i < c.rates.size(); ++i) {
    p.branch_weight.push_back(randn(c.branch_conv(c.rates[i]).weight_shape(), seed + 10 + i, 0.2));
    p.branch_bias.push_back(randn({c.branch_channels}, seed + 20 + i, 0.1));
  }
  return p;
}

Tensor relu_copy(const Tensor& t) {
  std::vector<double> v(t.data().begin(), t.data().end());
  for (auto& x : v) x = x > 0.0 ? x : 0.0;
  return Tensor(t.shape(), std::move(v));
}

}  // namespace

TEST(Stem, OutputShapeConcatenatesBranches) {
  const StemConfig c = small_config();
  const Tensor y = stem_forward(randn({2, 3, 16, 16}, 1), random_params(c, 2), c);
  EXPECT_EQ(y.shape(), (Shape{2, 12, 8, 8}));
  EXPECT_EQ(c.out_channels(), 12u);
}

TEST(Stem, ZeroInputAndZeroBiasGivesZeros) {
  const StemConfig c = small_config();
  StemParams p = random_params(c, 3);
  p.conv_bias = Tensor::zeros({c.stem_channels});
  for (auto& b : p.branch_bias) b = Tensor::zeros({c.branch_channels});
  const Tensor y = stem_forward(Tensor::zeros({1, 3, 8, 8}), p, c);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Stem, IdenticalBranchWeightsAtRateOneGiveIdenticalSlices) {
  StemConfig c = small_config();
  c.rates = {1, 1};
  StemParams p = random_params(c, 4);
  p.branch_weight[1] = p.branch_weight[0];
  p.branch_bias[1] = p.branch_bias[0];
  const Tensor y = stem_forward(randn({1, 3, 12, 12}, 5), p, c);
  EXPECT_TRUE(covt::test::bitwise_equal(slice(y, 1, 0, 3), slice(y, 1, 3, 6)));
}

TEST(Stem, EachBranchMatchesNaiveComposition) {
  const StemConfig c = small_config();
  const StemParams p = random_params(c, 6);
  const Tensor x = randn({2, 3, 12, 10}, 7);
  const Tensor y = stem_forward(x, p, c);
  const Tensor base = relu_copy(naive_conv2d(x, p.conv_weight, p.conv_bias, c.stem_conv()));
  for (std::size_t i = 0; i < c.rates.size(); ++i) {
    const Tensor ref = relu_copy(naive_conv2d(base, p.branch_weight[i], p.branch_bias[i], c.branch_conv(c.rates[i])));
    EXPECT_LE(max_abs_diff(slice(y, 1, 3 * i, 3 * (i + 1)), ref), 1e-12) << "rate " << c.rates[i];
  }
}

TEST(Stem, ZeroedBranchContributesOnlyItsBiasRelu) {
  const StemConfig c = small_config();
  StemParams p = random_params(c, 8);
  p.branch_weight[2] = Tensor::zeros(p.branch_weight[2].shape());
  p.branch_bias[2] = Tensor({3}, {-1.0, 0.0, 0.5});
  const Tensor y = stem_forward(randn({1, 3, 8, 8}, 9), p, c);
  const Tensor part = slice(y, 1, 6, 9);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(part.at({0, 0, i, j}), 0.0);
      EXPECT_EQ(part.at({0, 1, i, j}), 0.0);
      EXPECT_EQ(part.at({0, 2, i, j}), 0.5);
    }
}

TEST(Stem, AnalyticReceptiveField) {
  EXPECT_EQ(stem_receptive_field(small_config(1)), (std::vector<std::size_t>{9, 11, 13, 15}));
  EXPECT_EQ(stem_receptive_field(small_config(2)), (std::vector<std::size_t>{11, 15, 19, 23}));
  StemConfig c = small_config(2);
  c.rates = {2};
  EXPECT_EQ(stem_receptive_field(c).front(), 15u);
}

TEST(Stem, ProbedReceptiveFieldMatchesAnalytic) {
  for (std::size_t stride : {1u, 2u}) {
    const StemConfig c = small_config(stride);
    EXPECT_EQ(probe_stem_receptive_field(c), stem_receptive_field(c)) << "stride " << stride;
  }
}

TEST(Stem, ReceptiveFieldGrowsWithRate) {
  const auto rf = probe_stem_receptive_field(small_config(2));
  for (std::size_t i = 1; i < rf.size(); ++i) EXPECT_GT(rf[i], rf[i - 1]);
}

TEST(Stem, Gradcheck) {
  const auto reports = run_gradcheck_suite("stem_forward", 1);
  ASSERT_EQ(reports.size(), 1u);
  EXPECT_TRUE(reports[0].pass);
}

TEST(Stem, ConfigErrors) {
  StemConfig c = small_config();
  c.rates = {};
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.rates = {1, 0};
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.stem_kernel = 6;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Stem, InputErrors) {
  const StemConfig c = small_config();
  const StemParams p = random_params(c, 10);
  EXPECT_THROW(stem_forward(randn({1, 1, 8, 8}, 1), p, c), ShapeError);
  EXPECT_THROW(stem_forward(randn({1, 3, 9, 8}, 1), p, c), ShapeError);
  StemParams short_p = p;
  short_p.branch_weight.pop_back();
  EXPECT_THROW(stem_forward(randn({1, 3, 8, 8}, 1), short_p, c), ShapeError);
}
