// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "covt/nn.hpp"
#include "covt/tensor.hpp"

namespace covt {

/// CNN block: a 7x7 stem convolution followed by parallel atrous branches
/// that all read the stem output and are concatenated along channels.
struct StemConfig {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 64;
  std::size_t stem_kernel = 7;
  std::size_t stem_stride = 2;
  std::size_t branch_channels = 48;
  std::vector<std::size_t> rates{1, 2, 3, 4};
  std::array<std::size_t, 2> branch_kernel{3, 3};
  Activation activation = Activation::relu;

  std::size_t out_channels() const { return branch_channels * rates.size(); }
  Conv2dSpec stem_conv() const;
  /// "Same" padding d*(k-1)/2 so every branch keeps the stem's grid.
  Conv2dSpec branch_conv(std::size_t rate) const;
  void validate() const;
};

struct StemParams {
  Tensor conv_weight, conv_bias;
  std::vector<Tensor> branch_weight, branch_bias;  // one per rate, in rate order
};

/// y = concat_r act(atrous_r(act(conv7x7(x)))), branches in ascending-rate
/// config order. Returns [B, rates*Cb, H/stride, W/stride].
Tensor stem_forward(const Tensor& x, const StemParams& params, const StemConfig& config);

/// Analytic receptive field (pixels, per axis) of one output pixel of each
/// branch: 7 + d*(k-1)*stem_stride.
std::vector<std::size_t> stem_receptive_field(const StemConfig& config);

}  // namespace covt
