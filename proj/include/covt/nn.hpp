// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>

#include "covt/tensor.hpp"

namespace covt {

/// Geometry of a 2-D convolution. All counts are in pixels; the dilation is
/// the atrous rate (1 = ordinary convolution).
struct Conv2dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::array<std::size_t, 2> kernel{1, 1};
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};
  std::array<std::size_t, 2> dilation{1, 1};

  /// Effective kernel extent d*(k-1)+1 along axis 0 (rows) or 1 (cols).
  std::size_t extent(std::size_t axis) const;
  /// floor((in + 2p - extent)/s) + 1 per axis; throws ShapeError when < 1.
  std::array<std::size_t, 2> output_size(std::size_t height, std::size_t width) const;
  Shape weight_shape() const;
  void validate() const;
};

/// Dilated cross-correlation with zero padding:
/// out[b,o,i,j] = bias[o] + sum_{c,u,v} x[b,c,i*s+u*d-p, j*s+v*d-p] * w[o,c,u,v].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dSpec& spec);

/// Affine map over the last axis: x[.., Din] * w[Din, Dout] + b[Dout].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

enum class Activation { gelu, relu, identity };

Tensor activate(const Tensor& x, Activation act);
std::string_view to_string(Activation act);
Activation parse_activation(std::string_view name);

/// Inverted dropout. Identity (and no tape node) when rate is 0 or no RNG is
/// supplied, which is how evaluation runs.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64* rng);

struct AttentionSpec {
  std::size_t embed_dim = 0;
  std::size_t num_heads = 1;
  double dropout = 0.0;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  double scale() const;
  void validate() const;
};

/// Projection weights are [C, C] in x*W orientation.
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Standard multi-head self-attention over x[B, N, C]. When `weights` is
/// non-null it receives the post-softmax attention map [B, h, N, N].
Tensor multi_head_attention(const Tensor& x, const AttentionParams& params, const AttentionSpec& spec,
                            std::mt19937_64* dropout_rng = nullptr, Tensor* weights = nullptr);

// Initializers.
Tensor trunc_normal(Shape shape, double stddev, std::mt19937_64& rng);
/// U(-b, b) with b = sqrt(6 / fan_in).
Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

}  // namespace covt
