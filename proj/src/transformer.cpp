// SPDX-License-Identifier: Apache-2.0
#include "covt/transformer.hpp"

#include <cmath>

#include "covt/error.hpp"
#include "covt/ops.hpp"

namespace covt {

std::size_t EncoderConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

void EncoderConfig::validate() const {
  if (depth < 1) throw ConfigError("encoder: depth must be >= 1");
  if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError("encoder: mlp_ratio must be > 0");
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must be in [0, 1)");
}

Tensor original_mlp(const Tensor& x, const MlpWeights& w, Activation act, double dropout_rate,
                    std::mt19937_64* rng) {
  Tensor h = dropout(activate(linear(x, w.fc1_weight, w.fc1_bias), act), dropout_rate, rng);
  return dropout(linear(h, w.fc2_weight, w.fc2_bias), dropout_rate, rng);
}

Tensor improved_mlp(const Tensor& x, const MlpParams& params, Activation act, double dropout_rate,
                    std::mt19937_64* rng) {
  if (x.rank() != 3) throw ShapeError("improved_mlp: input must be [B,N,C], got " + to_string(x.shape()));
  const Tensor local = original_mlp(x, params.local, act, dropout_rate, rng);
  const Tensor pooled = mean_over_axis(x, 1, true);
  const Tensor global = original_mlp(pooled, params.global ? *params.global : params.local, act, dropout_rate, rng);
  return add(local, global);
}

Tensor encoder_block(const Tensor& x, const BlockParams& p, const EncoderConfig& config, std::mt19937_64* rng) {
  const Tensor attn = multi_head_attention(layer_norm(x, p.norm1_weight, p.norm1_bias, config.norm_eps), p.attn,
                                           config.attention(), rng);
  const Tensor x1 = add(x, attn);
  const Tensor normed = layer_norm(x1, p.norm2_weight, p.norm2_bias, config.norm_eps);
  const Tensor mlp = config.global_branch
                         ? improved_mlp(normed, p.mlp, config.mlp_activation, config.dropout, rng)
                         : original_mlp(normed, p.mlp.local, config.mlp_activation, config.dropout, rng);
  return add(x1, mlp);
}

Tensor tokenize(const Tensor& fmap, const TokenizerParams& p, std::size_t patch) {
  if (fmap.rank() != 4) throw ShapeError("tokenize: feature map must be [B,C,H,W], got " + to_string(fmap.shape()));
  if (patch == 0 || fmap.dim(2) % patch != 0 || fmap.dim(3) % patch != 0) {
    throw ShapeError("tokenize: feature grid " + std::to_string(fmap.dim(2)) + "x" + std::to_string(fmap.dim(3)) +
                     " not divisible by patch " + std::to_string(patch));
  }
  if (p.proj_weight.rank() != 4) throw ShapeError("tokenize: projection weight must be 4-D");
  const std::size_t c = p.proj_weight.dim(0);
  Conv2dSpec spec;
  spec.in_channels = fmap.dim(1);
  spec.out_channels = c;
  spec.kernel = {patch, patch};
  spec.stride = {patch, patch};

  const std::size_t b = fmap.dim(0);
  const std::size_t np = (fmap.dim(2) / patch) * (fmap.dim(3) / patch);
  if (p.cls_token.shape() != Shape{1, 1, c}) {
    throw ShapeError("tokenize: class token must be [1,1," + std::to_string(c) + "], got " +
                     to_string(p.cls_token.shape()));
  }
  if (p.pos_embed.shape() != Shape{1, np + 1, c}) {
    throw ShapeError("tokenize: positional embedding must be " + to_string(Shape{1, np + 1, c}) + ", got " +
                     to_string(p.pos_embed.shape()));
  }
  const Tensor grid = conv2d(fmap, p.proj_weight, p.proj_bias, spec);
  const Tensor patches = permute(reshape(grid, {b, c, np}), {0, 2, 1});
  const Tensor tokens = concat({broadcast_to(p.cls_token, {b, 1, c}), patches}, 1);
  return add(tokens, p.pos_embed);
}

}  // namespace covt
