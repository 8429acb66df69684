// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <random>

#include "covt/nn.hpp"
#include "covt/tensor.hpp"

namespace covt {

struct EncoderConfig {
  std::size_t depth = 12;
  std::size_t embed_dim = 384;
  std::size_t num_heads = 6;
  double mlp_ratio = 4.0;
  Activation mlp_activation = Activation::gelu;
  /// Adds the token-averaged branch to every MLP. Off reproduces the plain
  /// ViT MLP (ablation arm).
  bool global_branch = true;
  /// The pooled branch reuses fc1/fc2. Off gives it its own weights.
  bool share_mlp_weights = true;
  double dropout = 0.0;
  double norm_eps = 1e-6;

  std::size_t mlp_hidden() const;
  AttentionSpec attention() const { return {embed_dim, num_heads, dropout}; }
  void validate() const;
};

struct MlpWeights {
  Tensor fc1_weight, fc1_bias;  // [C, Hd], [Hd]
  Tensor fc2_weight, fc2_bias;  // [Hd, C], [C]
};

struct MlpParams {
  MlpWeights local;
  /// Separate weights for the pooled branch; empty when shared.
  std::optional<MlpWeights> global;
};

/// Token-wise two-layer MLP: fc2(act(fc1(x))).
Tensor original_mlp(const Tensor& x, const MlpWeights& w, Activation act, double dropout = 0.0,
                    std::mt19937_64* rng = nullptr);

/// MLP with a global branch: the token mean g = mean_N(x) [B,1,C] runs
/// through the same two layers and is broadcast-added to the token-wise
/// result. The mean covers every token, the class token included.
Tensor improved_mlp(const Tensor& x, const MlpParams& params, Activation act, double dropout = 0.0,
                    std::mt19937_64* rng = nullptr);

struct BlockParams {
  Tensor norm1_weight, norm1_bias;
  AttentionParams attn;
  Tensor norm2_weight, norm2_bias;
  MlpParams mlp;
};

/// Pre-norm block: x1 = x + MHA(LN(x)); y = x1 + MLP(LN(x1)).
Tensor encoder_block(const Tensor& x, const BlockParams& params, const EncoderConfig& config,
                     std::mt19937_64* rng = nullptr);

struct TokenizerParams {
  Tensor proj_weight, proj_bias;  // patch embedding conv [C, Cf, P, P], [C]
  Tensor cls_token;               // [1, 1, C]
  Tensor pos_embed;               // [1, N, C]
};

/// Patch-embeds fmap [B,Cf,Hf,Wf] with a kernel=stride=patch convolution,
/// flattens row-major to Np tokens, prepends the class token and adds the
/// positional embedding. Returns [B, Np+1, C].
Tensor tokenize(const Tensor& fmap, const TokenizerParams& params, std::size_t patch);

}  // namespace covt
