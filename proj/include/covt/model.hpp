// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "covt/stem.hpp"
#include "covt/tensor.hpp"
#include "covt/transformer.hpp"
#include "json.hpp"

namespace covt {

/// Every architectural hyperparameter of a COVT network.
struct ModelConfig {
  std::string variant = "custom";
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  StemConfig stem;
  std::size_t patch_size = 8;
  EncoderConfig encoder;
  std::size_t num_classes = 2;
  double init_std = 0.02;

  /// Spatial size of the stem output.
  std::array<std::size_t, 2> feature_grid() const;
  std::size_t num_patches() const;
  /// Patch tokens plus the class token.
  std::size_t num_tokens() const { return num_patches() + 1; }
  void validate() const;

  /// Named presets: "covt-s", "covt-t" (DeiT-small/tiny shaped encoders),
  /// "covt-micro" (32x32, L=2, C=32) and "covt-nano" (16x16, L=1, C=8).
  static ModelConfig preset(std::string_view variant);
  static std::vector<std::string> preset_names();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Ordered, named collection of trainable tensors.
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor>;

  /// Registers a parameter (marked as requiring grad). Names must be unique.
  Tensor& add(std::string name, Tensor value);
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  bool contains(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  void zero_grad();
  void clear_grad();
  /// Deep copy with fresh storage.
  ParamStore clone() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Parameter names and shapes in registration order. Naming follows
/// "<module>.<layer>.<weight|bias>", e.g. "stem.branch2.weight" or
/// "blocks.3.mlp.fc1.bias".
std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& config);

/// Fresh parameters: Kaiming-uniform (fan-in) for convolutions, truncated
/// normal (init_std) for linear layers and embeddings, LN at identity,
/// biases zero.
ParamStore init_params(const ModelConfig& config, std::mt19937_64& rng);

/// Stem -> tokenizer -> encoder blocks -> head on the class token.
class CovtModel {
 public:
  /// Initializes parameters from the "init" stream of `seed`.
  CovtModel(ModelConfig config, std::uint64_t seed);
  /// Adopts existing parameters; throws ShapeError on the first name or
  /// shape that does not match the config.
  CovtModel(ModelConfig config, ParamStore params);

  /// images [B, 3, H, W] -> logits [B, num_classes]. A non-null RNG enables
  /// dropout (training mode).
  Tensor forward(const Tensor& images, std::mt19937_64* dropout_rng = nullptr) const;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  StemParams stem_params() const;
  TokenizerParams tokenizer_params() const;
  BlockParams block_params(std::size_t index) const;

 private:
  ModelConfig config_;
  ParamStore params_;
};

/// Checks `params` against the layout of `config`; throws ShapeError naming
/// the first mismatched parameter and both shapes.
void check_params(const ModelConfig& config, const ParamStore& params);

std::size_t count_params(const ModelConfig& config);
/// Multiply-accumulates of every convolution and matrix product in one
/// single-image forward pass. Normalization, softmax and elementwise work
/// are not counted.
std::size_t count_flops(const ModelConfig& config);

/// Optimizer position and buffers persisted with a checkpoint.
struct TrainState {
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;   // completed optimizer steps
  std::uint64_t seed = 0;
  std::uint64_t total_steps = 0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  /// Velocity buffers keyed by parameter name; empty before the first step.
  std::vector<std::pair<std::string, Tensor>> velocity;
};

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  TrainState state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::byte> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::byte> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint parameters into `model` after check_params.
void load_into(CovtModel& model, const ParamStore& params);

}  // namespace covt
