// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "covt/data.hpp"
#include "covt/model.hpp"
#include "covt/tensor.hpp"

namespace covt {

struct ScheduleConfig {
  double lr_start = 0.1;
  double lr_end = 1e-5;
  std::uint64_t total_steps = 1;
  /// Linear ramp from 0 to lr_start before the cosine phase.
  std::uint64_t warmup_steps = 0;

  void validate() const;
};

/// lr_end + (lr_start - lr_end)(1 + cos(pi t / T)) / 2, with the endpoints
/// returned exactly. Throws ConfigError when step > total_steps.
double cosine_lr(std::uint64_t step, const ScheduleConfig& config);

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 0.0;
};

struct OptimizerState {
  SgdConfig config;
  /// Zero-initialized on first use, one per parameter in store order.
  std::vector<std::pair<std::string, Tensor>> velocity;
};

/// v <- mu v + g (+ wd p); p <- p - lr v. Gradients are read from the
/// parameters; a parameter without one is a TrainingError.
void sgd_step(ParamStore& params, OptimizerState& state, double lr);

struct MixupConfig {
  bool enabled = false;
  double alpha = 0.8;

  void validate() const;
};

/// Draws lambda ~ Beta(alpha, alpha).
double sample_mixup_lambda(double alpha, std::mt19937_64& rng);

/// (lambda x1 + (1 - lambda) x2, lambda y1 + (1 - lambda) y2).
std::pair<Tensor, Tensor> mixup_batch(const Tensor& x1, const Tensor& x2, const Tensor& y1, const Tensor& y2,
                                      double lambda);

/// [B] labels -> [B, K] one-hot rows.
Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes);

/// Batch mean of -sum_k y_k log softmax(logits)_k.
Tensor cross_entropy_soft(const Tensor& logits, const Tensor& soft_labels);

struct EvalResult {
  double top1 = 0.0;  // percent
  double top5 = 0.0;  // percent
  std::size_t count = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

/// Metrics of precomputed logits [B, K]. Ties rank the lower class index
/// first; k is clipped to K.
EvalResult topk_metrics(const Tensor& logits, std::span<const std::size_t> labels);

/// Forward passes without recording, in batches of `batch_size`.
EvalResult evaluate(const CovtModel& model, const Dataset& data, std::size_t batch_size = 64);

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr_start = 0.1;
  double lr_end = 1e-5;
  std::uint64_t warmup_steps = 0;
  SgdConfig sgd;
  MixupConfig mixup;
  /// Uses this lambda for every batch instead of sampling.
  std::optional<double> fixed_lambda;
  std::uint64_t seed = 0;
  /// Measure wall time per epoch; otherwise wall_ms is logged as 0.
  bool timing = false;
};

struct EpochMetrics {
  std::uint64_t epoch = 0;  // 1-based
  double lr_last = 0.0;
  double train_loss = 0.0;
  double train_top1 = 0.0;
  std::optional<double> val_top1;
  std::optional<double> val_top5;
  double wall_ms = 0.0;
};

/// One JSON object, no trailing newline.
std::string to_json_line(const EpochMetrics& m);

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  /// Called after each epoch with the state a checkpoint should persist.
  std::function<void(const TrainState&)> on_state;
};

/// Runs epochs state.epoch+1 .. config.epochs. Every epoch reshuffles with
/// the "shuffle" stream and draws lambdas from the "mixup" stream, both
/// indexed by epoch, so a resumed run continues the same sequence.
TrainState train(CovtModel& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& config,
                 TrainState state = {}, const TrainHooks& hooks = {});

}  // namespace covt
