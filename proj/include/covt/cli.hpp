// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "covt/data.hpp"
#include "covt/model.hpp"
#include "covt/training.hpp"

namespace covt {

struct DataConfig {
  /// Class-folder root; empty selects the synthetic set.
  std::string train;
  /// Separate validation root; empty splits `val_fraction` off the training set.
  std::string val;
  double val_fraction = 0.2;
  std::size_t synth_per_class = 20;
  double synth_noise = 0.1;
  Normalization norm;
};

/// Everything a `train` invocation needs, one-to-one with the config file.
struct RunConfig {
  std::string preset = "none";
  std::uint64_t seed = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::string out = "runs/latest";
  std::size_t checkpoint_every = 0;
  bool timing = false;
  std::string resume;

  ModelConfig model = ModelConfig::preset("covt-micro");

  double lr_start = 0.1;
  double lr_end = 1e-5;
  std::uint64_t warmup_steps = 0;
  SgdConfig sgd;

  MixupConfig mixup;
  std::optional<double> fixed_lambda;

  DataConfig data;

  TrainConfig train_config() const;
  void validate() const;
};

/// Replaces the model with a named variant and resets the variant's mixup
/// default (on for covt-s, off otherwise).
void apply_variant(RunConfig& config, std::string_view variant);
/// "covid-xray" (batch 64) or "covid5k" (batch 128), both 100 epochs; "none"
/// leaves the config alone.
void apply_preset(RunConfig& config, std::string_view preset);

/// Sets one `section.key` from its textual config-file value. Throws
/// ConfigError for unknown keys or ill-typed values.
void apply_setting(RunConfig& config, std::string_view section, std::string_view key, std::string_view value);

/// Parses the config-file text onto `base`. `[run] preset` and
/// `[model] variant` are applied first, then the remaining keys in order.
RunConfig parse_run_config(std::string_view text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
/// Writes every field; parse_run_config(write_run_config(c)) == c.
std::string write_run_config(const RunConfig& config);

/// Entry point behind the `covt` binary. Returns 0 on success, 1 on usage or
/// configuration errors, 2 on runtime failures.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace covt
