// SPDX-License-Identifier: Apache-2.0
#include "covt/stem.hpp"

#include "covt/error.hpp"
#include "covt/ops.hpp"

namespace covt {

Conv2dSpec StemConfig::stem_conv() const {
  Conv2dSpec s;
  s.in_channels = in_channels;
  s.out_channels = stem_channels;
  s.kernel = {stem_kernel, stem_kernel};
  s.stride = {stem_stride, stem_stride};
  s.padding = {stem_kernel / 2, stem_kernel / 2};
  return s;
}

Conv2dSpec StemConfig::branch_conv(std::size_t rate) const {
  Conv2dSpec s;
  s.in_channels = stem_channels;
  s.out_channels = branch_channels;
  s.kernel = branch_kernel;
  s.dilation = {rate, rate};
  s.padding = {rate * (branch_kernel[0] - 1) / 2, rate * (branch_kernel[1] - 1) / 2};
  return s;
}

void StemConfig::validate() const {
  if (in_channels == 0 || stem_channels == 0 || branch_channels == 0 || stem_stride == 0) {
    throw ConfigError("stem: channel counts and stride must be positive");
  }
  if (stem_kernel % 2 == 0 || branch_kernel[0] % 2 == 0 || branch_kernel[1] % 2 == 0) {
    throw ConfigError("stem: kernels must be odd to keep spatial alignment");
  }
  if (rates.empty()) throw ConfigError("stem: at least one atrous rate is required");
  for (auto r : rates) {
    if (r == 0) throw ConfigError("stem: atrous rates must be >= 1");
  }
}

Tensor stem_forward(const Tensor& x, const StemParams& params, const StemConfig& config) {
  config.validate();
  if (x.rank() != 4 || x.dim(1) != config.in_channels) {
    throw ShapeError("stem: input must be [B," + std::to_string(config.in_channels) + ",H,W], got " +
                     to_string(x.shape()));
  }
  if (x.dim(2) % config.stem_stride != 0 || x.dim(3) % config.stem_stride != 0) {
    throw ShapeError("stem: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                     " not divisible by stem stride " + std::to_string(config.stem_stride));
  }
  if (params.branch_weight.size() != config.rates.size() || params.branch_bias.size() != config.rates.size()) {
    throw ShapeError("stem: expected " + std::to_string(config.rates.size()) + " branch parameter sets");
  }
  const Tensor base = activate(conv2d(x, params.conv_weight, params.conv_bias, config.stem_conv()), config.activation);

  std::vector<Tensor> branches;
  branches.reserve(config.rates.size());
  for (std::size_t i = 0; i < config.rates.size(); ++i) {
    branches.push_back(activate(
        conv2d(base, params.branch_weight[i], params.branch_bias[i], config.branch_conv(config.rates[i])),
        config.activation));
    if (branches.back().shape() != branches.front().shape()) {
      throw ShapeError("stem: branch " + std::to_string(i + 1) + " shape " + to_string(branches.back().shape()) +
                       " differs from branch 1 shape " + to_string(branches.front().shape()));
    }
  }
  return concat(branches, 1);
}

std::vector<std::size_t> stem_receptive_field(const StemConfig& config) {
  std::vector<std::size_t> rf;
  rf.reserve(config.rates.size());
  for (auto r : config.rates) {
    rf.push_back(config.stem_kernel + r * (config.branch_kernel[0] - 1) * config.stem_stride);
  }
  return rf;
}

}  // namespace covt
