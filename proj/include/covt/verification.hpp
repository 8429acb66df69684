// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "covt/nn.hpp"
#include "covt/stem.hpp"
#include "covt/tensor.hpp"
#include "covt/transformer.hpp"

namespace covt {

/// |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
/// Throws std::domain_error when f is non-finite at any probe.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

struct GradCheckReport {
  std::string op;
  std::vector<std::string> arg_names;
  std::vector<double> max_rel_error;  // per argument
  std::vector<Shape> shapes;          // per argument
  double tolerance = 0.0;
  std::uint64_t seed = 0;
  bool pass = false;
  double seconds = 0.0;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Checks the tape gradient of sum(fn(args) * R), with R a fixed random
/// tensor, against finite differences for every argument.
GradCheckReport gradcheck(const std::string& op, const TensorFn& fn, const std::vector<Tensor>& args,
                          const std::vector<std::string>& arg_names, double tolerance, std::uint64_t seed,
                          double h = 1e-5);

struct GradCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

/// Every registered case: one per differentiable op, plus layers and the
/// end-to-end micro model. Sorted by name.
const std::vector<GradCase>& gradcheck_cases();
/// Names that must have a case: differentiable_ops() plus composite layers.
std::vector<std::string> gradcheck_required();
/// Required names without a registered case.
std::vector<std::string> missing_gradcheck_cases();

/// Runs cases whose name contains `filter` (all when empty), in name order.
std::vector<GradCheckReport> run_gradcheck_suite(const std::string& filter = {}, std::uint64_t seed = 0);

/// Literal nested-loop convolution with independent geometry.
Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dSpec& spec);

/// Per-token MLP plus token-mean MLP computed with scalar loops.
/// x is [B, N, C]; returns [B, N, C].
Tensor naive_improved_mlp(const Tensor& x, const MlpWeights& local, const MlpWeights& global, Activation act);

/// Extent (in input pixels, along rows) of the nonzero input gradient of the
/// centre output pixel of each stem branch, in rate order. Uses positive
/// weights and inputs so no ReLU is inactive.
std::vector<std::size_t> probe_stem_receptive_field(const StemConfig& config);

struct DeterminismResult {
  bool identical = false;
  std::string detail;
};

/// Runs `command` `runs` times, replacing every "{out}" with a fresh
/// directory under `workdir`, then byte-compares `artifacts` (paths relative
/// to the out directory). Throws std::runtime_error when a run fails.
DeterminismResult determinism_check(const std::string& command, int runs, const std::vector<std::string>& artifacts,
                                    const std::string& workdir);

}  // namespace covt
