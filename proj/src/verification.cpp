// SPDX-License-Identifier: Apache-2.0
#include "covt/verification.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <stdexcept>

#include "covt/error.hpp"
#include "covt/model.hpp"
#include "covt/ops.hpp"
#include "covt/rng.hpp"
#include "covt/serialize.hpp"
#include "covt/stem.hpp"
#include "covt/training.hpp"

namespace covt {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  Tensor probe(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  std::vector<double> g(x.size());
  auto d = probe.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double orig = d[i];
    d[i] = orig + h;
    const double fp = f(probe);
    d[i] = orig - h;
    const double fm = f(probe);
    d[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::domain_error("finite_diff_grad: non-finite function value at element " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

GradCheckReport gradcheck(const std::string& op, const TensorFn& fn, const std::vector<Tensor>& args,
                          const std::vector<std::string>& arg_names, double tolerance, std::uint64_t seed,
                          double h) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport rep;
  rep.op = op;
  rep.arg_names = arg_names;
  rep.tolerance = tolerance;
  rep.seed = seed;

  std::vector<Tensor> plain;
  for (const auto& a : args) plain.push_back(a.detach());
  const Tensor probe_out = fn(plain);
  auto rrng = make_stream(seed, "gradcheck-weights");
  const Tensor weights = Tensor::normal(probe_out.shape(), 1.0, rrng);

  std::vector<Tensor> tracked;
  for (const auto& a : args) tracked.push_back(a.detach(true));
  {
    Tape tape;
    const Tensor loss = sum(mul(fn(tracked), weights));
    tape.backward(loss);
  }

  // Differences are taken per output element before weighting, which keeps
  // the large constant part of the loss out of the cancellation.
  auto eval = [&](std::size_t which, const Tensor& x) {
    std::vector<Tensor> in = plain;
    in[which] = x;
    return fn(in);
  };
  auto wd = weights.data();

  rep.pass = true;
  for (std::size_t i = 0; i < args.size(); ++i) {
    rep.shapes.push_back(args[i].shape());
    Tensor probe(plain[i].shape(), std::vector<double>(plain[i].data().begin(), plain[i].data().end()));
    auto pd = probe.mutable_data();
    std::vector<double> numeric(pd.size());
    for (std::size_t j = 0; j < pd.size(); ++j) {
      const double orig = pd[j];
      pd[j] = orig + h;
      const Tensor up = eval(i, probe);
      pd[j] = orig - h;
      const Tensor down = eval(i, probe);
      pd[j] = orig;
      double s = 0.0;
      for (std::size_t k = 0; k < wd.size(); ++k) s += (up.data()[k] - down.data()[k]) * wd[k];
      if (!std::isfinite(s)) throw std::domain_error("gradcheck " + op + ": non-finite output");
      numeric[j] = s / (2.0 * h);
    }
    std::vector<double> analytic(args[i].size(), 0.0);
    if (tracked[i].has_grad()) analytic.assign(tracked[i].grad().begin(), tracked[i].grad().end());
    double worst = 0.0;
    for (std::size_t j = 0; j < analytic.size(); ++j) worst = std::max(worst, relative_error(analytic[j], numeric[j]));
    rep.max_rel_error.push_back(worst);
    if (!(worst < tolerance)) rep.pass = false;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

namespace {

using Rng = std::mt19937_64;

Tensor normal(Shape s, Rng& rng, double stddev = 1.0) { return Tensor::normal(std::move(s), stddev, rng); }

// Magnitudes in [0.2, 1] with random sign, clear of the ReLU kink.
Tensor away_from_zero(Shape s, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(std::move(s), std::move(v));
}

Tensor positive(Shape s, Rng& rng) { return Tensor::uniform(std::move(s), 0.5, 2.0, rng); }

GradCase unary(std::string name, std::function<Tensor(const Tensor&)> f, std::function<Tensor(Rng&)> make) {
  return {name, [name, f, make](std::uint64_t seed) {
            auto rng = make_stream(seed, name);
            return gradcheck(name, [f](const std::vector<Tensor>& a) { return f(a[0]); }, {make(rng)}, {"x"},
                             kOpTolerance, seed);
          }};
}

GradCase binary(std::string name, std::function<Tensor(const Tensor&, const Tensor&)> f, Shape sa, Shape sb) {
  return {name, [name, f, sa, sb](std::uint64_t seed) {
            auto rng = make_stream(seed, name);
            return gradcheck(name, [f](const std::vector<Tensor>& a) { return f(a[0], a[1]); },
                             {normal(sa, rng), normal(sb, rng)}, {"a", "b"}, kOpTolerance, seed);
          }};
}

MlpWeights mlp_from(const std::vector<Tensor>& a, std::size_t at) { return {a[at], a[at + 1], a[at + 2], a[at + 3]}; }

std::vector<Tensor> mlp_args(std::size_t c, std::size_t hd, Rng& rng) {
  return {normal({c, hd}, rng, 0.4), normal({hd}, rng, 0.1), normal({hd, c}, rng, 0.4), normal({c}, rng, 0.1)};
}

// The key bias only shifts each score row by a constant, so its gradient is
// identically zero and relative error there measures roundoff alone. It is
// held fixed and checked separately.
AttentionParams attn_from(const std::vector<Tensor>& a, std::size_t at, const Tensor& bk) {
  return {a[at], a[at + 1], a[at + 2], bk, a[at + 3], a[at + 4], a[at + 5], a[at + 6]};
}

std::vector<Tensor> attn_args(std::size_t c, Rng& rng) {
  return {normal({c, c}, rng, 0.4), normal({c}, rng, 0.1), normal({c, c}, rng, 0.4), normal({c, c}, rng, 0.4),
          normal({c}, rng, 0.1),    normal({c, c}, rng, 0.4), normal({c}, rng, 0.1)};
}

const std::vector<std::string> kAttnNames{"wq", "bq", "wk", "wv", "bv", "wo", "bo"};
const std::vector<std::string> kMlpNames{"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"};

std::vector<GradCase> build_cases() {
  std::vector<GradCase> cases;
  cases.push_back(binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {2, 3, 4}, {3, 1}));
  cases.push_back(binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, {2, 3}, {1, 3}));
  cases.push_back(binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {2, 3, 4}, {4}));
  cases.push_back(binary("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, {2, 3, 4}, {4, 5}));
  cases.push_back(unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.7); },
                        [](Rng& r) { return normal({3, 4}, r); }));
  cases.push_back(unary("mul_scalar", [](const Tensor& x) { return mul_scalar(x, -1.3); },
                        [](Rng& r) { return normal({3, 4}, r); }));
  cases.push_back(unary("relu", [](const Tensor& x) { return relu(x); }, [](Rng& r) { return away_from_zero({3, 5}, r); }));
  cases.push_back(unary("gelu", [](const Tensor& x) { return gelu(x); }, [](Rng& r) { return normal({3, 5}, r); }));
  cases.push_back(unary("exp", [](const Tensor& x) { return exp(x); }, [](Rng& r) { return normal({3, 4}, r, 0.5); }));
  cases.push_back(unary("log", [](const Tensor& x) { return log(x); }, [](Rng& r) { return positive({3, 4}, r); }));
  cases.push_back(unary("reshape", [](const Tensor& x) { return reshape(x, {6, 4}); },
                        [](Rng& r) { return normal({2, 3, 4}, r); }));
  cases.push_back(unary("permute", [](const Tensor& x) { return permute(x, {2, 0, 1}); },
                        [](Rng& r) { return normal({2, 3, 4}, r); }));
  cases.push_back(unary("broadcast_to", [](const Tensor& x) { return broadcast_to(x, {2, 3, 4}); },
                        [](Rng& r) { return normal({3, 1}, r); }));
  cases.push_back(binary("concat", [](const Tensor& a, const Tensor& b) { return concat({a, b}, 1); }, {2, 3}, {2, 5}));
  cases.push_back(unary("slice", [](const Tensor& x) { return slice(x, 1, 1, 4); },
                        [](Rng& r) { return normal({4, 5}, r); }));
  cases.push_back(unary("sum", [](const Tensor& x) { return sum(x); }, [](Rng& r) { return normal({3, 4}, r); }));
  cases.push_back(unary("sum_over_axis", [](const Tensor& x) { return sum_over_axis(x, 1, false); },
                        [](Rng& r) { return normal({2, 3, 4}, r); }));
  cases.push_back(unary("mean_over_axis", [](const Tensor& x) { return mean_over_axis(x, 1, true); },
                        [](Rng& r) { return normal({2, 5, 3}, r); }));
  cases.push_back(unary("softmax", [](const Tensor& x) { return softmax(x, -1); }, [](Rng& r) { return normal({3, 5}, r); }));
  cases.push_back(unary("log_softmax", [](const Tensor& x) { return log_softmax(x, 1); },
                        [](Rng& r) { return normal({3, 5}, r); }));
  cases.push_back(unary("take_along_last",
                        [](const Tensor& x) {
                          const std::vector<std::size_t> idx{4, 0, 2, 1};
                          return take_along_last(x, idx);
                        },
                        [](Rng& r) { return normal({4, 5}, r); }));
  cases.push_back(unary("dropout",
                        [](const Tensor& x) {
                          auto rng = make_stream(99, "dropout");
                          return dropout(x, 0.3, &rng);
                        },
                        [](Rng& r) { return normal({4, 6}, r); }));

  cases.push_back({"layer_norm", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "layer_norm");
                     return gradcheck(
                         "layer_norm",
                         [](const std::vector<Tensor>& a) { return layer_norm(a[0], a[1], a[2], 1e-6); },
                         {normal({2, 3, 6}, rng), normal({6}, rng), normal({6}, rng)}, {"x", "gamma", "beta"},
                         kOpTolerance, seed);
                   }});
  cases.push_back({"conv2d", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "conv2d");
                     Conv2dSpec spec;
                     spec.in_channels = 3;
                     spec.out_channels = 4;
                     spec.kernel = {3, 3};
                     spec.stride = {2, 1};
                     spec.padding = {2, 1};
                     spec.dilation = {2, 1};
                     return gradcheck(
                         "conv2d", [spec](const std::vector<Tensor>& a) { return conv2d(a[0], a[1], a[2], spec); },
                         {normal({2, 3, 8, 8}, rng), normal({4, 3, 3, 3}, rng, 0.3), normal({4}, rng)},
                         {"x", "weight", "bias"}, kOpTolerance, seed);
                   }});
  cases.push_back({"linear", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "linear");
                     return gradcheck(
                         "linear", [](const std::vector<Tensor>& a) { return linear(a[0], a[1], a[2]); },
                         {normal({2, 3, 4}, rng), normal({4, 5}, rng), normal({5}, rng)}, {"x", "weight", "bias"},
                         kOpTolerance, seed);
                   }});
  cases.push_back({"multi_head_attention", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "multi_head_attention");
                     const AttentionSpec spec{8, 2, 0.0};
                     std::vector<Tensor> args{normal({2, 4, 8}, rng)};
                     for (auto& t : attn_args(8, rng)) args.push_back(t);
                     const Tensor bk = normal({8}, rng, 0.1);
                     std::vector<std::string> names{"x"};
                     names.insert(names.end(), kAttnNames.begin(), kAttnNames.end());
                     return gradcheck(
                         "multi_head_attention",
                         [spec, bk](const std::vector<Tensor>& a) {
                           return multi_head_attention(a[0], attn_from(a, 1, bk), spec);
                         },
                         args, names, kOpTolerance, seed);
                   }});
  cases.push_back({"original_mlp", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "original_mlp");
                     std::vector<Tensor> args{normal({2, 4, 6}, rng)};
                     for (auto& t : mlp_args(6, 12, rng)) args.push_back(t);
                     std::vector<std::string> names{"x"};
                     names.insert(names.end(), kMlpNames.begin(), kMlpNames.end());
                     return gradcheck(
                         "original_mlp",
                         [](const std::vector<Tensor>& a) { return original_mlp(a[0], mlp_from(a, 1), Activation::gelu); },
                         args, names, kOpTolerance, seed);
                   }});
  cases.push_back({"improved_mlp", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "improved_mlp");
                     std::vector<Tensor> args{normal({2, 4, 6}, rng)};
                     for (auto& t : mlp_args(6, 12, rng)) args.push_back(t);
                     std::vector<std::string> names{"x"};
                     names.insert(names.end(), kMlpNames.begin(), kMlpNames.end());
                     return gradcheck(
                         "improved_mlp",
                         [](const std::vector<Tensor>& a) {
                           return improved_mlp(a[0], MlpParams{mlp_from(a, 1), std::nullopt}, Activation::gelu);
                         },
                         args, names, kOpTolerance, seed);
                   }});
  cases.push_back({"improved_mlp.unshared", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "improved_mlp.unshared");
                     std::vector<Tensor> args{normal({2, 4, 6}, rng)};
                     for (auto& t : mlp_args(6, 12, rng)) args.push_back(t);
                     for (auto& t : mlp_args(6, 12, rng)) args.push_back(t);
                     std::vector<std::string> names{"x"};
                     for (const char* p : {"local.", "global."})
                       for (const auto& n : kMlpNames) names.push_back(p + n);
                     return gradcheck(
                         "improved_mlp.unshared",
                         [](const std::vector<Tensor>& a) {
                           return improved_mlp(a[0], MlpParams{mlp_from(a, 1), mlp_from(a, 5)}, Activation::gelu);
                         },
                         args, names, kOpTolerance, seed);
                   }});
  cases.push_back({"encoder_block", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "encoder_block");
                     EncoderConfig cfg;
                     cfg.depth = 1;
                     cfg.embed_dim = 8;
                     cfg.num_heads = 2;
                     cfg.mlp_ratio = 2.0;
                     std::vector<Tensor> args{normal({2, 4, 8}, rng), Tensor::uniform({8}, 0.5, 1.5, rng),
                                              normal({8}, rng, 0.1)};
                     for (auto& t : attn_args(8, rng)) args.push_back(t);
                     args.push_back(Tensor::uniform({8}, 0.5, 1.5, rng));
                     args.push_back(normal({8}, rng, 0.1));
                     for (auto& t : mlp_args(8, 16, rng)) args.push_back(t);
                     std::vector<std::string> names{"x", "norm1.weight", "norm1.bias"};
                     for (const auto& n : kAttnNames) names.push_back("attn." + n);
                     names.insert(names.end(), {"norm2.weight", "norm2.bias"});
                     for (const auto& n : kMlpNames) names.push_back("mlp." + n);
                     const Tensor bk = normal({8}, rng, 0.1);
                     return gradcheck(
                         "encoder_block",
                         [cfg, bk](const std::vector<Tensor>& a) {
                           BlockParams p{a[1], a[2], attn_from(a, 3, bk), a[10], a[11], {mlp_from(a, 12), std::nullopt}};
                           return encoder_block(a[0], p, cfg);
                         },
                         args, names, kOpTolerance, seed);
                   }});
  cases.push_back({"tokenize", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "tokenize");
                     return gradcheck(
                         "tokenize",
                         [](const std::vector<Tensor>& a) { return tokenize(a[0], {a[1], a[2], a[3], a[4]}, 4); },
                         {normal({2, 4, 8, 8}, rng), normal({6, 4, 4, 4}, rng, 0.2), normal({6}, rng),
                          normal({1, 1, 6}, rng), normal({1, 5, 6}, rng)},
                         {"fmap", "proj.weight", "proj.bias", "cls_token", "pos_embed"}, kOpTolerance, seed);
                   }});
  cases.push_back({"stem_forward", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "stem_forward");
                     StemConfig cfg;
                     cfg.stem_channels = 3;
                     cfg.branch_channels = 2;
                     std::vector<Tensor> args{normal({1, 3, 12, 12}, rng), normal({3, 3, 7, 7}, rng, 0.15),
                                              normal({3}, rng, 0.1)};
                     std::vector<std::string> names{"x", "conv.weight", "conv.bias"};
                     for (std::size_t r : cfg.rates) {
                       args.push_back(normal({2, 3, 3, 3}, rng, 0.3));
                       args.push_back(normal({2}, rng, 0.1));
                       names.push_back("branch" + std::to_string(r) + ".weight");
                       names.push_back("branch" + std::to_string(r) + ".bias");
                     }
                     return gradcheck(
                         "stem_forward",
                         [cfg](const std::vector<Tensor>& a) {
                           StemParams p{a[1], a[2], {}, {}};
                           for (std::size_t i = 0; i < cfg.rates.size(); ++i) {
                             p.branch_weight.push_back(a[3 + 2 * i]);
                             p.branch_bias.push_back(a[4 + 2 * i]);
                           }
                           return stem_forward(a[0], p, cfg);
                         },
                         args, names, kOpTolerance, seed);
                   }});
  cases.push_back({"cross_entropy_soft", [](std::uint64_t seed) {
                     auto rng = make_stream(seed, "cross_entropy_soft");
                     const Tensor labels({4, 3}, {0.2, 0.5, 0.3, 1, 0, 0, 0, 0.25, 0.75, 0.5, 0.5, 0});
                     return gradcheck(
                         "cross_entropy_soft",
                         [labels](const std::vector<Tensor>& a) { return cross_entropy_soft(a[0], labels); },
                         {normal({4, 3}, rng)}, {"logits"}, kOpTolerance, seed);
                   }});
  cases.push_back({"model.covt-nano", [](std::uint64_t seed) {
                     const ModelConfig cfg = ModelConfig::preset("covt-nano");
                     auto init = make_stream(seed, "init");
                     const ParamStore store = init_params(cfg, init);
                     auto rng = make_stream(seed, "model.covt-nano");
                     const Tensor images = normal({2, 3, cfg.image_height, cfg.image_width}, rng);
                     std::vector<Tensor> args{images};
                     std::vector<std::string> names{"images"};
                     for (const auto& [name, t] : store.entries()) {
                       args.push_back(t.detach());
                       names.push_back(name);
                     }
                     return gradcheck(
                         "model.covt-nano",
                         [cfg, names](const std::vector<Tensor>& a) {
                           ParamStore p;
                           for (std::size_t i = 1; i < a.size(); ++i) p.add(names[i], a[i]);
                           const CovtModel model(cfg, std::move(p));
                           return model.forward(a[0]);
                         },
                         args, names, kEndToEndTolerance, seed);
                   }});
  std::sort(cases.begin(), cases.end(), [](const GradCase& a, const GradCase& b) { return a.name < b.name; });
  return cases;
}

}  // namespace

const std::vector<GradCase>& gradcheck_cases() {
  static const std::vector<GradCase> cases = build_cases();
  return cases;
}

std::vector<std::string> gradcheck_required() {
  std::vector<std::string> out = differentiable_ops();
  for (const char* layer : {"linear", "multi_head_attention", "original_mlp", "improved_mlp", "encoder_block",
                            "tokenize", "stem_forward", "cross_entropy_soft", "model.covt-nano"}) {
    out.emplace_back(layer);
  }
  return out;
}

std::vector<std::string> missing_gradcheck_cases() {
  std::vector<std::string> missing;
  const auto& cases = gradcheck_cases();
  for (const auto& name : gradcheck_required()) {
    const bool found = std::any_of(cases.begin(), cases.end(), [&](const GradCase& c) { return c.name == name; });
    if (!found) missing.push_back(name);
  }
  return missing;
}

std::vector<GradCheckReport> run_gradcheck_suite(const std::string& filter, std::uint64_t seed) {
  std::vector<GradCheckReport> out;
  for (const auto& c : gradcheck_cases()) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    out.push_back(c.run(seed));
  }
  return out;
}

Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dSpec& spec) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1) throw ShapeError("naive_conv2d: bad ranks");
  const long B = static_cast<long>(x.dim(0)), C = static_cast<long>(x.dim(1));
  const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
  const long O = static_cast<long>(w.dim(0)), KH = static_cast<long>(w.dim(2)), KW = static_cast<long>(w.dim(3));
  if (static_cast<long>(w.dim(1)) != C || static_cast<long>(b.dim(0)) != O) {
    throw ShapeError("naive_conv2d: weight " + to_string(w.shape()) + " does not fit input " + to_string(x.shape()));
  }
  const long sh = static_cast<long>(spec.stride[0]), sw = static_cast<long>(spec.stride[1]);
  const long ph = static_cast<long>(spec.padding[0]), pw = static_cast<long>(spec.padding[1]);
  const long dh = static_cast<long>(spec.dilation[0]), dw = static_cast<long>(spec.dilation[1]);
  if (sh < 1 || sw < 1 || dh < 1 || dw < 1) throw ShapeError("naive_conv2d: stride and dilation must be >= 1");
  const long OH = (H + 2 * ph - dh * (KH - 1) - 1) / sh + 1;
  const long OW = (W + 2 * pw - dw * (KW - 1) - 1) / sw + 1;
  if (H + 2 * ph - dh * (KH - 1) - 1 < 0 || W + 2 * pw - dw * (KW - 1) - 1 < 0) {
    throw ShapeError("naive_conv2d: kernel larger than padded input");
  }
  const auto xd = x.data();
  const auto wd = w.data();
  const auto bd = b.data();
  std::vector<double> out(static_cast<std::size_t>(B * O * OH * OW));
  for (long n = 0; n < B; ++n)
    for (long o = 0; o < O; ++o)
      for (long i = 0; i < OH; ++i)
        for (long j = 0; j < OW; ++j) {
          double acc = bd[static_cast<std::size_t>(o)];
          for (long c = 0; c < C; ++c)
            for (long u = 0; u < KH; ++u)
              for (long v = 0; v < KW; ++v) {
                const long r = i * sh - ph + u * dh;
                const long q = j * sw - pw + v * dw;
                if (r < 0 || r >= H || q < 0 || q >= W) continue;
                acc += wd[static_cast<std::size_t>(((o * C + c) * KH + u) * KW + v)] *
                       xd[static_cast<std::size_t>(((n * C + c) * H + r) * W + q)];
              }
          out[static_cast<std::size_t>(((n * O + o) * OH + i) * OW + j)] = acc;
        }
  return Tensor({static_cast<std::size_t>(B), static_cast<std::size_t>(O), static_cast<std::size_t>(OH),
                 static_cast<std::size_t>(OW)},
                std::move(out));
}

namespace {

double scalar_act(double v, Activation act) {
  switch (act) {
    case Activation::gelu:
      return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    case Activation::relu:
      return v > 0.0 ? v : 0.0;
    case Activation::identity:
      return v;
  }
  return v;
}

std::vector<double> scalar_mlp(const std::vector<double>& in, const MlpWeights& m, Activation act) {
  const std::size_t c = m.fc1_weight.dim(0);
  const std::size_t hd = m.fc1_weight.dim(1);
  const std::size_t co = m.fc2_weight.dim(1);
  std::vector<double> h(hd);
  for (std::size_t j = 0; j < hd; ++j) {
    double s = m.fc1_bias.data()[j];
    for (std::size_t k = 0; k < c; ++k) s += in[k] * m.fc1_weight.data()[k * hd + j];
    h[j] = scalar_act(s, act);
  }
  std::vector<double> out(co);
  for (std::size_t j = 0; j < co; ++j) {
    double s = m.fc2_bias.data()[j];
    for (std::size_t k = 0; k < hd; ++k) s += h[k] * m.fc2_weight.data()[k * co + j];
    out[j] = s;
  }
  return out;
}

}  // namespace

Tensor naive_improved_mlp(const Tensor& x, const MlpWeights& local, const MlpWeights& global, Activation act) {
  if (x.rank() != 3) throw ShapeError("naive_improved_mlp: input must be [B,N,C]");
  const std::size_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  std::vector<double> out(B * N * C);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> mean(C, 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) mean[c] += x.data()[(b * N + n) * C + c];
    for (auto& m : mean) m /= static_cast<double>(N);
    const auto g = scalar_mlp(mean, global, act);
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<double> tok(x.data().begin() + static_cast<std::ptrdiff_t>((b * N + n) * C),
                              x.data().begin() + static_cast<std::ptrdiff_t>((b * N + n + 1) * C));
      const auto l = scalar_mlp(tok, local, act);
      for (std::size_t c = 0; c < C; ++c) out[(b * N + n) * C + c] = l[c] + g[c];
    }
  }
  return Tensor({B, N, C}, std::move(out));
}

std::vector<std::size_t> probe_stem_receptive_field(const StemConfig& config) {
  StemConfig cfg = config;
  cfg.stem_channels = 2;
  cfg.branch_channels = 1;
  cfg.activation = Activation::relu;
  cfg.validate();
  const auto analytic = stem_receptive_field(cfg);
  const std::size_t widest = *std::max_element(analytic.begin(), analytic.end());
  const std::size_t s = cfg.stem_stride;
  const std::size_t size = s * (widest / s + 4);

  auto rng = make_stream(0, "rf-probe");
  auto pos = [&](Shape shape) { return Tensor::uniform(std::move(shape), 0.1, 1.0, rng); };
  StemParams p{pos(cfg.stem_conv().weight_shape()), Tensor::zeros({cfg.stem_channels}), {}, {}};
  for (std::size_t r : cfg.rates) {
    p.branch_weight.push_back(pos(cfg.branch_conv(r).weight_shape()));
    p.branch_bias.push_back(Tensor::zeros({cfg.branch_channels}));
  }
  const Tensor image = pos({1, cfg.in_channels, size, size});
  const std::size_t grid = size / s;
  const std::size_t centre = grid / 2;

  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < cfg.rates.size(); ++b) {
    const Tensor x = image.detach(true);
    {
      Tape tape;
      const Tensor y = stem_forward(x, p, cfg);
      std::vector<double> mask(y.size(), 0.0);
      mask[(b * grid + centre) * grid + centre] = 1.0;
      tape.backward(sum(mul(y, Tensor(y.shape(), std::move(mask)))));
    }
    std::size_t lo = size;
    std::size_t hi = 0;
    const auto g = x.grad();
    for (std::size_t c = 0; c < cfg.in_channels; ++c)
      for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j)
          if (g[(c * size + i) * size + j] != 0.0) {
            lo = std::min(lo, i);
            hi = std::max(hi, i);
          }
    out.push_back(lo > hi ? 0 : hi - lo + 1);
  }
  return out;
}

DeterminismResult determinism_check(const std::string& command, int runs, const std::vector<std::string>& artifacts,
                                    const std::string& workdir) {
  namespace fs = std::filesystem;
  if (runs < 2) throw std::invalid_argument("determinism_check: need at least two runs");
  std::vector<fs::path> dirs;
  for (int r = 0; r < runs; ++r) {
    const fs::path dir = fs::path(workdir) / ("run" + std::to_string(r));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::string cmd = command;
    for (auto pos = cmd.find("{out}"); pos != std::string::npos; pos = cmd.find("{out}", pos)) {
      cmd.replace(pos, 5, dir.string());
    }
    const int rc = std::system(cmd.c_str());
    if (rc != 0) throw std::runtime_error("determinism_check: run " + std::to_string(r) + " failed: " + cmd);
    dirs.push_back(dir);
  }
  for (const auto& a : artifacts) {
    const auto ref = read_file(dirs[0] / a);
    for (int r = 1; r < runs; ++r) {
      if (read_file(dirs[static_cast<std::size_t>(r)] / a) != ref) {
        return {false, a + " differs between run 0 and run " + std::to_string(r)};
      }
    }
  }
  return {true, std::to_string(runs) + " runs identical over " + std::to_string(artifacts.size()) + " artifacts"};
}

}  // namespace covt
