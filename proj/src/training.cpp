// SPDX-License-Identifier: Apache-2.0
#include "covt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "covt/error.hpp"
#include "covt/ops.hpp"
#include "covt/rng.hpp"
#include "json.hpp"

namespace covt {

void ScheduleConfig::validate() const {
  if (!(lr_start >= lr_end) || !(lr_end >= 0.0)) {
    throw ConfigError("schedule: need lr_start >= lr_end >= 0, got " + std::to_string(lr_start) + " and " +
                      std::to_string(lr_end));
  }
  if (total_steps < 1) throw ConfigError("schedule: total_steps must be >= 1");
  if (warmup_steps > total_steps) throw ConfigError("schedule: warmup_steps exceeds total_steps");
}

double cosine_lr(std::uint64_t step, const ScheduleConfig& c) {
  c.validate();
  if (step > c.total_steps) {
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(c.total_steps) +
                      "]");
  }
  if (step < c.warmup_steps) {
    return c.lr_start * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  }
  const std::uint64_t t = step - c.warmup_steps;
  const std::uint64_t span = c.total_steps - c.warmup_steps;
  if (t == span) return c.lr_end;
  if (t == 0) return c.lr_start;
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(span);
  return c.lr_end + 0.5 * (c.lr_start - c.lr_end) * (1.0 + std::cos(phase));
}

void sgd_step(ParamStore& params, OptimizerState& state, double lr) {
  auto& entries = params.entries();
  if (state.velocity.empty()) {
    for (const auto& [name, p] : entries) state.velocity.emplace_back(name, Tensor::zeros(p.shape()));
  }
  if (state.velocity.size() != entries.size()) throw TrainingError("sgd: velocity count does not match parameters");
  const double mu = state.config.momentum;
  const double wd = state.config.weight_decay;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, p] = entries[i];
    auto& [vname, v] = state.velocity[i];
    if (vname != name || v.shape() != p.shape()) {
      throw TrainingError("sgd: velocity '" + vname + "' does not match parameter '" + name + "'");
    }
    if (!p.has_grad()) throw TrainingError("sgd: parameter '" + name + "' has no gradient");
    auto g = p.grad();
    auto pd = p.mutable_data();
    auto vd = v.mutable_data();
    for (std::size_t j = 0; j < pd.size(); ++j) {
      double gj = g[j];
      if (wd != 0.0) gj += wd * pd[j];
      vd[j] = mu * vd[j] + gj;
      pd[j] -= lr * vd[j];
    }
  }
}

void MixupConfig::validate() const {
  if (enabled && !(alpha > 0.0)) throw ConfigError("mixup: alpha must be positive");
}

double sample_mixup_lambda(double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw ConfigError("mixup: alpha must be positive");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  if (a + b == 0.0) return 0.5;
  return a / (a + b);
}

std::pair<Tensor, Tensor> mixup_batch(const Tensor& x1, const Tensor& x2, const Tensor& y1, const Tensor& y2,
                                      double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("mixup: lambda " + std::to_string(lambda) + " not in [0, 1]");
  if (x1.shape() != x2.shape()) {
    throw ShapeError("mixup: image shapes " + to_string(x1.shape()) + " vs " + to_string(x2.shape()));
  }
  if (y1.shape() != y2.shape() || y1.rank() != 2 || y1.dim(0) != x1.dim(0)) {
    throw ShapeError("mixup: label shapes " + to_string(y1.shape()) + " vs " + to_string(y2.shape()));
  }
  auto blend = [lambda](const Tensor& a, const Tensor& b) {
    return add(mul_scalar(a, lambda), mul_scalar(b, 1.0 - lambda));
  };
  return {blend(x1, x2), blend(y1, y2)};
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
  std::vector<double> out(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw ShapeError("one_hot: label " + std::to_string(labels[i]) + " >= " + std::to_string(num_classes));
    }
    out[i * num_classes + labels[i]] = 1.0;
  }
  return Tensor({labels.size(), num_classes}, std::move(out));
}

Tensor cross_entropy_soft(const Tensor& logits, const Tensor& soft_labels) {
  if (logits.rank() != 2 || logits.shape() != soft_labels.shape()) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs labels " +
                     to_string(soft_labels.shape()));
  }
  const std::size_t b = logits.dim(0);
  const std::size_t k = logits.dim(1);
  auto y = soft_labels.data();
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (y[i * k + j] < 0.0) throw ShapeError("cross_entropy: negative soft label in row " + std::to_string(i));
      s += y[i * k + j];
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw ShapeError("cross_entropy: soft labels of row " + std::to_string(i) + " sum to " + std::to_string(s));
    }
  }
  const Tensor picked = sum(mul(soft_labels, log_softmax(logits, 1)));
  return mul_scalar(picked, -1.0 / static_cast<double>(b));
}

EvalResult topk_metrics(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("evaluate: logits " + to_string(logits.shape()) + " for " + std::to_string(labels.size()) +
                     " labels");
  }
  if (labels.empty()) throw DataError("evaluate: empty dataset");
  const std::size_t b = logits.dim(0);
  const std::size_t k = logits.dim(1);
  EvalResult r;
  r.count = b;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t hit1 = 0;
  std::size_t hit5 = 0;
  auto z = logits.data();
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = z.data() + i * k;
    const std::size_t t = labels[i];
    if (t >= k) throw ShapeError("evaluate: label " + std::to_string(t) + " >= " + std::to_string(k));
    // Rank of the true class: classes strictly above it, ties to the lower index.
    std::size_t rank = 0;
    for (std::size_t j = 0; j < k; ++j)
      if (row[j] > row[t] || (row[j] == row[t] && j < t)) ++rank;
    std::size_t pred = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[pred]) pred = j;
    ++r.confusion[t][pred];
    if (rank < 1) ++hit1;
    if (rank < std::min<std::size_t>(5, k)) ++hit5;
  }
  r.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(b);
  r.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(b);
  return r;
}

EvalResult evaluate(const CovtModel& model, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");
  const std::size_t k = model.config().num_classes;
  std::vector<double> all;
  all.reserve(data.size() * k);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::span<const std::size_t> batch(idx.data() + start, end - start);
    const Tensor logits = model.forward(data.images(batch));
    all.insert(all.end(), logits.data().begin(), logits.data().end());
  }
  return topk_metrics(Tensor({data.size(), k}, std::move(all)), data.labels(idx));
}

std::string to_json_line(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["lr_last"] = m.lr_last;
  j["train_loss"] = m.train_loss;
  j["train_top1"] = m.train_top1;
  j["val_top1"] = m.val_top1 ? nlohmann::ordered_json(*m.val_top1) : nlohmann::ordered_json(nullptr);
  j["val_top5"] = m.val_top5 ? nlohmann::ordered_json(*m.val_top5) : nlohmann::ordered_json(nullptr);
  j["wall_ms"] = m.wall_ms;
  return j.dump();
}

namespace {

double grad_norm(const ParamStore& params) {
  double s = 0.0;
  for (const auto& [_, p] : params.entries())
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

OptimizerState restore_optimizer(const ParamStore& params, const TrainConfig& config, const TrainState& state) {
  OptimizerState opt;
  opt.config = config.sgd;
  if (state.velocity.empty()) return opt;
  const auto& entries = params.entries();
  if (state.velocity.size() != entries.size()) throw TrainingError("resume: velocity count does not match model");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, v] = state.velocity[i];
    if (name != entries[i].first || v.shape() != entries[i].second.shape()) {
      throw TrainingError("resume: velocity '" + name + "' does not match parameter '" + entries[i].first + "'");
    }
    opt.velocity.emplace_back(name, v.detach());
  }
  return opt;
}

}  // namespace

TrainState train(CovtModel& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& config,
                 TrainState state, const TrainHooks& hooks) {
  if (config.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (train_set.size() < config.batch_size) {
    throw DataError("train: " + std::to_string(train_set.size()) + " samples is less than one batch of " +
                    std::to_string(config.batch_size));
  }
  if (train_set.num_classes() != model.config().num_classes) {
    throw DataError("train: dataset has " + std::to_string(train_set.num_classes()) + " classes, model expects " +
                    std::to_string(model.config().num_classes));
  }
  config.mixup.validate();
  if (config.fixed_lambda && !(*config.fixed_lambda >= 0.0 && *config.fixed_lambda <= 1.0)) {
    throw ConfigError("train: fixed lambda must be in [0, 1]");
  }
  if (state.epoch > config.epochs) throw ConfigError("train: checkpoint is past the requested epoch count");

  const std::size_t n = train_set.size();
  const std::size_t b = config.batch_size;
  const std::size_t steps_per_epoch = (n + b - 1) / b;
  ScheduleConfig sched{config.lr_start, config.lr_end, std::max<std::uint64_t>(1, config.epochs * steps_per_epoch),
                       config.warmup_steps};
  sched.validate();

  state.seed = config.seed;
  state.total_steps = sched.total_steps;
  state.momentum = config.sgd.momentum;
  state.weight_decay = config.sgd.weight_decay;
  OptimizerState opt = restore_optimizer(model.params(), config, state);
  const std::size_t k = model.config().num_classes;
  const bool mixing = config.mixup.enabled || config.fixed_lambda.has_value();
  const bool use_dropout = model.config().encoder.dropout > 0.0;

  for (std::uint64_t e = state.epoch; e < config.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    auto shuffle_rng = make_stream(config.seed, "shuffle", e);
    std::shuffle(perm.begin(), perm.end(), shuffle_rng);
    auto mixup_rng = make_stream(config.seed, "mixup", e);
    auto dropout_rng = make_stream(config.seed, "dropout", e);

    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t begin = s * b;
      const std::size_t end = std::min(n, begin + b);
      std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                                   perm.begin() + static_cast<std::ptrdiff_t>(end));
      Tensor x = train_set.images(idx);
      Tensor y = one_hot(train_set.labels(idx), k);
      if (mixing) {
        const double lambda = config.fixed_lambda ? *config.fixed_lambda
                                                  : sample_mixup_lambda(config.mixup.alpha, mixup_rng);
        std::vector<std::size_t> rev(idx.rbegin(), idx.rend());
        std::tie(x, y) = mixup_batch(x, train_set.images(rev), y, one_hot(train_set.labels(rev), k), lambda);
      }
      lr = cosine_lr(state.step, sched);
      model.params().clear_grad();
      double loss_value = 0.0;
      {
        Tape tape;
        const Tensor logits = model.forward(x, use_dropout ? &dropout_rng : nullptr);
        const Tensor loss = cross_entropy_soft(logits, y);
        loss_value = loss.item();
        tape.backward(loss);
      }
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << state.step << " (epoch " << e + 1 << ", lr " << lr << ", grad-norm "
            << grad_norm(model.params()) << ")";
        throw TrainingError(msg.str());
      }
      sgd_step(model.params(), opt, lr);
      ++state.step;
      loss_sum += loss_value * static_cast<double>(idx.size());
    }

    EpochMetrics m;
    m.epoch = e + 1;
    m.lr_last = lr;
    m.train_loss = loss_sum / static_cast<double>(n);
    m.train_top1 = evaluate(model, train_set, b).top1;
    if (val_set && !val_set->empty()) {
      const auto r = evaluate(model, *val_set, b);
      m.val_top1 = r.top1;
      m.val_top5 = r.top5;
    }
    if (config.timing) {
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    state.epoch = e + 1;
    state.velocity.clear();
    for (const auto& [name, v] : opt.velocity) state.velocity.emplace_back(name, v.detach());
    if (hooks.on_epoch) hooks.on_epoch(m);
    if (hooks.on_state) hooks.on_state(state);
  }
  state.velocity = opt.velocity;
  return state;
}

}  // namespace covt
