// SPDX-License-Identifier: Apache-2.0
#include "covt/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "covt/error.hpp"
#include "covt/rng.hpp"
#include "covt/verification.hpp"
#include "json.hpp"

namespace covt {

namespace fs = std::filesystem;

namespace {

struct TrainFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::string variant;
  std::string preset;
  std::string data;
  std::string val_data;
  std::string out;
  std::optional<bool> mixup;
  std::optional<double> fixed_lambda;
  std::string resume;
  std::optional<std::size_t> checkpoint_every;
  std::optional<std::size_t> stem_stride;
  bool no_global_branch = false;
  bool timing = false;
  std::vector<std::string> sets;
};

RunConfig resolve(const TrainFlags& f) {
  RunConfig c;
  if (!f.config.empty()) c = load_run_config(f.config, c);
  if (!f.preset.empty()) apply_preset(c, f.preset);
  if (!f.variant.empty()) apply_variant(c, f.variant);
  if (f.seed) c.seed = *f.seed;
  if (f.epochs) c.epochs = *f.epochs;
  if (f.batch_size) c.batch_size = *f.batch_size;
  if (!f.data.empty()) c.data.train = f.data;
  if (!f.val_data.empty()) c.data.val = f.val_data;
  if (!f.out.empty()) c.out = f.out;
  if (f.mixup) c.mixup.enabled = *f.mixup;
  if (f.fixed_lambda) c.fixed_lambda = *f.fixed_lambda;
  if (!f.resume.empty()) c.resume = f.resume;
  if (f.checkpoint_every) c.checkpoint_every = *f.checkpoint_every;
  if (f.stem_stride) c.model.stem.stem_stride = *f.stem_stride;
  if (f.no_global_branch) c.model.encoder.global_branch = false;
  if (f.timing) c.timing = true;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    const auto dot = s.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("--set expects section.key=value, got '" + s + "'");
    }
    apply_setting(c, s.substr(0, dot), s.substr(dot + 1, eq - dot - 1), s.substr(eq + 1));
  }
  c.validate();
  return c;
}

struct Splits {
  Dataset train;
  std::optional<Dataset> val;
};

Dataset load_dir(const std::string& root, const RunConfig& c, std::ostream& err) {
  LoadReport report;
  Dataset d = load_image_dir(root, c.model.image_height, c.model.image_width, c.data.norm, &report);
  if (report.skipped > 0) {
    err << "warning: skipped " << report.skipped << " unreadable file(s) under " << root << "\n";
    for (const auto& w : report.warnings) err << "  " << w << "\n";
  }
  return d;
}

Splits load_splits(const RunConfig& c, std::ostream& err) {
  Dataset all;
  if (c.data.train.empty()) {
    SynthConfig s;
    s.per_class = c.data.synth_per_class;
    s.num_classes = c.model.num_classes;
    s.height = c.model.image_height;
    s.width = c.model.image_width;
    s.noise = c.data.synth_noise;
    s.seed = c.seed;
    all = synth_dataset(s);
  } else {
    all = load_dir(c.data.train, c, err);
  }
  if (!c.data.val.empty()) return {std::move(all), load_dir(c.data.val, c, err)};
  if (c.data.val_fraction > 0.0) {
    const double fr[2] = {1.0 - c.data.val_fraction, c.data.val_fraction};
    auto [train, val] = split(all, fr, stream_seed(c.seed, "split"));
    return {std::move(train), std::move(val)};
  }
  return {std::move(all), std::nullopt};
}

int cmd_train(const TrainFlags& flags, std::ostream& out, std::ostream& err) {
  RunConfig c = resolve(flags);
  Splits data = load_splits(c, err);
  if (data.train.num_classes() != c.model.num_classes) {
    c.model.num_classes = data.train.num_classes();
    c.validate();
  }
  if (data.val && data.val->class_names != data.train.class_names) {
    throw DataError("validation classes do not match training classes");
  }

  const fs::path dir(c.out);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "config.toml", std::ios::binary);
    cfg << write_run_config(c);
  }

  TrainState state;
  std::optional<CovtModel> model;
  if (!c.resume.empty()) {
    Checkpoint ck = load_checkpoint(c.resume);
    if (nlohmann::json(ck.config) != nlohmann::json(c.model)) {
      throw ConfigError("resume: checkpoint model config differs from the run config");
    }
    model.emplace(c.model, std::move(ck.params));
    state = std::move(ck.state);
  } else {
    model.emplace(c.model, c.seed);
  }

  std::ofstream metrics(dir / "metrics.jsonl", c.resume.empty() ? std::ios::binary : std::ios::binary | std::ios::app);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m) {
    metrics << to_json_line(m) << "\n";
    metrics.flush();
    err << "epoch " << m.epoch << "/" << c.epochs << "  loss " << m.train_loss << "  train_top1 " << m.train_top1;
    if (m.val_top1) err << "  val_top1 " << *m.val_top1;
    err << "\n";
  };
  hooks.on_state = [&](const TrainState& s) {
    if (c.checkpoint_every > 0 && s.epoch % c.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch%04llu.bin", static_cast<unsigned long long>(s.epoch));
      save_checkpoint(dir / name, {c.model, model->params().clone(), s});
    }
  };
  state = train(*model, data.train, data.val ? &*data.val : nullptr, c.train_config(), std::move(state), hooks);
  save_checkpoint(dir / "final.bin", {c.model, model->params().clone(), state});
  out << (dir / "final.bin").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, std::size_t batch_size, std::ostream& out,
             std::ostream& err) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const CovtModel model(ck.config, std::move(ck.params));
  Dataset data;
  RunConfig c;
  c.model = ck.config;
  if (data_dir.empty()) {
    SynthConfig s;
    s.num_classes = ck.config.num_classes;
    s.height = ck.config.image_height;
    s.width = ck.config.image_width;
    s.seed = ck.state.seed;
    data = synth_dataset(s);
  } else {
    data = load_dir(data_dir, c, err);
  }
  if (data.num_classes() != ck.config.num_classes) {
    throw DataError("dataset has " + std::to_string(data.num_classes()) + " classes, checkpoint expects " +
                    std::to_string(ck.config.num_classes));
  }
  const EvalResult r = evaluate(model, data, batch_size);
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["count"] = r.count;
  j["top1"] = r.top1;
  j["top5"] = r.top5;
  j["classes"] = data.class_names;
  j["confusion"] = r.confusion;
  out << j.dump() << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& op, bool json, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  const auto missing = missing_gradcheck_cases();
  const auto reports = run_gradcheck_suite(op, seed);
  if (reports.empty()) {
    err << "no gradcheck case matches '" << op << "'\n";
    return 1;
  }
  bool ok = missing.empty();
  for (const auto& r : reports) ok = ok && r.pass;
  if (json) {
    nlohmann::ordered_json j;
    j["pass"] = ok;
    j["missing"] = missing;
    auto& cases = j["cases"] = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
      nlohmann::ordered_json c;
      c["op"] = r.op;
      c["pass"] = r.pass;
      c["tolerance"] = r.tolerance;
      c["seed"] = r.seed;
      c["seconds"] = r.seconds;
      auto& args = c["args"] = nlohmann::ordered_json::array();
      for (std::size_t i = 0; i < r.arg_names.size(); ++i) {
        args.push_back({{"name", r.arg_names[i]}, {"shape", r.shapes[i]}, {"max_rel_error", r.max_rel_error[i]}});
      }
      cases.push_back(std::move(c));
    }
    out << j.dump(2) << "\n";
  } else {
    out << std::left << std::setw(24) << "op" << std::setw(6) << "args" << std::setw(14) << "max_rel_err"
        << std::setw(10) << "tol" << std::setw(10) << "time_s" << "status\n";
    for (const auto& r : reports) {
      const double worst = r.max_rel_error.empty() ? 0.0 : *std::max_element(r.max_rel_error.begin(), r.max_rel_error.end());
      std::ostringstream e, t, s;
      e << std::scientific << std::setprecision(2) << worst;
      t << std::scientific << std::setprecision(0) << r.tolerance;
      s << std::fixed << std::setprecision(3) << r.seconds;
      out << std::setw(24) << r.op << std::setw(6) << r.arg_names.size() << std::setw(14) << e.str() << std::setw(10)
          << t.str() << std::setw(10) << s.str() << (r.pass ? "PASS" : "FAIL") << "\n";
    }
    for (const auto& m : missing) out << "missing gradcheck case: " << m << "\n";
    out << (ok ? "all cases passed" : "gradient check FAILED") << "\n";
  }
  return ok ? 0 : 2;
}

std::size_t layout_params(const std::vector<std::pair<std::string, Shape>>& layout, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, shape] : layout)
    if (name.rfind(prefix, 0) == 0) n += numel(shape);
  return n;
}

int cmd_inspect(const RunConfig& c, bool json, std::ostream& out) {
  const ModelConfig& m = c.model;
  m.validate();
  const auto layout = param_layout(m);
  const auto g = m.feature_grid();
  const std::size_t dim = m.encoder.embed_dim;
  const std::size_t n = m.num_tokens();

  struct Row {
    std::string name;
    Shape shape;
    std::size_t params;
  };
  std::vector<Row> rows;
  rows.push_back({"input", {1, m.stem.in_channels, m.image_height, m.image_width}, 0});
  rows.push_back({"stem.conv", {1, m.stem.stem_channels, g[0], g[1]}, layout_params(layout, "stem.conv.")});
  for (std::size_t i = 0; i < m.stem.rates.size(); ++i) {
    const std::string p = "stem.branch" + std::to_string(i + 1);
    rows.push_back({p + " (rate " + std::to_string(m.stem.rates[i]) + ")", {1, m.stem.branch_channels, g[0], g[1]},
                    layout_params(layout, p + ".")});
  }
  rows.push_back({"stem.concat", {1, m.stem.out_channels(), g[0], g[1]}, 0});
  rows.push_back({"patch_embed", {1, m.num_patches(), dim}, layout_params(layout, "patch_embed.")});
  rows.push_back({"tokens (+cls, +pos)", {1, n, dim}, layout_params(layout, "cls_token") + layout_params(layout, "pos_embed")});
  for (std::size_t b = 0; b < m.encoder.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    rows.push_back({p, {1, n, dim}, layout_params(layout, p + ".")});
  }
  rows.push_back({"norm (cls token)", {1, dim}, layout_params(layout, "norm.")});
  rows.push_back({"head", {1, m.num_classes}, layout_params(layout, "head.")});

  const auto rf = stem_receptive_field(m.stem);
  const auto probe = probe_stem_receptive_field(m.stem);
  const std::size_t params = count_params(m);
  const std::size_t macs = count_flops(m);

  if (json) {
    nlohmann::ordered_json j;
    j["variant"] = m.variant;
    j["config"] = nlohmann::json(m);
    auto& layers = j["layers"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) layers.push_back({{"name", r.name}, {"output_shape", r.shape}, {"params", r.params}});
    j["params"] = params;
    j["macs"] = macs;
    auto& rfs = j["receptive_field"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < rf.size(); ++i) {
      rfs.push_back({{"branch", i + 1}, {"rate", m.stem.rates[i]}, {"analytic", rf[i]}, {"probe", probe[i]}});
    }
    out << j.dump(2) << "\n";
    return 0;
  }
  out << "variant " << m.variant << "  image " << m.image_height << "x" << m.image_width << "  stem stride "
      << m.stem.stem_stride << "  patch " << m.patch_size << "\n\n";
  out << std::left << std::setw(28) << "layer" << std::setw(22) << "output" << "params\n";
  for (const auto& r : rows) out << std::setw(28) << r.name << std::setw(22) << to_string(r.shape) << r.params << "\n";
  out << "\ntotal params " << params << "\nMACs/image   " << macs << "\n\n";
  out << std::setw(10) << "branch" << std::setw(8) << "rate" << std::setw(12) << "rf" << "probe\n";
  for (std::size_t i = 0; i < rf.size(); ++i) {
    out << std::setw(10) << i + 1 << std::setw(8) << m.stem.rates[i] << std::setw(12) << rf[i] << probe[i] << "\n";
  }
  return 0;
}

int cmd_synth(const std::string& dir, const SynthConfig& s, std::ostream& out) {
  const Dataset d = synth_dataset(s);
  write_dataset_png(d, dir);
  out << "wrote " << d.size() << " images in " << d.num_classes() << " classes to " << dir << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"covt: atrous-stem vision transformer training and verification"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes config.toml, metrics.jsonl and checkpoints");
  train_cmd->add_option("--config", tf.config, "Config file (flags override it)")->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", tf.seed, "Root seed");
  train_cmd->add_option("--epochs", tf.epochs, "Epochs");
  train_cmd->add_option("--batch-size", tf.batch_size, "Batch size");
  train_cmd->add_option("--variant", tf.variant, "Model variant (covt-s, covt-t, covt-micro, covt-nano)");
  train_cmd->add_option("--preset", tf.preset, "Recipe preset (none, covid-xray, covid5k)");
  train_cmd->add_option("--data", tf.data, "Training image root <dir>/<class>/*.png");
  train_cmd->add_option("--val-data", tf.val_data, "Validation image root");
  train_cmd->add_option("--out", tf.out, "Output directory");
  train_cmd->add_flag("--mixup,!--no-mixup", tf.mixup, "Enable or disable mixup");
  train_cmd->add_option("--fixed-lambda", tf.fixed_lambda, "Blend every batch with this lambda");
  train_cmd->add_option("--resume", tf.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--checkpoint-every", tf.checkpoint_every, "Save a checkpoint every N epochs");
  train_cmd->add_option("--stem-stride", tf.stem_stride, "Stem convolution stride");
  train_cmd->add_flag("--no-global-branch", tf.no_global_branch, "Ablate the pooled MLP branch");
  train_cmd->add_flag("--timing", tf.timing, "Record wall-clock time in metrics");
  train_cmd->add_option("--set", tf.sets, "Override any config key: section.key=value");

  std::string ck_path, eval_data;
  std::size_t eval_batch = 64;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint; prints JSON");
  eval_cmd->add_option("--checkpoint", ck_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "Image root (default: synthetic set of the checkpoint seed)");
  eval_cmd->add_option("--batch-size", eval_batch, "Batch size")->check(CLI::PositiveNumber);
  eval_cmd->add_flag("--json", "Accepted for symmetry; output is always JSON");

  std::string gc_op;
  bool gc_json = false;
  std::uint64_t gc_seed = 0;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc_cmd->add_option("--op", gc_op, "Only cases whose name contains this");
  gc_cmd->add_flag("--json", gc_json, "JSON report");
  gc_cmd->add_option("--seed", gc_seed, "Instance seed");

  std::string in_variant = "covt-micro", in_config;
  std::optional<std::size_t> in_stride;
  bool in_json = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "Layer shapes, parameter count, MACs and receptive fields");
  inspect_cmd->add_option("--variant", in_variant, "Model variant");
  inspect_cmd->add_option("--config", in_config, "Read the model from a config file")->check(CLI::ExistingFile);
  inspect_cmd->add_option("--stem-stride", in_stride, "Override the stem stride");
  inspect_cmd->add_flag("--json", in_json, "JSON output");

  std::string synth_out;
  SynthConfig sc;
  std::size_t synth_size = 32;
  auto* synth_cmd = app.add_subcommand("synth", "Write the synthetic dataset as PNG class folders");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--per-class", sc.per_class, "Images per class");
  synth_cmd->add_option("--classes", sc.num_classes, "Number of classes");
  synth_cmd->add_option("--size", synth_size, "Image side length");
  synth_cmd->add_option("--noise", sc.noise, "Noise standard deviation");
  synth_cmd->add_option("--seed", sc.seed, "Root seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*train_cmd) return cmd_train(tf, out, err);
    if (*eval_cmd) return cmd_eval(ck_path, eval_data, eval_batch, out, err);
    if (*gc_cmd) return cmd_gradcheck(gc_op, gc_json, gc_seed, out, err);
    if (*inspect_cmd) {
      RunConfig c;
      if (!in_config.empty()) {
        c = load_run_config(in_config);
      } else {
        apply_variant(c, in_variant);
      }
      if (in_stride) c.model.stem.stem_stride = *in_stride;
      return cmd_inspect(c, in_json, out);
    }
    if (*synth_cmd) {
      sc.height = sc.width = synth_size;
      return cmd_synth(synth_out, sc, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace covt
