// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <variant>

#include "covt/cli.hpp"
#include "covt/error.hpp"

namespace covt {

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.lr_start = lr_start;
  t.lr_end = lr_end;
  t.warmup_steps = warmup_steps;
  t.sgd = sgd;
  t.mixup = mixup;
  t.fixed_lambda = fixed_lambda;
  t.seed = seed;
  t.timing = timing;
  return t;
}

void RunConfig::validate() const {
  model.validate();
  mixup.validate();
  if (epochs == 0) throw ConfigError("run.epochs must be positive");
  if (batch_size == 0) throw ConfigError("run.batch_size must be positive");
  if (out.empty()) throw ConfigError("run.out must not be empty");
  if (!(lr_start >= lr_end) || !(lr_end >= 0.0)) throw ConfigError("schedule: need lr_start >= lr_end >= 0");
  if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) throw ConfigError("schedule.momentum must be in [0, 1)");
  if (!(sgd.weight_decay >= 0.0)) throw ConfigError("schedule.weight_decay must be >= 0");
  if (fixed_lambda && !(*fixed_lambda >= 0.0 && *fixed_lambda <= 1.0)) {
    throw ConfigError("mixup.fixed_lambda must be in [0, 1]");
  }
  if (!(data.val_fraction >= 0.0 && data.val_fraction < 1.0)) throw ConfigError("data.val_fraction must be in [0, 1)");
  if (data.synth_per_class == 0) throw ConfigError("data.synth_per_class must be positive");
  if (!(data.synth_noise >= 0.0)) throw ConfigError("data.synth_noise must be >= 0");
  for (double s : data.norm.stddev)
    if (!(s > 0.0)) throw ConfigError("data.std entries must be positive");
}

void apply_variant(RunConfig& c, std::string_view variant) {
  c.model = ModelConfig::preset(variant);
  c.mixup.enabled = variant == "covt-s";
}

void apply_preset(RunConfig& c, std::string_view preset) {
  if (preset == "none") {
  } else if (preset == "covid-xray") {
    c.batch_size = 64;
    c.epochs = 100;
  } else if (preset == "covid5k") {
    c.batch_size = 128;
    c.epochs = 100;
  } else {
    throw ConfigError("unknown preset '" + std::string(preset) + "' (none, covid-xray, covid5k)");
  }
  c.preset = std::string(preset);
}

namespace {

using Number = std::variant<std::uint64_t, double>;
using Value = std::variant<std::string, bool, Number, std::vector<Number>>;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

Number parse_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) throw ConfigError("expected a number");
  const bool integral = s.find_first_of(".eEn") == std::string_view::npos && s.front() != '-' && s.front() != '+';
  if (integral) {
    std::uint64_t u = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), u);
    if (ec == std::errc() && p == s.data() + s.size()) return u;
  }
  if (s.front() == '+') s.remove_prefix(1);
  double d = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), d);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("invalid number '" + std::string(s) + "'");
  return d;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (++i == s.size()) throw ConfigError("dangling escape in string");
    switch (s[i]) {
      case 'n': out.push_back('\n'); break;
      case 't': out.push_back('\t'); break;
      case '"': out.push_back('"'); break;
      case '\\': out.push_back('\\'); break;
      default: throw ConfigError(std::string("unknown escape \\") + s[i]);
    }
  }
  return out;
}

std::string escape(std::string_view s) {
  std::string out = "\"";
  for (char ch : s) {
    switch (ch) {
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      default: out.push_back(ch);
    }
  }
  return out + "\"";
}

Value parse_value(std::string_view s) {
  s = trim(s);
  if (s.empty()) throw ConfigError("missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') throw ConfigError("unterminated string");
    return unescape(s.substr(1, s.size() - 2));
  }
  if (s == "true") return true;
  if (s == "false") return false;
  if (s.front() == '[') {
    if (s.back() != ']') throw ConfigError("unterminated array");
    std::vector<Number> items;
    std::string_view body = trim(s.substr(1, s.size() - 2));
    while (!body.empty()) {
      const auto comma = body.find(',');
      items.push_back(parse_number(body.substr(0, comma)));
      if (comma == std::string_view::npos) break;
      body = trim(body.substr(comma + 1));
    }
    return items;
  }
  return parse_number(s);
}

// Strips a trailing comment that is not inside a string.
std::string_view strip_comment(std::string_view line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && in_string) {
      ++i;
    } else if (line[i] == '"') {
      in_string = !in_string;
    } else if (line[i] == '#' && !in_string) {
      return line.substr(0, i);
    }
  }
  return line;
}

std::string as_string(const Value& v) {
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  throw ConfigError("expected a string");
}

bool as_bool(const Value& v) {
  if (const auto* b = std::get_if<bool>(&v)) return *b;
  throw ConfigError("expected true or false");
}

double num_double(const Number& n) {
  if (const auto* u = std::get_if<std::uint64_t>(&n)) return static_cast<double>(*u);
  return std::get<double>(n);
}

std::uint64_t num_uint(const Number& n) {
  if (const auto* u = std::get_if<std::uint64_t>(&n)) return *u;
  throw ConfigError("expected a non-negative integer");
}

double as_double(const Value& v) {
  if (const auto* n = std::get_if<Number>(&v)) return num_double(*n);
  throw ConfigError("expected a number");
}

std::uint64_t as_uint(const Value& v) {
  if (const auto* n = std::get_if<Number>(&v)) return num_uint(*n);
  throw ConfigError("expected a non-negative integer");
}

std::vector<Number> as_array(const Value& v, std::size_t expected = 0) {
  const auto* a = std::get_if<std::vector<Number>>(&v);
  if (!a) throw ConfigError("expected an array");
  if (expected && a->size() != expected) throw ConfigError("expected " + std::to_string(expected) + " entries");
  return *a;
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, p);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

template <typename Seq>
std::string fmt_uints(const Seq& seq) {
  std::string s = "[";
  for (std::size_t i = 0; i < seq.size(); ++i) s += (i ? ", " : "") + std::to_string(seq[i]);
  return s + "]";
}

std::string fmt_doubles(const std::array<double, 3>& seq) {
  std::string s = "[";
  for (std::size_t i = 0; i < seq.size(); ++i) s += (i ? ", " : "") + fmt_double(seq[i]);
  return s + "]";
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Field {
  const char* section;
  const char* key;
  std::function<std::optional<std::string>(const RunConfig&)> get;
  std::function<void(RunConfig&, const Value&)> set;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"run", "preset", [](const RunConfig& c) { return escape(c.preset); },
       [](RunConfig& c, const Value& v) { apply_preset(c, as_string(v)); }},
      {"run", "seed", [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const Value& v) { c.seed = as_uint(v); }},
      {"run", "epochs", [](const RunConfig& c) { return std::to_string(c.epochs); },
       [](RunConfig& c, const Value& v) { c.epochs = as_uint(v); }},
      {"run", "batch_size", [](const RunConfig& c) { return std::to_string(c.batch_size); },
       [](RunConfig& c, const Value& v) { c.batch_size = as_uint(v); }},
      {"run", "out", [](const RunConfig& c) { return escape(c.out); },
       [](RunConfig& c, const Value& v) { c.out = as_string(v); }},
      {"run", "checkpoint_every", [](const RunConfig& c) { return std::to_string(c.checkpoint_every); },
       [](RunConfig& c, const Value& v) { c.checkpoint_every = as_uint(v); }},
      {"run", "timing", [](const RunConfig& c) { return fmt_bool(c.timing); },
       [](RunConfig& c, const Value& v) { c.timing = as_bool(v); }},
      {"run", "resume", [](const RunConfig& c) { return escape(c.resume); },
       [](RunConfig& c, const Value& v) { c.resume = as_string(v); }},

      {"model", "variant", [](const RunConfig& c) { return escape(c.model.variant); },
       [](RunConfig& c, const Value& v) {
         const auto name = as_string(v);
         if (name == "custom") {
           c.model.variant = name;
         } else {
           apply_variant(c, name);
         }
       }},
      {"model", "image_height", [](const RunConfig& c) { return std::to_string(c.model.image_height); },
       [](RunConfig& c, const Value& v) { c.model.image_height = as_uint(v); }},
      {"model", "image_width", [](const RunConfig& c) { return std::to_string(c.model.image_width); },
       [](RunConfig& c, const Value& v) { c.model.image_width = as_uint(v); }},
      {"model", "num_classes", [](const RunConfig& c) { return std::to_string(c.model.num_classes); },
       [](RunConfig& c, const Value& v) { c.model.num_classes = as_uint(v); }},
      {"model", "init_std", [](const RunConfig& c) { return fmt_double(c.model.init_std); },
       [](RunConfig& c, const Value& v) { c.model.init_std = as_double(v); }},
      {"model", "stem_channels", [](const RunConfig& c) { return std::to_string(c.model.stem.stem_channels); },
       [](RunConfig& c, const Value& v) { c.model.stem.stem_channels = as_uint(v); }},
      {"model", "stem_kernel", [](const RunConfig& c) { return std::to_string(c.model.stem.stem_kernel); },
       [](RunConfig& c, const Value& v) { c.model.stem.stem_kernel = as_uint(v); }},
      {"model", "stem_stride", [](const RunConfig& c) { return std::to_string(c.model.stem.stem_stride); },
       [](RunConfig& c, const Value& v) { c.model.stem.stem_stride = as_uint(v); }},
      {"model", "branch_channels", [](const RunConfig& c) { return std::to_string(c.model.stem.branch_channels); },
       [](RunConfig& c, const Value& v) { c.model.stem.branch_channels = as_uint(v); }},
      {"model", "rates", [](const RunConfig& c) { return fmt_uints(c.model.stem.rates); },
       [](RunConfig& c, const Value& v) {
         std::vector<std::size_t> r;
         for (const auto& n : as_array(v)) r.push_back(num_uint(n));
         c.model.stem.rates = r;
       }},
      {"model", "branch_kernel", [](const RunConfig& c) { return fmt_uints(c.model.stem.branch_kernel); },
       [](RunConfig& c, const Value& v) {
         const auto a = as_array(v, 2);
         c.model.stem.branch_kernel = {num_uint(a[0]), num_uint(a[1])};
       }},
      {"model", "stem_activation",
       [](const RunConfig& c) { return escape(to_string(c.model.stem.activation)); },
       [](RunConfig& c, const Value& v) { c.model.stem.activation = parse_activation(as_string(v)); }},
      {"model", "patch_size", [](const RunConfig& c) { return std::to_string(c.model.patch_size); },
       [](RunConfig& c, const Value& v) { c.model.patch_size = as_uint(v); }},
      {"model", "depth", [](const RunConfig& c) { return std::to_string(c.model.encoder.depth); },
       [](RunConfig& c, const Value& v) { c.model.encoder.depth = as_uint(v); }},
      {"model", "embed_dim", [](const RunConfig& c) { return std::to_string(c.model.encoder.embed_dim); },
       [](RunConfig& c, const Value& v) { c.model.encoder.embed_dim = as_uint(v); }},
      {"model", "num_heads", [](const RunConfig& c) { return std::to_string(c.model.encoder.num_heads); },
       [](RunConfig& c, const Value& v) { c.model.encoder.num_heads = as_uint(v); }},
      {"model", "mlp_ratio", [](const RunConfig& c) { return fmt_double(c.model.encoder.mlp_ratio); },
       [](RunConfig& c, const Value& v) { c.model.encoder.mlp_ratio = as_double(v); }},
      {"model", "mlp_activation",
       [](const RunConfig& c) { return escape(to_string(c.model.encoder.mlp_activation)); },
       [](RunConfig& c, const Value& v) { c.model.encoder.mlp_activation = parse_activation(as_string(v)); }},
      {"model", "global_branch", [](const RunConfig& c) { return fmt_bool(c.model.encoder.global_branch); },
       [](RunConfig& c, const Value& v) { c.model.encoder.global_branch = as_bool(v); }},
      {"model", "share_mlp_weights", [](const RunConfig& c) { return fmt_bool(c.model.encoder.share_mlp_weights); },
       [](RunConfig& c, const Value& v) { c.model.encoder.share_mlp_weights = as_bool(v); }},
      {"model", "dropout", [](const RunConfig& c) { return fmt_double(c.model.encoder.dropout); },
       [](RunConfig& c, const Value& v) { c.model.encoder.dropout = as_double(v); }},
      {"model", "norm_eps", [](const RunConfig& c) { return fmt_double(c.model.encoder.norm_eps); },
       [](RunConfig& c, const Value& v) { c.model.encoder.norm_eps = as_double(v); }},

      {"schedule", "lr_start", [](const RunConfig& c) { return fmt_double(c.lr_start); },
       [](RunConfig& c, const Value& v) { c.lr_start = as_double(v); }},
      {"schedule", "lr_end", [](const RunConfig& c) { return fmt_double(c.lr_end); },
       [](RunConfig& c, const Value& v) { c.lr_end = as_double(v); }},
      {"schedule", "warmup_steps", [](const RunConfig& c) { return std::to_string(c.warmup_steps); },
       [](RunConfig& c, const Value& v) { c.warmup_steps = as_uint(v); }},
      {"schedule", "momentum", [](const RunConfig& c) { return fmt_double(c.sgd.momentum); },
       [](RunConfig& c, const Value& v) { c.sgd.momentum = as_double(v); }},
      {"schedule", "weight_decay", [](const RunConfig& c) { return fmt_double(c.sgd.weight_decay); },
       [](RunConfig& c, const Value& v) { c.sgd.weight_decay = as_double(v); }},

      {"mixup", "enabled", [](const RunConfig& c) { return fmt_bool(c.mixup.enabled); },
       [](RunConfig& c, const Value& v) { c.mixup.enabled = as_bool(v); }},
      {"mixup", "alpha", [](const RunConfig& c) { return fmt_double(c.mixup.alpha); },
       [](RunConfig& c, const Value& v) { c.mixup.alpha = as_double(v); }},
      {"mixup", "fixed_lambda",
       [](const RunConfig& c) -> std::optional<std::string> {
         if (!c.fixed_lambda) return std::nullopt;
         return fmt_double(*c.fixed_lambda);
       },
       [](RunConfig& c, const Value& v) { c.fixed_lambda = as_double(v); }},

      {"data", "train", [](const RunConfig& c) { return escape(c.data.train); },
       [](RunConfig& c, const Value& v) { c.data.train = as_string(v); }},
      {"data", "val", [](const RunConfig& c) { return escape(c.data.val); },
       [](RunConfig& c, const Value& v) { c.data.val = as_string(v); }},
      {"data", "val_fraction", [](const RunConfig& c) { return fmt_double(c.data.val_fraction); },
       [](RunConfig& c, const Value& v) { c.data.val_fraction = as_double(v); }},
      {"data", "synth_per_class", [](const RunConfig& c) { return std::to_string(c.data.synth_per_class); },
       [](RunConfig& c, const Value& v) { c.data.synth_per_class = as_uint(v); }},
      {"data", "synth_noise", [](const RunConfig& c) { return fmt_double(c.data.synth_noise); },
       [](RunConfig& c, const Value& v) { c.data.synth_noise = as_double(v); }},
      {"data", "mean", [](const RunConfig& c) { return fmt_doubles(c.data.norm.mean); },
       [](RunConfig& c, const Value& v) {
         const auto a = as_array(v, 3);
         for (std::size_t i = 0; i < 3; ++i) c.data.norm.mean[i] = num_double(a[i]);
       }},
      {"data", "std", [](const RunConfig& c) { return fmt_doubles(c.data.norm.stddev); },
       [](RunConfig& c, const Value& v) {
         const auto a = as_array(v, 3);
         for (std::size_t i = 0; i < 3; ++i) c.data.norm.stddev[i] = num_double(a[i]);
       }},
  };
  return f;
}

const Field& find_field(std::string_view section, std::string_view key) {
  for (const auto& f : fields())
    if (section == f.section && key == f.key) return f;
  throw ConfigError("unknown config key '" + std::string(section) + "." + std::string(key) + "'");
}

}  // namespace

void apply_setting(RunConfig& c, std::string_view section, std::string_view key, std::string_view value) {
  const Field& f = find_field(section, key);
  try {
    f.set(c, parse_value(value));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(section) + "." + std::string(key) + ": " + e.what());
  }
}

RunConfig parse_run_config(std::string_view text, RunConfig base) {
  struct Entry {
    std::string section, key, value;
    std::size_t line;
  };
  std::vector<Entry> entries;
  std::string section;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string_view line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "run" && section != "model" && section != "schedule" && section != "mixup" && section != "data") {
        throw ConfigError("line " + std::to_string(lineno) + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside any section");
    const std::string key(trim(line.substr(0, eq)));
    for (const auto& e : entries) {
      if (e.section == section && e.key == key) {
        throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " + section + "." + key);
      }
    }
    entries.push_back({section, key, std::string(trim(line.substr(eq + 1))), lineno});
  }

  auto apply = [&](const Entry& e) {
    try {
      apply_setting(base, e.section, e.key, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError("line " + std::to_string(e.line) + ": " + err.what());
    }
  };
  auto is_first = [](const Entry& e) {
    return (e.section == "run" && e.key == "preset") || (e.section == "model" && e.key == "variant");
  };
  for (const auto& e : entries)
    if (is_first(e)) apply(e);
  for (const auto& e : entries)
    if (!is_first(e)) apply(e);
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string write_run_config(const RunConfig& c) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const auto value = f.get(c);
    if (!value) continue;
    if (section != f.section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + *value + "\n";
  }
  return out;
}

}  // namespace covt
