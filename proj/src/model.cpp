// SPDX-License-Identifier: Apache-2.0
#include "covt/model.hpp"

#include "covt/error.hpp"
#include "covt/ops.hpp"
#include "covt/rng.hpp"
#include "covt/serialize.hpp"

namespace covt {

namespace {

constexpr std::string_view kCheckpointMagic = "COVTCKPT";

std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

ModelConfig make_deit_like(std::string name, std::size_t dim, std::size_t heads) {
  ModelConfig c;
  c.variant = std::move(name);
  c.image_height = c.image_width = 64;
  c.patch_size = 8;
  c.stem.stem_channels = 64;
  c.stem.stem_stride = 2;
  c.stem.branch_channels = dim / 8;
  c.encoder.depth = 12;
  c.encoder.embed_dim = dim;
  c.encoder.num_heads = heads;
  c.encoder.mlp_ratio = 4.0;
  return c;
}

}  // namespace

std::array<std::size_t, 2> ModelConfig::feature_grid() const {
  return {image_height / stem.stem_stride, image_width / stem.stem_stride};
}

std::size_t ModelConfig::num_patches() const {
  const auto g = feature_grid();
  return (g[0] / patch_size) * (g[1] / patch_size);
}

void ModelConfig::validate() const {
  stem.validate();
  encoder.validate();
  if (stem.in_channels != 3) throw ConfigError("model: images are 3-channel, stem.in_channels must be 3");
  if (image_height == 0 || image_width == 0) throw ConfigError("model: image size must be positive");
  if (image_height % stem.stem_stride != 0 || image_width % stem.stem_stride != 0) {
    throw ConfigError("model: image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                      " not divisible by stem stride " + std::to_string(stem.stem_stride));
  }
  const auto g = feature_grid();
  if (patch_size == 0 || g[0] % patch_size != 0 || g[1] % patch_size != 0) {
    throw ConfigError("model: feature grid " + std::to_string(g[0]) + "x" + std::to_string(g[1]) +
                      " not divisible by patch size " + std::to_string(patch_size));
  }
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (!(init_std > 0.0)) throw ConfigError("model: init_std must be positive");
}

ModelConfig ModelConfig::preset(std::string_view variant) {
  if (variant == "covt-s") return make_deit_like("covt-s", 384, 6);
  if (variant == "covt-t") return make_deit_like("covt-t", 192, 3);
  if (variant == "covt-micro") {
    ModelConfig c;
    c.variant = "covt-micro";
    c.image_height = c.image_width = 32;
    c.patch_size = 4;
    c.stem.stem_channels = 16;
    c.stem.stem_stride = 2;
    c.stem.branch_channels = 4;
    c.encoder.depth = 2;
    c.encoder.embed_dim = 32;
    c.encoder.num_heads = 2;
    return c;
  }
  if (variant == "covt-nano") {
    ModelConfig c;
    c.variant = "covt-nano";
    c.image_height = c.image_width = 16;
    c.patch_size = 4;
    c.stem.stem_channels = 4;
    c.stem.stem_stride = 2;
    c.stem.branch_channels = 2;
    c.encoder.depth = 1;
    c.encoder.embed_dim = 8;
    c.encoder.num_heads = 2;
    return c;
  }
  throw ConfigError("unknown model variant '" + std::string(variant) + "'");
}

std::vector<std::string> ModelConfig::preset_names() { return {"covt-s", "covt-t", "covt-micro", "covt-nano"}; }

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"variant", c.variant},
      {"image_size", {c.image_height, c.image_width}},
      {"patch_size", c.patch_size},
      {"num_classes", c.num_classes},
      {"init_std", c.init_std},
      {"stem",
       {{"in_channels", c.stem.in_channels},
        {"stem_channels", c.stem.stem_channels},
        {"stem_kernel", c.stem.stem_kernel},
        {"stem_stride", c.stem.stem_stride},
        {"branch_channels", c.stem.branch_channels},
        {"rates", c.stem.rates},
        {"branch_kernel", c.stem.branch_kernel},
        {"activation", std::string(to_string(c.stem.activation))}}},
      {"encoder",
       {{"depth", c.encoder.depth},
        {"embed_dim", c.encoder.embed_dim},
        {"num_heads", c.encoder.num_heads},
        {"mlp_ratio", c.encoder.mlp_ratio},
        {"mlp_activation", std::string(to_string(c.encoder.mlp_activation))},
        {"global_branch", c.encoder.global_branch},
        {"share_mlp_weights", c.encoder.share_mlp_weights},
        {"dropout", c.encoder.dropout},
        {"norm_eps", c.encoder.norm_eps}}},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.variant = j.at("variant").get<std::string>();
  const auto size = j.at("image_size").get<std::array<std::size_t, 2>>();
  c.image_height = size[0];
  c.image_width = size[1];
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.init_std = j.at("init_std").get<double>();
  const auto& s = j.at("stem");
  c.stem.in_channels = s.at("in_channels").get<std::size_t>();
  c.stem.stem_channels = s.at("stem_channels").get<std::size_t>();
  c.stem.stem_kernel = s.at("stem_kernel").get<std::size_t>();
  c.stem.stem_stride = s.at("stem_stride").get<std::size_t>();
  c.stem.branch_channels = s.at("branch_channels").get<std::size_t>();
  c.stem.rates = s.at("rates").get<std::vector<std::size_t>>();
  c.stem.branch_kernel = s.at("branch_kernel").get<std::array<std::size_t, 2>>();
  c.stem.activation = parse_activation(s.at("activation").get<std::string>());
  const auto& e = j.at("encoder");
  c.encoder.depth = e.at("depth").get<std::size_t>();
  c.encoder.embed_dim = e.at("embed_dim").get<std::size_t>();
  c.encoder.num_heads = e.at("num_heads").get<std::size_t>();
  c.encoder.mlp_ratio = e.at("mlp_ratio").get<double>();
  c.encoder.mlp_activation = parse_activation(e.at("mlp_activation").get<std::string>());
  c.encoder.global_branch = e.at("global_branch").get<bool>();
  c.encoder.share_mlp_weights = e.at("share_mlp_weights").get<bool>();
  c.encoder.dropout = e.at("dropout").get<double>();
  c.encoder.norm_eps = e.at("norm_eps").get<double>();
}

Tensor& ParamStore::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  value.impl()->requires_grad = true;
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

const Tensor& ParamStore::get(std::string_view name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return entries_[it->second].second;
}

Tensor& ParamStore::get(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
}

bool ParamStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

void ParamStore::clear_grad() {
  for (auto& [_, t] : entries_) t.clear_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.add(name, t.detach(true));
  return out;
}

std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& c) {
  c.validate();
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t dim = c.encoder.embed_dim;
  const std::size_t hidden = c.encoder.mlp_hidden();

  out.emplace_back("stem.conv.weight", c.stem.stem_conv().weight_shape());
  out.emplace_back("stem.conv.bias", Shape{c.stem.stem_channels});
  for (std::size_t i = 0; i < c.stem.rates.size(); ++i) {
    const std::string p = "stem.branch" + std::to_string(i + 1) + ".";
    out.emplace_back(p + "weight", c.stem.branch_conv(c.stem.rates[i]).weight_shape());
    out.emplace_back(p + "bias", Shape{c.stem.branch_channels});
  }
  out.emplace_back("patch_embed.weight", Shape{dim, c.stem.out_channels(), c.patch_size, c.patch_size});
  out.emplace_back("patch_embed.bias", Shape{dim});
  out.emplace_back("cls_token", Shape{1, 1, dim});
  out.emplace_back("pos_embed", Shape{1, c.num_tokens(), dim});
  for (std::size_t b = 0; b < c.encoder.depth; ++b) {
    const std::string p = block_prefix(b);
    out.emplace_back(p + "norm1.weight", Shape{dim});
    out.emplace_back(p + "norm1.bias", Shape{dim});
    for (const char* proj : {"q", "k", "v", "proj"}) {
      out.emplace_back(p + "attn." + proj + ".weight", Shape{dim, dim});
      out.emplace_back(p + "attn." + proj + ".bias", Shape{dim});
    }
    out.emplace_back(p + "norm2.weight", Shape{dim});
    out.emplace_back(p + "norm2.bias", Shape{dim});
    std::vector<std::string> mlps = {"mlp."};
    if (c.encoder.global_branch && !c.encoder.share_mlp_weights) mlps.push_back("mlp.global_");
    for (const auto& m : mlps) {
      out.emplace_back(p + m + "fc1.weight", Shape{dim, hidden});
      out.emplace_back(p + m + "fc1.bias", Shape{hidden});
      out.emplace_back(p + m + "fc2.weight", Shape{hidden, dim});
      out.emplace_back(p + m + "fc2.bias", Shape{dim});
    }
  }
  out.emplace_back("norm.weight", Shape{dim});
  out.emplace_back("norm.bias", Shape{dim});
  out.emplace_back("head.weight", Shape{dim, c.num_classes});
  out.emplace_back("head.bias", Shape{c.num_classes});
  return out;
}

ParamStore init_params(const ModelConfig& c, std::mt19937_64& rng) {
  ParamStore store;
  for (auto& [name, shape] : param_layout(c)) {
    const bool is_bias = name.ends_with(".bias");
    const bool is_norm = name.find("norm") != std::string::npos;
    const bool is_conv = name.starts_with("stem.") || name.starts_with("patch_embed.");
    Tensor t;
    if (is_norm) {
      t = Tensor::full(shape, is_bias ? 0.0 : 1.0);
    } else if (is_bias) {
      t = Tensor::zeros(shape);
    } else if (is_conv) {
      t = kaiming_uniform(shape, shape[1] * shape[2] * shape[3], rng);
    } else {
      t = trunc_normal(shape, c.init_std, rng);
    }
    store.add(name, std::move(t));
  }
  return store;
}

void check_params(const ModelConfig& config, const ParamStore& params) {
  const auto layout = param_layout(config);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, shape] = layout[i];
    if (i >= params.size()) {
      throw ShapeError("parameter mismatch: '" + name + "' expected " + to_string(shape) + ", missing");
    }
    const auto& [have_name, have] = params.entries()[i];
    if (have_name != name || have.shape() != shape) {
      throw ShapeError("parameter mismatch: '" + name + "' expected " + to_string(shape) + ", got '" + have_name +
                       "' " + to_string(have.shape()));
    }
  }
  if (params.size() > layout.size()) {
    const auto& [extra, t] = params.entries()[layout.size()];
    throw ShapeError("parameter mismatch: unexpected '" + extra + "' " + to_string(t.shape()));
  }
}

CovtModel::CovtModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  auto rng = make_stream(seed, "init");
  params_ = init_params(config_, rng);
}

CovtModel::CovtModel(ModelConfig config, ParamStore params) : config_(std::move(config)), params_(std::move(params)) {
  check_params(config_, params_);
}

StemParams CovtModel::stem_params() const {
  StemParams p;
  p.conv_weight = params_.get("stem.conv.weight");
  p.conv_bias = params_.get("stem.conv.bias");
  for (std::size_t i = 0; i < config_.stem.rates.size(); ++i) {
    const std::string prefix = "stem.branch" + std::to_string(i + 1) + ".";
    p.branch_weight.push_back(params_.get(prefix + "weight"));
    p.branch_bias.push_back(params_.get(prefix + "bias"));
  }
  return p;
}

TokenizerParams CovtModel::tokenizer_params() const {
  return {params_.get("patch_embed.weight"), params_.get("patch_embed.bias"), params_.get("cls_token"),
          params_.get("pos_embed")};
}

BlockParams CovtModel::block_params(std::size_t index) const {
  const std::string p = block_prefix(index);
  auto get = [&](const std::string& n) { return params_.get(p + n); };
  auto mlp = [&](const std::string& m) {
    return MlpWeights{get(m + "fc1.weight"), get(m + "fc1.bias"), get(m + "fc2.weight"), get(m + "fc2.bias")};
  };
  BlockParams b;
  b.norm1_weight = get("norm1.weight");
  b.norm1_bias = get("norm1.bias");
  b.attn = {get("attn.q.weight"), get("attn.q.bias"), get("attn.k.weight"),    get("attn.k.bias"),
            get("attn.v.weight"), get("attn.v.bias"), get("attn.proj.weight"), get("attn.proj.bias")};
  b.norm2_weight = get("norm2.weight");
  b.norm2_bias = get("norm2.bias");
  b.mlp.local = mlp("mlp.");
  if (config_.encoder.global_branch && !config_.encoder.share_mlp_weights) b.mlp.global = mlp("mlp.global_");
  return b;
}

Tensor CovtModel::forward(const Tensor& images, std::mt19937_64* dropout_rng) const {
  const auto& c = config_;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != c.image_height || images.dim(3) != c.image_width) {
    throw ShapeError("model: images must be [B,3," + std::to_string(c.image_height) + "," +
                     std::to_string(c.image_width) + "], got " + to_string(images.shape()));
  }
  auto stage = [](const char* where, auto&& fn) {
    try {
      return fn();
    } catch (const ShapeError& e) {
      throw ShapeError(std::string(where) + ": " + e.what());
    }
  };
  const Tensor fmap = stage("stem", [&] { return stem_forward(images, stem_params(), c.stem); });
  Tensor tokens = stage("patch_embed", [&] { return tokenize(fmap, tokenizer_params(), c.patch_size); });
  for (std::size_t b = 0; b < c.encoder.depth; ++b) {
    tokens = stage(("blocks." + std::to_string(b)).c_str(),
                   [&] { return encoder_block(tokens, block_params(b), c.encoder, dropout_rng); });
  }
  const std::size_t batch = images.dim(0);
  const Tensor cls = reshape(slice(tokens, 1, 0, 1), {batch, c.encoder.embed_dim});
  const Tensor normed = layer_norm(cls, params_.get("norm.weight"), params_.get("norm.bias"), c.encoder.norm_eps);
  return linear(normed, params_.get("head.weight"), params_.get("head.bias"));
}

std::size_t count_params(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& [_, shape] : param_layout(config)) n += numel(shape);
  return n;
}

std::size_t count_flops(const ModelConfig& c) {
  c.validate();
  const auto g = c.feature_grid();
  const std::size_t pixels = g[0] * g[1];
  const std::size_t k7 = c.stem.stem_kernel * c.stem.stem_kernel;
  const std::size_t kb = c.stem.branch_kernel[0] * c.stem.branch_kernel[1];
  std::size_t macs = pixels * c.stem.stem_channels * c.stem.in_channels * k7;
  macs += c.stem.rates.size() * pixels * c.stem.branch_channels * c.stem.stem_channels * kb;

  const std::size_t dim = c.encoder.embed_dim;
  const std::size_t hidden = c.encoder.mlp_hidden();
  const std::size_t n = c.num_tokens();
  macs += c.num_patches() * dim * c.stem.out_channels() * c.patch_size * c.patch_size;

  std::size_t block = 4 * n * dim * dim;  // q, k, v, output projection
  block += 2 * n * n * dim;               // scores and weighted values
  block += n * 2 * dim * hidden;          // token-wise MLP
  if (c.encoder.global_branch) block += 2 * dim * hidden;  // pooled token through the MLP
  macs += c.encoder.depth * block;
  macs += dim * c.num_classes;
  return macs;
}

std::vector<std::byte> encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["config"] = ck.config;
  header["train_state"] = {{"epoch", ck.state.epoch},
                           {"step", ck.state.step},
                           {"seed", ck.state.seed},
                           {"total_steps", ck.state.total_steps},
                           {"momentum", ck.state.momentum},
                           {"weight_decay", ck.state.weight_decay}};
  ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put_u32(kCheckpointVersion);
  w.put_string(header.dump());
  w.put_u64(ck.params.size());
  for (const auto& [name, t] : ck.params.entries()) {
    w.put_string(name);
    encode_tensor(w, t);
  }
  w.put_u64(ck.state.velocity.size());
  for (const auto& [name, t] : ck.state.velocity) {
    w.put_string(name);
    encode_tensor(w, t);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
  ByteReader r(bytes);
  if (r.get_bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw FormatError("not a COVT checkpoint", 0);
  const auto version_at = r.offset();
  const auto version = r.get_u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      version_at);
  }
  const auto header_at = r.offset();
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(r.get_string());
    ck.config = header.at("config").get<ModelConfig>();
    const auto& s = header.at("train_state");
    ck.state.epoch = s.at("epoch").get<std::uint64_t>();
    ck.state.step = s.at("step").get<std::uint64_t>();
    ck.state.seed = s.at("seed").get<std::uint64_t>();
    ck.state.total_steps = s.at("total_steps").get<std::uint64_t>();
    ck.state.momentum = s.at("momentum").get<double>();
    ck.state.weight_decay = s.at("weight_decay").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what(), header_at);
  }
  const auto n_params = r.get_u64();
  for (std::uint64_t i = 0; i < n_params; ++i) {
    auto name = r.get_string();
    ck.params.add(std::move(name), decode_tensor(r));
  }
  const auto n_vel = r.get_u64();
  for (std::uint64_t i = 0; i < n_vel; ++i) {
    auto name = r.get_string();
    ck.state.velocity.emplace_back(std::move(name), decode_tensor(r));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void load_into(CovtModel& model, const ParamStore& params) {
  check_params(model.config(), params);
  auto& dst = model.params().entries();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto src = params.entries()[i].second.data();
    std::copy(src.begin(), src.end(), dst[i].second.mutable_data().begin());
  }
}

}  // namespace covt
