// SPDX-License-Identifier: Apache-2.0
#include "covt/data.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "covt/error.hpp"
#include "covt/rng.hpp"

namespace covt {

namespace fs = std::filesystem;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool supported_extension(const fs::path& p) {
  const auto ext = lower(p.extension().string());
  return ext == ".png" || ext == ".ppm" || ext == ".pgm";
}

RgbImage decode_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw DataError(path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError(path.string() + ": " + img.message);
  }
  RgbImage out{img.height, img.width, std::vector<double>(3 * img.height * img.width)};
  const std::size_t plane = out.height * out.width;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[c * plane + i] = buf[3 * i + c] / 255.0;
  return out;
}

// Whitespace/comment-separated header token of a PNM file.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

std::size_t pnm_number(std::istream& in, const fs::path& path) {
  const auto tok = pnm_token(in);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw DataError(path.string() + ": malformed PNM header");
  }
  return std::stoul(tok);
}

RgbImage decode_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  const auto magic = pnm_token(in);
  const bool gray = magic == "P2" || magic == "P5";
  const bool ascii = magic == "P2" || magic == "P3";
  if (!gray && magic != "P3" && magic != "P6") throw DataError(path.string() + ": unsupported PNM type '" + magic + "'");
  const std::size_t w = pnm_number(in, path);
  const std::size_t h = pnm_number(in, path);
  const std::size_t maxval = pnm_number(in, path);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw DataError(path.string() + ": invalid PNM dimensions");
  const std::size_t channels = gray ? 1 : 3;
  const std::size_t count = w * h * channels;
  std::vector<double> raw(count);
  if (ascii) {
    for (auto& v : raw) v = static_cast<double>(pnm_number(in, path));
  } else {
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(count * bytes);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw DataError(path.string() + ": truncated pixel data");
    for (std::size_t i = 0; i < count; ++i) {
      raw[i] = bytes == 2 ? static_cast<double>((buf[2 * i] << 8) | buf[2 * i + 1]) : static_cast<double>(buf[i]);
    }
  }
  RgbImage out{h, w, std::vector<double>(3 * h * w)};
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = raw[i * channels + (gray ? 0 : c)];
      if (v > static_cast<double>(maxval)) throw DataError(path.string() + ": sample exceeds maxval");
      out.pixels[c * plane + i] = v / static_cast<double>(maxval);
    }
  return out;
}

}  // namespace

Tensor Dataset::images(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DataError("dataset: empty batch");
  const Shape& s = items.at(indices[0]).image.shape();
  const std::size_t n = numel(s);
  std::vector<double> out;
  out.reserve(indices.size() * n);
  for (auto i : indices) {
    const auto& img = items.at(i).image;
    if (img.shape() != s) throw DataError("dataset: mixed image shapes in one batch");
    out.insert(out.end(), img.data().begin(), img.data().end());
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor(std::move(shape), std::move(out));
}

std::vector<std::size_t> Dataset::labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(items.at(i).label);
  return out;
}

Tensor normalize(const Tensor& image, const Normalization& norm) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("normalize: expected [3,H,W], got " + to_string(image.shape()));
  std::vector<double> out(image.data().begin(), image.data().end());
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = (out[c * plane + i] - norm.mean[c]) / norm.stddev[c];
  return Tensor(image.shape(), std::move(out));
}

Tensor denormalize(const Tensor& image, const Normalization& norm) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("denormalize: expected [3,H,W], got " + to_string(image.shape()));
  std::vector<double> out(image.data().begin(), image.data().end());
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = out[c * plane + i] * norm.stddev[c] + norm.mean[c];
  return Tensor(image.shape(), std::move(out));
}

RgbImage decode_image(const fs::path& path) {
  const auto ext = lower(path.extension().string());
  if (ext == ".png") return decode_png(path);
  if (ext == ".ppm" || ext == ".pgm") return decode_pnm(path);
  throw DataError(path.string() + ": unsupported image format");
}

RgbImage resize_bilinear(const RgbImage& image, std::size_t height, std::size_t width) {
  if (image.height == height && image.width == width) return image;
  RgbImage out{height, width, std::vector<double>(3 * height * width)};
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  auto taps = [](double src, std::size_t n) {
    const double s = std::clamp(src, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  const std::size_t in_plane = image.height * image.width;
  for (std::size_t y = 0; y < height; ++y) {
    const auto [y0, y1, fy] = taps((static_cast<double>(y) + 0.5) * sy - 0.5, image.height);
    for (std::size_t x = 0; x < width; ++x) {
      const auto [x0, x1, fx] = taps((static_cast<double>(x) + 0.5) * sx - 0.5, image.width);
      for (std::size_t c = 0; c < 3; ++c) {
        const double* p = image.pixels.data() + c * in_plane;
        const double top = p[y0 * image.width + x0] * (1 - fx) + p[y0 * image.width + x1] * fx;
        const double bot = p[y1 * image.width + x0] * (1 - fx) + p[y1 * image.width + x1] * fx;
        out.pixels[(c * height + y) * width + x] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

void write_png(const fs::path& path, const RgbImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  const std::size_t plane = image.height * image.width;
  std::vector<png_byte> buf(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image.pixels[c * plane + i], 0.0, 1.0);
      buf[3 * i + c] = static_cast<png_byte>(std::lround(v * 255.0));
    }
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError(path.string() + ": " + img.message);
  }
}

Dataset load_image_dir(const fs::path& root, std::size_t height, std::size_t width, const Normalization& norm,
                       LoadReport* report) {
  if (!fs::is_directory(root)) throw DataError(root.string() + ": not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError(root.string() + ": no class subdirectories");

  Dataset ds;
  LoadReport local;
  for (const auto& dir : class_dirs) {
    const std::size_t label = ds.class_names.size();
    ds.class_names.push_back(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && supported_extension(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::size_t loaded = 0;
    for (const auto& f : files) {
      try {
        const auto img = resize_bilinear(decode_image(f), height, width);
        ds.items.push_back({normalize(Tensor({3, height, width}, img.pixels), norm), label, f.string()});
        ++loaded;
      } catch (const std::exception& e) {
        ++local.skipped;
        local.warnings.emplace_back(e.what());
      }
    }
    if (loaded == 0) throw DataError(dir.string() + ": class directory has no loadable images");
  }
  if (report) *report = std::move(local);
  return ds;
}

Dataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.num_classes < 2) throw DataError("synth: need at least 2 classes");
  if (cfg.per_class == 0 || cfg.height == 0 || cfg.width == 0) throw DataError("synth: sizes must be positive");
  Dataset ds;
  ds.split = "synth";
  auto rng = make_stream(cfg.seed, "synth");
  std::normal_distribution<double> noise(0.0, 1.0);
  const double k_last = static_cast<double>(cfg.num_classes - 1);
  for (std::size_t k = 0; k < cfg.num_classes; ++k) ds.class_names.push_back("class" + std::to_string(k));
  for (std::size_t k = 0; k < cfg.num_classes; ++k) {
    const double theta = std::numbers::pi * static_cast<double>(k) / static_cast<double>(cfg.num_classes);
    const double freq = 2.0 + static_cast<double>(k);
    const double offset = 0.6 * static_cast<double>(k) / k_last - 0.3;
    for (std::size_t n = 0; n < cfg.per_class; ++n) {
      std::vector<double> px(3 * cfg.height * cfg.width);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < cfg.height; ++y)
          for (std::size_t x = 0; x < cfg.width; ++x) {
            const double u = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) /
                             static_cast<double>(cfg.width);
            const double phase = static_cast<double>(c) * std::numbers::pi / 6.0;
            double v = offset + 0.5 * std::sin(2.0 * std::numbers::pi * freq * u + phase);
            if (cfg.noise > 0.0) v += cfg.noise * noise(rng);
            px[(c * cfg.height + y) * cfg.width + x] = std::clamp(v, -1.0, 1.0);
          }
      ds.items.push_back({Tensor({3, cfg.height, cfg.width}, std::move(px)), k,
                          "synth:" + std::to_string(k) + ":" + std::to_string(n)});
    }
  }
  return ds;
}

void write_dataset_png(const Dataset& data, const fs::path& dir, const Normalization& norm) {
  std::vector<std::size_t> counter(data.num_classes(), 0);
  for (const auto& name : data.class_names) fs::create_directories(dir / name);
  for (const auto& s : data.items) {
    const Tensor raw = denormalize(s.image, norm);
    RgbImage img{s.image.dim(1), s.image.dim(2), {raw.data().begin(), raw.data().end()}};
    std::ostringstream name;
    name << counter[s.label]++;
    std::string file = name.str();
    file.insert(0, 4 - std::min<std::size_t>(4, file.size()), '0');
    write_png(dir / data.class_names.at(s.label) / (file + ".png"), img);
  }
}

std::pair<Dataset, Dataset> split(const Dataset& data, std::span<const double> fractions, std::uint64_t seed) {
  if (fractions.empty() || fractions.size() > 2) throw DataError("split: expected one or two fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw DataError("split: fractions must be positive");
    total += f;
  }
  if (total > 1.0 + 1e-12) throw DataError("split: fractions sum to more than 1");

  Dataset train;
  Dataset val;
  train.class_names = val.class_names = data.class_names;
  train.split = "train";
  val.split = "val";

  for (std::size_t k = 0; k < data.num_classes(); ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.items[i].label == k) members.push_back(i);
    auto rng = make_stream(seed, "split", k);
    std::shuffle(members.begin(), members.end(), rng);
    const auto n = static_cast<double>(members.size());
    const std::size_t n_train = std::min(members.size(), static_cast<std::size_t>(std::llround(fractions[0] * n)));
    std::size_t n_val = 0;
    if (fractions.size() == 2) {
      n_val = std::min(members.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
    }
    if (n_train == 0 || (fractions.size() == 2 && n_val == 0)) {
      throw DataError("split: class '" + data.class_names[k] + "' has " + std::to_string(members.size()) +
                      " items, fewer than the split slots");
    }
    for (std::size_t i = 0; i < n_train; ++i) train.items.push_back(data.items[members[i]]);
    for (std::size_t i = n_train; i < n_train + n_val; ++i) val.items.push_back(data.items[members[i]]);
  }
  return {std::move(train), std::move(val)};
}

}  // namespace covt
