// SPDX-License-Identifier: Apache-2.0
#include "covt/nn.hpp"

#include <cmath>

#include "covt/error.hpp"
#include "covt/ops.hpp"
#include "covt/parallel.hpp"

namespace covt {

namespace {

std::string spec_string(const Conv2dSpec& s) {
  auto pair = [](const std::array<std::size_t, 2>& a) {
    return std::to_string(a[0]) + "x" + std::to_string(a[1]);
  };
  return "conv(" + std::to_string(s.in_channels) + "->" + std::to_string(s.out_channels) + ", k=" + pair(s.kernel) +
         ", s=" + pair(s.stride) + ", p=" + pair(s.padding) + ", d=" + pair(s.dilation) + ")";
}

// Output columns j for which j*s + off lands inside [0, extent).
struct ValidRange {
  std::size_t lo = 0;
  std::size_t hi = 0;  // exclusive
};

ValidRange valid_range(std::ptrdiff_t off, std::size_t stride, std::size_t in_size, std::size_t out_size) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const auto n = static_cast<std::ptrdiff_t>(in_size);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = n - 1 - off < 0 ? 0 : (n - 1 - off) / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_size));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Loop geometry shared by the forward and both backward kernels.
struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, oh, ow, sh, sw, dh, dw, ph, pw;

  std::ptrdiff_t row_offset(std::size_t u) const {
    return static_cast<std::ptrdiff_t>(u * dh) - static_cast<std::ptrdiff_t>(ph);
  }
  std::ptrdiff_t col_offset(std::size_t v) const {
    return static_cast<std::ptrdiff_t>(v * dw) - static_cast<std::ptrdiff_t>(pw);
  }
};

}  // namespace

std::size_t Conv2dSpec::extent(std::size_t axis) const { return dilation[axis] * (kernel[axis] - 1) + 1; }

void Conv2dSpec::validate() const {
  if (in_channels == 0 || out_channels == 0 || kernel[0] == 0 || kernel[1] == 0 || stride[0] == 0 ||
      stride[1] == 0 || dilation[0] == 0 || dilation[1] == 0) {
    throw ShapeError("invalid " + spec_string(*this) + ": counts, strides and dilations must be positive");
  }
}

std::array<std::size_t, 2> Conv2dSpec::output_size(std::size_t height, std::size_t width) const {
  validate();
  std::array<std::size_t, 2> out{};
  const std::array<std::size_t, 2> in{height, width};
  for (std::size_t a = 0; a < 2; ++a) {
    const std::size_t padded = in[a] + 2 * padding[a];
    if (padded < extent(a)) {
      throw ShapeError(spec_string(*this) + " on " + std::to_string(height) + "x" + std::to_string(width) +
                       " input gives non-positive output size");
    }
    out[a] = (padded - extent(a)) / stride[a] + 1;
  }
  return out;
}

Shape Conv2dSpec::weight_shape() const { return {out_channels, in_channels, kernel[0], kernel[1]}; }

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dSpec& spec) {
  spec.validate();
  if (x.rank() != 4 || x.dim(1) != spec.in_channels) {
    throw ShapeError(spec_string(spec) + ": input must be [B," + std::to_string(spec.in_channels) + ",H,W], got " +
                     to_string(x.shape()));
  }
  if (weight.shape() != spec.weight_shape()) {
    throw ShapeError(spec_string(spec) + ": weight must be " + to_string(spec.weight_shape()) + ", got " +
                     to_string(weight.shape()));
  }
  if (bias.shape() != Shape{spec.out_channels}) {
    throw ShapeError(spec_string(spec) + ": bias must be [" + std::to_string(spec.out_channels) + "], got " +
                     to_string(bias.shape()));
  }
  const auto [oh, ow] = spec.output_size(x.dim(2), x.dim(3));
  const ConvGeometry g{x.dim(0),          spec.in_channels, x.dim(2),        x.dim(3),        spec.out_channels,
                       spec.kernel[0],    spec.kernel[1],   oh,              ow,              spec.stride[0],
                       spec.stride[1],    spec.dilation[0], spec.dilation[1], spec.padding[0], spec.padding[1]};

  std::vector<double> out(g.batch * g.cout * oh * ow);
  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  const double* bd = bias.data().data();

  // Each output element accumulates bias first, then taps in (c, u, v) order.
  parallel_for(g.batch * g.cout, [&](std::size_t bo) {
    const std::size_t b = bo / g.cout;
    const std::size_t o = bo % g.cout;
    double* plane = out.data() + bo * oh * ow;
    std::fill(plane, plane + oh * ow, bd[o]);
    for (std::size_t c = 0; c < g.cin; ++c) {
      const double* xin = xd + (b * g.cin + c) * g.h * g.w;
      for (std::size_t u = 0; u < g.kh; ++u) {
        const auto ro = g.row_offset(u);
        const auto rows = valid_range(ro, g.sh, g.h, oh);
        for (std::size_t v = 0; v < g.kw; ++v) {
          const double wv = wd[((o * g.cin + c) * g.kh + u) * g.kw + v];
          const auto co = g.col_offset(v);
          const auto cols = valid_range(co, g.sw, g.w, ow);
          for (std::size_t i = rows.lo; i < rows.hi; ++i) {
            const double* xrow = xin + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i * g.sh) + ro) * g.w;
            double* orow = plane + i * ow;
            for (std::size_t j = cols.lo; j < cols.hi; ++j) {
              orow[j] += xrow[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j * g.sw) + co)] * wv;
            }
          }
        }
      }
    }
  });

  return autograd::record(
      "conv2d", Shape{g.batch, g.cout, oh, ow}, std::move(out), {x, weight, bias},
      [x, weight, g](std::span<const double> gout, autograd::GradSinks gin) {
        const double* xd = x.data().data();
        const double* wd = weight.data().data();
        const std::size_t plane = g.oh * g.ow;
        if (auto* gb = gin[2]) {
          for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t o = 0; o < g.cout; ++o) {
              const double* gp = gout.data() + (b * g.cout + o) * plane;
              double acc = 0.0;
              for (std::size_t k = 0; k < plane; ++k) acc += gp[k];
              (*gb)[o] += acc;
            }
        }
        if (auto* gw = gin[1]) {
          parallel_for(g.cout, [&](std::size_t o) {
            for (std::size_t c = 0; c < g.cin; ++c)
              for (std::size_t u = 0; u < g.kh; ++u) {
                const auto ro = g.row_offset(u);
                const auto rows = valid_range(ro, g.sh, g.h, g.oh);
                for (std::size_t v = 0; v < g.kw; ++v) {
                  const auto co = g.col_offset(v);
                  const auto cols = valid_range(co, g.sw, g.w, g.ow);
                  double acc = 0.0;
                  for (std::size_t b = 0; b < g.batch; ++b) {
                    const double* xin = xd + (b * g.cin + c) * g.h * g.w;
                    const double* gp = gout.data() + (b * g.cout + o) * plane;
                    for (std::size_t i = rows.lo; i < rows.hi; ++i) {
                      const double* xrow =
                          xin + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i * g.sh) + ro) * g.w;
                      const double* grow = gp + i * g.ow;
                      for (std::size_t j = cols.lo; j < cols.hi; ++j) {
                        acc += grow[j] * xrow[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j * g.sw) + co)];
                      }
                    }
                  }
                  (*gw)[((o * g.cin + c) * g.kh + u) * g.kw + v] += acc;
                }
              }
          });
        }
        if (auto* gx = gin[0]) {
          parallel_for(g.batch, [&](std::size_t b) {
            for (std::size_t o = 0; o < g.cout; ++o) {
              const double* gp = gout.data() + (b * g.cout + o) * plane;
              for (std::size_t c = 0; c < g.cin; ++c) {
                double* gxin = gx->data() + (b * g.cin + c) * g.h * g.w;
                for (std::size_t u = 0; u < g.kh; ++u) {
                  const auto ro = g.row_offset(u);
                  const auto rows = valid_range(ro, g.sh, g.h, g.oh);
                  for (std::size_t v = 0; v < g.kw; ++v) {
                    const double wv = wd[((o * g.cin + c) * g.kh + u) * g.kw + v];
                    const auto co = g.col_offset(v);
                    const auto cols = valid_range(co, g.sw, g.w, g.ow);
                    for (std::size_t i = rows.lo; i < rows.hi; ++i) {
                      double* xrow =
                          gxin + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i * g.sh) + ro) * g.w;
                      const double* grow = gp + i * g.ow;
                      for (std::size_t j = cols.lo; j < cols.hi; ++j) {
                        xrow[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j * g.sw) + co)] += wv * grow[j];
                      }
                    }
                  }
                }
              }
            }
          });
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0) || bias.shape() != Shape{weight.dim(1)}) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()) + " and bias " + to_string(bias.shape()));
  }
  if (x.rank() == 1) return add(reshape(matmul(reshape(x, {1, x.dim(0)}), weight), {weight.dim(1)}), bias);
  return add(matmul(x, weight), bias);
}

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::gelu:
      return gelu(x);
    case Activation::relu:
      return relu(x);
    case Activation::identity:
      return x;
  }
  return x;
}

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::gelu:
      return "gelu";
    case Activation::relu:
      return "relu";
    case Activation::identity:
      return "identity";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64* rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (rate == 0.0 || rng == nullptr) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  const double scale = 1.0 / (1.0 - rate);
  for (auto& m : *mask) m = keep(*rng) ? scale : 0.0;
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * (*mask)[i];
  return autograd::record("dropout", x.shape(), std::move(out), {x},
                          [mask](std::span<const double> g, autograd::GradSinks gin) {
                            auto& gx = *gin[0];
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
                          });
}

double AttentionSpec::scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim())); }

void AttentionSpec::validate() const {
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ShapeError("attention: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                     std::to_string(num_heads));
  }
}

Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, const AttentionSpec& spec,
                            std::mt19937_64* dropout_rng, Tensor* weights) {
  spec.validate();
  if (x.rank() != 3 || x.dim(2) != spec.embed_dim) {
    throw ShapeError("attention: input must be [B,N," + std::to_string(spec.embed_dim) + "], got " +
                     to_string(x.shape()));
  }
  const std::size_t b = x.dim(0);
  const std::size_t n = x.dim(1);
  const std::size_t h = spec.num_heads;
  const std::size_t d = spec.head_dim();
  auto heads = [&](const Tensor& t) { return permute(reshape(t, {b, n, h, d}), {0, 2, 1, 3}); };

  const Tensor q = heads(linear(x, p.wq, p.bq));
  const Tensor k = heads(linear(x, p.wk, p.bk));
  const Tensor v = heads(linear(x, p.wv, p.bv));
  const Tensor scores = mul_scalar(matmul(q, transpose(k, -1, -2)), spec.scale());
  Tensor attn = softmax(scores, -1);
  if (weights) *weights = attn;
  attn = dropout(attn, spec.dropout, dropout_rng);
  const Tensor ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, n, spec.embed_dim});
  return linear(ctx, p.wo, p.bo);
}

Tensor trunc_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    x = z * stddev;
  }
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), -bound, bound, rng, true);
}

}  // namespace covt
