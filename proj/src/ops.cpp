// SPDX-License-Identifier: Apache-2.0
#include "covt/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include "covt/error.hpp"

namespace covt {

namespace detail {

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace detail

namespace {

using detail::normalize_axis;

// Strides of `in` laid over `out`, zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t ii = in.size() - 1 - i;
    const std::size_t oi = out.size() - 1 - i;
    st[oi] = in[ii] == 1 ? 0 : stride;
    stride *= in[ii];
  }
  return st;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Row-major outer/axis/inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class Fwd, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd f, DA da, DB db) {
  const Shape out = broadcast_shapes(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  std::vector<double> data(numel(out));
  const auto x = a.data();
  const auto y = b.data();
  for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    data[o] = f(x[ia], y[ib]);
  });
  return autograd::record(name, out, std::move(data), {a, b},
                          [a, b, out, sa, sb, da, db](std::span<const double> g, autograd::GradSinks gin) {
                            const auto x = a.data();
                            const auto y = b.data();
                            auto* ga = gin[0];
                            auto* gb = gin[1];
                            for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                              if (ga) (*ga)[ia] += g[o] * da(x[ia], y[ib]);
                              if (gb) (*gb)[ib] += g[o] * db(x[ia], y[ib]);
                            });
                          });
}

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd f, Deriv df) {
  const auto in = x.data();
  std::vector<double> data(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) data[i] = f(in[i]);
  return autograd::record(name, x.shape(), std::move(data), {x},
                          [x, df](std::span<const double> g, autograd::GradSinks gin) {
                            const auto in = x.data();
                            auto& gx = *gin[0];
                            for (std::size_t i = 0; i < in.size(); ++i) gx[i] += g[i] * df(in[i]);
                          });
}

// c[M,P] += a[M,K] * b[K,P]; per-element accumulation runs over k ascending.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a[i * k + kk];
      const double* brow = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// da[M,K] += g[M,P] * b[K,P]^T
void gemm_nt(const double* g, const double* b, double* da, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      double acc = 0.0;
      const double* grow = g + i * p;
      const double* brow = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
      da[i * k + kk] += acc;
    }
  }
}

// db[K,P] += a[M,K]^T * g[M,P]
void gemm_tn(const double* a, const double* g, double* db, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a[i * k + kk];
      double* drow = db + kk * p;
      for (std::size_t j = 0; j < p; ++j) drow[j] += av * grow[j];
    }
  }
}

double gelu_fwd(double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); }

double gelu_deriv(double v) {
  const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + v * pdf;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary("add_scalar", x, [s](double v) { return v + s; }, [](double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary("mul_scalar", x, [s](double v) { return v * s; }, [s](double) { return s; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) { return unary("gelu", x, gelu_fwd, gelu_deriv); }

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t p = b.dim(-1);
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(batch_a, batch_b);
  } catch (const ShapeError&) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto sa = broadcast_strides(batch_a, batch);
  const auto sb = broadcast_strides(batch_b, batch);

  // (output matrix, a matrix, b matrix) index triples
  std::vector<std::array<std::size_t, 3>> plan;
  plan.reserve(numel(batch));
  for_each_broadcast(batch, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) { plan.push_back({o, ia, ib}); });

  Shape out = batch;
  out.push_back(m);
  out.push_back(p);
  std::vector<double> data(numel(out), 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (const auto& [o, ia, ib] : plan) gemm_nn(ad + ia * m * k, bd + ib * k * p, data.data() + o * m * p, m, k, p);

  return autograd::record("matmul", out, std::move(data), {a, b},
                          [a, b, plan, m, k, p](std::span<const double> g, autograd::GradSinks gin) {
                            const double* ad = a.data().data();
                            const double* bd = b.data().data();
                            for (const auto& [o, ia, ib] : plan) {
                              const double* go = g.data() + o * m * p;
                              if (gin[0]) gemm_nt(go, bd + ib * k * p, gin[0]->data() + ia * m * k, m, k, p);
                              if (gin[1]) gemm_tn(ad + ia * m * k, go, gin[1]->data() + ib * k * p, m, k, p);
                            }
                          });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<double> data(x.data().begin(), x.data().end());
  return autograd::record("reshape", std::move(shape), std::move(data), {x},
                          [](std::span<const double> g, autograd::GradSinks gin) {
                            auto& gx = *gin[0];
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch for " + to_string(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation for " + to_string(x.shape()));
    seen[p] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  Shape out(r);
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = x.shape()[perm[i]];
    st[i] = in_strides[perm[i]];
  }
  // source offset for each destination element
  std::vector<std::size_t> src(x.size());
  const std::vector<std::size_t> zero(r, 0);
  for_each_broadcast(out, st, zero, [&](std::size_t o, std::size_t is, std::size_t) { src[o] = is; });

  const auto in = x.data();
  std::vector<double> data(in.size());
  for (std::size_t o = 0; o < data.size(); ++o) data[o] = in[src[o]];
  return autograd::record("permute", out, std::move(data), {x},
                          [src = std::move(src)](std::span<const double> g, autograd::GradSinks gin) {
                            auto& gx = *gin[0];
                            for (std::size_t o = 0; o < g.size(); ++o) gx[src[o]] += g[o];
                          });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  std::vector<std::size_t> perm(x.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[normalize_axis(axis0, x.rank())], perm[normalize_axis(axis1, x.rank())]);
  return permute(x, perm);
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: cannot expand " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const auto sx = broadcast_strides(x.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  std::vector<double> data(numel(shape));
  const auto in = x.data();
  for_each_broadcast(shape, sx, zero, [&](std::size_t o, std::size_t i, std::size_t) { data[o] = in[i]; });
  return autograd::record("broadcast_to", shape, std::move(data), {x},
                          [shape, sx, zero](std::span<const double> g, autograd::GradSinks gin) {
                            auto& gx = *gin[0];
                            for_each_broadcast(shape, sx, zero,
                                               [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += g[o]; });
                          });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape out = parts[0].shape();
  out[ax] = 0;
  for (const auto& t : parts) {
    bool ok = t.rank() == out.size();
    for (std::size_t i = 0; ok && i < out.size(); ++i) ok = i == ax || t.shape()[i] == out[i];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + to_string(parts[0].shape()) + " and " + to_string(t.shape()));
    }
    out[ax] += t.shape()[ax];
  }
  const auto s = split_at(out, ax);
  std::vector<double> data(numel(out));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : parts) {
    offsets.push_back(off);
    const std::size_t len = t.shape()[ax];
    const auto in = t.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(in.begin() + o * len * s.inner, len * s.inner, data.begin() + (o * s.len + off) * s.inner);
    }
    off += len;
  }
  return autograd::record("concat", out, std::move(data), parts,
                          [parts, offsets, s, ax](std::span<const double> g, autograd::GradSinks gin) {
                            for (std::size_t p = 0; p < parts.size(); ++p) {
                              if (!gin[p]) continue;
                              const std::size_t len = parts[p].shape()[ax];
                              auto& gx = *gin[p];
                              for (std::size_t o = 0; o < s.outer; ++o) {
                                const double* src = g.data() + (o * s.len + offsets[p]) * s.inner;
                                double* dst = gx.data() + o * len * s.inner;
                                for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                              }
                            }
                          });
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  if (begin >= end || end > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                     std::to_string(ax) + " of " + to_string(x.shape()));
  }
  const auto s = split_at(x.shape(), ax);
  Shape out = x.shape();
  out[ax] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> data(numel(out));
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(in.begin() + (o * s.len + begin) * s.inner, len * s.inner, data.begin() + o * len * s.inner);
  }
  return autograd::record("slice", out, std::move(data), {x},
                          [s, begin, len](std::span<const double> g, autograd::GradSinks gin) {
                            auto& gx = *gin[0];
                            for (std::size_t o = 0; o < s.outer; ++o) {
                              const double* src = g.data() + o * len * s.inner;
                              double* dst = gx.data() + (o * s.len + begin) * s.inner;
                              for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                            }
                          });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return autograd::record("sum", Shape{}, {acc}, {x}, [](std::span<const double> g, autograd::GradSinks gin) {
    for (auto& v : *gin[0]) v += g[0];
  });
}

Tensor sum_over_axis(const Tensor& x, int axis, bool keep) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  Shape out = x.shape();
  if (keep) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<double> data(s.outer * s.inner, 0.0);
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) data[o * s.inner + i] += in[(o * s.len + l) * s.inner + i];
  return autograd::record("sum_over_axis", out, std::move(data), {x},
                          [s](std::span<const double> g, autograd::GradSinks gin) {
                            auto& gx = *gin[0];
                            for (std::size_t o = 0; o < s.outer; ++o)
                              for (std::size_t l = 0; l < s.len; ++l)
                                for (std::size_t i = 0; i < s.inner; ++i)
                                  gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
                          });
}

Tensor mean_over_axis(const Tensor& x, int axis, bool keep) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  Shape out = x.shape();
  if (keep) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<double> data(s.outer * s.inner);
  std::vector<double> column(s.len);
  const auto in = x.data();
  const double n = static_cast<double>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      for (std::size_t l = 0; l < s.len; ++l) column[l] = in[(o * s.len + l) * s.inner + i];
      std::sort(column.begin(), column.end());
      double acc = 0.0;
      for (double v : column) acc += v - column[0];
      data[o * s.inner + i] = column[0] + acc / n;
    }
  }
  return autograd::record("mean_over_axis", out, std::move(data), {x},
                          [s, n](std::span<const double> g, autograd::GradSinks gin) {
                            auto& gx = *gin[0];
                            for (std::size_t o = 0; o < s.outer; ++o)
                              for (std::size_t l = 0; l < s.len; ++l)
                                for (std::size_t i = 0; i < s.inner; ++i)
                                  gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i] / n;
                          });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  const auto in = x.data();
  std::vector<double> y(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, in[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(in[base + l * s.inner] - mx);
        y[base + l * s.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] /= z;
    }
  }
  auto saved = std::make_shared<const std::vector<double>>(y);
  return autograd::record("softmax", x.shape(), std::move(y), {x},
                          [s, saved](std::span<const double> g, autograd::GradSinks gin) {
                            const auto& y = *saved;
                            auto& gx = *gin[0];
                            for (std::size_t o = 0; o < s.outer; ++o) {
                              for (std::size_t i = 0; i < s.inner; ++i) {
                                const std::size_t base = o * s.len * s.inner + i;
                                double dot = 0.0;
                                for (std::size_t l = 0; l < s.len; ++l)
                                  dot += g[base + l * s.inner] * y[base + l * s.inner];
                                for (std::size_t l = 0; l < s.len; ++l) {
                                  const std::size_t k = base + l * s.inner;
                                  gx[k] += y[k] * (g[k] - dot);
                                }
                              }
                            }
                          });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  const auto in = x.data();
  std::vector<double> y(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, in[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += std::exp(in[base + l * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] = in[base + l * s.inner] - lse;
    }
  }
  auto saved = std::make_shared<const std::vector<double>>(y);
  return autograd::record("log_softmax", x.shape(), std::move(y), {x},
                          [s, saved](std::span<const double> g, autograd::GradSinks gin) {
                            const auto& y = *saved;
                            auto& gx = *gin[0];
                            for (std::size_t o = 0; o < s.outer; ++o) {
                              for (std::size_t i = 0; i < s.inner; ++i) {
                                const std::size_t base = o * s.len * s.inner + i;
                                double gsum = 0.0;
                                for (std::size_t l = 0; l < s.len; ++l) gsum += g[base + l * s.inner];
                                for (std::size_t l = 0; l < s.len; ++l) {
                                  const std::size_t k = base + l * s.inner;
                                  gx[k] += g[k] - std::exp(y[k]) * gsum;
                                }
                              }
                            }
                          });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(-1) ||
      beta.dim(0) != x.dim(-1)) {
    throw ShapeError("layer_norm: shape mismatch " + to_string(x.shape()) + " with gamma " +
                     to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
  }
  const std::size_t c = x.dim(-1);
  const std::size_t rows = x.size() / c;
  const auto in = x.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> y(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * rs;
      (*xhat)[r * c + j] = h;
      y[r * c + j] = h * gm[j] + bt[j];
    }
  }
  return autograd::record(
      "layer_norm", x.shape(), std::move(y), {x, gamma, beta},
      [gamma, xhat, rstd, c, rows](std::span<const double> g, autograd::GradSinks gin) {
        const auto gm = gamma.data();
        const auto& h = *xhat;
        const double n = static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          const double* hr = h.data() + r * c;
          if (gin[1]) {
            for (std::size_t j = 0; j < c; ++j) (*gin[1])[j] += gr[j] * hr[j];
          }
          if (gin[2]) {
            for (std::size_t j = 0; j < c; ++j) (*gin[2])[j] += gr[j];
          }
          if (gin[0]) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = gr[j] * gm[j];
              mean_dh += dh;
              mean_dh_h += dh * hr[j];
            }
            mean_dh /= n;
            mean_dh_h /= n;
            double* gx = gin[0]->data() + r * c;
            for (std::size_t j = 0; j < c; ++j) {
              gx[j] += (*rstd)[r] * (gr[j] * gm[j] - mean_dh - hr[j] * mean_dh_h);
            }
          }
        }
      });
}

Tensor take_along_last(const Tensor& x, std::span<const std::size_t> index) {
  if (x.rank() < 1) throw ShapeError("take_along_last: scalar input");
  const std::size_t k = x.dim(-1);
  const std::size_t rows = x.size() / k;
  if (index.size() != rows) {
    throw ShapeError("take_along_last: " + std::to_string(index.size()) + " indices for " + to_string(x.shape()));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (auto i : idx) {
    if (i >= k) throw ShapeError("take_along_last: index " + std::to_string(i) + " out of range " + std::to_string(k));
  }
  Shape out(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> data(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) data[r] = in[r * k + idx[r]];
  return autograd::record("take_along_last", out, std::move(data), {x},
                          [idx = std::move(idx), k](std::span<const double> g, autograd::GradSinks gin) {
                            auto& gx = *gin[0];
                            for (std::size_t r = 0; r < idx.size(); ++r) gx[r * k + idx[r]] += g[r];
                          });
}

const std::vector<std::string>& differentiable_ops() {
  static const std::vector<std::string> ops = {
      "add",         "sub",          "mul",           "add_scalar",     "mul_scalar",  "relu",
      "gelu",        "exp",          "log",           "matmul",         "reshape",     "permute",
      "broadcast_to", "concat",      "slice",         "sum",            "sum_over_axis", "mean_over_axis",
      "softmax",     "log_softmax",  "layer_norm",    "take_along_last", "conv2d",     "dropout"};
  return ops;
}

}  // namespace covt
