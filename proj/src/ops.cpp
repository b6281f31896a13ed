#include "caft/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "caft/kernels.hpp"

namespace caft::ops {

namespace {

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, const Shape& b, const std::string& why = {}) {
  std::string msg = std::string(op_name(kind)) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
  if (!why.empty()) msg += " (" + why + ")";
  throw ShapeError(msg);
}

[[noreturn]] void shape_fail1(OpKind kind, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op_name(kind)) + ": invalid shape " + shape_str(a) + " (" + why + ")");
}

void check_finite(OpKind kind, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op_name(kind)) + ": non-finite result (overflow)");
  }
}

Tensor finish(OpKind kind, Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
              Tape::BackwardFn fn) {
  check_finite(kind, values);
  Tensor out = make_result(std::move(shape), std::move(values));
  Tape::current().record(kind, inputs, out, std::move(fn));
  return out;
}

std::size_t norm_axis(OpKind kind, const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) shape_fail1(kind, s, "axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

// Outer/inner extents around one axis.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.begin(), suffix.end(), full.end() - static_cast<std::ptrdiff_t>(suffix.size()));
}

std::vector<double>& gbuf(const Tensor& t) { return t.impl().grad_buffer(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) shape_fail(OpKind::matmul, as, bs, "operands need rank >= 2");
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) shape_fail(OpKind::matmul, as, bs, "inner extents differ");

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);

  if (bs.size() == 2) {
    // Leading-batch expansion of a 2-D right operand: one flat GEMM.
    const std::size_t rows = a.numel() / k;
    std::vector<double> out(rows * n, 0.0);
    kernels::gemm_nn(rows, n, k, a.values().data(), b.values().data(), out.data());
    return finish(OpKind::matmul, std::move(out_shape), std::move(out), {a, b},
                  [a, b, rows, n, k](std::span<const double> g) {
                    if (a.requires_grad()) kernels::gemm_nt(rows, k, n, g.data(), b.values().data(), gbuf(a).data());
                    if (b.requires_grad()) kernels::gemm_tn(rows, n, k, a.values().data(), g.data(), gbuf(b).data());
                  });
  }

  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
    shape_fail(OpKind::matmul, as, bs, "batch extents differ");
  }
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    kernels::gemm_nn(m, n, k, a.values().data() + t * m * k, b.values().data() + t * k * n, out.data() + t * m * n);
  }
  return finish(OpKind::matmul, std::move(out_shape), std::move(out), {a, b},
                [a, b, batch, m, n, k](std::span<const double> g) {
                  for (std::size_t t = 0; t < batch; ++t) {
                    const double* gt = g.data() + t * m * n;
                    if (a.requires_grad())
                      kernels::gemm_nt(m, k, n, gt, b.values().data() + t * k * n, gbuf(a).data() + t * m * k);
                    if (b.requires_grad())
                      kernels::gemm_tn(m, n, k, a.values().data() + t * m * k, gt, gbuf(b).data() + t * k * n);
                  }
                });
}

namespace {

template <bool Multiply>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b) {
  if (!is_suffix(a.shape(), b.shape())) shape_fail(kind, a.shape(), b.shape(), "second operand must match a suffix");
  const std::size_t nb = b.numel();
  const std::size_t reps = a.numel() / nb;
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < nb; ++i) {
      const std::size_t j = r * nb + i;
      out[j] = Multiply ? av[j] * bv[i] : av[j] + bv[i];
    }
  }
  return finish(kind, a.shape(), std::move(out), {a, b}, [a, b, nb, reps](std::span<const double> g) {
    if (a.requires_grad()) {
      auto& ga = gbuf(a);
      if constexpr (Multiply) {
        const auto bv = b.values();
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < nb; ++i) ga[r * nb + i] += g[r * nb + i] * bv[i];
      } else {
        for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
      }
    }
    if (b.requires_grad()) {
      auto& gb = gbuf(b);
      const auto av = a.values();
      for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t i = 0; i < nb; ++i) {
          if constexpr (Multiply) {
            gb[i] += g[r * nb + i] * av[r * nb + i];
          } else {
            gb[i] += g[r * nb + i];
          }
        }
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary<false>(OpKind::add, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary<true>(OpKind::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return finish(OpKind::scale, a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) {
    auto& ga = gbuf(a);
    for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * factor;
  });
}

Tensor scale(const Tensor& a, const Tensor& factor) {
  if (factor.numel() != 1) shape_fail(OpKind::scale, a.shape(), factor.shape(), "factor must hold one value");
  const double f = factor.values()[0];
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= f;
  return finish(OpKind::scale, a.shape(), std::move(out), {a, factor}, [a, factor](std::span<const double> g) {
    const double f = factor.values()[0];
    if (a.requires_grad()) {
      auto& ga = gbuf(a);
      for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * f;
    }
    if (factor.requires_grad()) {
      const auto av = a.values();
      double s = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) s += g[j] * av[j];
      gbuf(factor)[0] += s;
    }
  });
}

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm) {
  const auto& s = a.shape();
  const std::size_t r = s.size();
  {
    std::vector<std::size_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> iota(r);
    std::iota(iota.begin(), iota.end(), 0);
    if (sorted != iota) shape_fail1(OpKind::transpose, s, "permutation does not match rank");
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  // Stride in the input for each output axis.
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[perm[i]];

  const std::size_t total = a.numel();
  std::vector<std::size_t> map(total);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < total; ++o) {
      map[o] = off;
      for (std::size_t ax = r; ax-- > 0;) {
        ++idx[ax];
        off += src_stride[ax];
        if (idx[ax] < out_shape[ax]) break;
        off -= src_stride[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  }
  const auto av = a.values();
  std::vector<double> out(total);
  for (std::size_t o = 0; o < total; ++o) out[o] = av[map[o]];
  return finish(OpKind::transpose, std::move(out_shape), std::move(out), {a},
                [a, map = std::move(map)](std::span<const double> g) {
                  auto& ga = gbuf(a);
                  for (std::size_t o = 0; o < g.size(); ++o) ga[map[o]] += g[o];
                });
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) shape_fail1(OpKind::transpose, a.shape(), "rank < 2");
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return transpose(a, perm);
}

Tensor reshape(const Tensor& a, Shape shape) {
  for (auto e : shape)
    if (e == 0) shape_fail(OpKind::reshape, a.shape(), shape, "zero extent");
  if (shape_numel(shape) != a.numel()) shape_fail(OpKind::reshape, a.shape(), shape, "element counts differ");
  std::vector<double> out(a.values().begin(), a.values().end());
  return finish(OpKind::reshape, std::move(shape), std::move(out), {a}, [a](std::span<const double> g) {
    auto& ga = gbuf(a);
    for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const auto& s0 = parts[0].shape();
  const std::size_t ax = norm_axis(OpKind::concat, s0, axis);
  Shape out_shape = s0;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != s0.size()) shape_fail(OpKind::concat, s0, s, "rank differs");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != s0[i]) shape_fail(OpKind::concat, s0, s, "non-concat extents differ");
    out_shape[ax] += s[ax];
  }
  const auto split = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.shape()[ax] * split.inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * split.n * split.inner + off * split.inner);
    off += p.shape()[ax];
  }
  return finish(OpKind::concat, std::move(out_shape), std::move(out), parts,
                [parts, offsets, split, ax](std::span<const double> g) {
                  for (std::size_t q = 0; q < parts.size(); ++q) {
                    const auto& p = parts[q];
                    if (!p.requires_grad()) continue;
                    auto& gp = gbuf(p);
                    const std::size_t chunk = p.shape()[ax] * split.inner;
                    for (std::size_t o = 0; o < split.outer; ++o) {
                      const double* src = g.data() + o * split.n * split.inner + offsets[q] * split.inner;
                      double* dst = gp.data() + o * chunk;
                      for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                    }
                  }
                });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(OpKind::slice, a.shape(), axis);
  if (begin >= end || end > a.shape()[ax]) {
    shape_fail1(OpKind::slice, a.shape(),
                "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " + std::to_string(ax));
  }
  const auto split = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t chunk = (end - begin) * split.inner;
  std::vector<double> out(split.outer * chunk);
  const auto av = a.values();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(av.data() + o * split.n * split.inner + begin * split.inner, chunk, out.data() + o * chunk);
  return finish(OpKind::slice, std::move(out_shape), std::move(out), {a},
                [a, split, begin, chunk](std::span<const double> g) {
                  auto& ga = gbuf(a);
                  for (std::size_t o = 0; o < split.outer; ++o) {
                    double* dst = ga.data() + o * split.n * split.inner + begin * split.inner;
                    const double* src = g.data() + o * chunk;
                    for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                  }
                });
}

Tensor softmax_last(const Tensor& a) {
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  std::vector<double> out(a.values().begin(), a.values().end());
  kernels::softmax_rows(rows, cols, out.data());
  auto y = std::make_shared<std::vector<double>>(out);
  return finish(OpKind::softmax_last, a.shape(), std::move(out), {a}, [a, y, rows, cols](std::span<const double> g) {
    auto& ga = gbuf(a);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y->data() + r * cols;
      const double* gr = g.data() + r * cols;
      const double d = kernels::dot(yr, gr, cols);
      double* out = ga.data() + r * cols;
      for (std::size_t j = 0; j < cols; ++j) out[j] += yr[j] * (gr[j] - d);
    }
  });
}

namespace {

template <typename F, typename D>
Tensor unary(OpKind kind, const Tensor& a, F f, D dfdx) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t j = 0; j < av.size(); ++j) out[j] = f(av[j]);
  auto y = std::make_shared<std::vector<double>>(out);
  return finish(kind, a.shape(), std::move(out), {a}, [a, y, dfdx](std::span<const double> g) {
    auto& ga = gbuf(a);
    const auto av = a.values();
    for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * dfdx(av[j], (*y)[j]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor sigmoid(const Tensor& a) {
  return unary(OpKind::sigmoid, a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input produces a non-finite result");
  }
  return unary(OpKind::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary(OpKind::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_sigmoid(const Tensor& a) {
  // log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|)); derivative is sigmoid(-x).
  return unary(
      OpKind::log_sigmoid, a, [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return stable_sigmoid(-x); });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      OpKind::gelu, a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  if (gain.defined() && gain.numel() != d) shape_fail(OpKind::layernorm, x.shape(), gain.shape(), "gain extent");
  if (bias.defined() && bias.numel() != d) shape_fail(OpKind::layernorm, x.shape(), bias.shape(), "bias extent");
  const auto xv = x.values();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const double* gv = gain.defined() ? gain.values().data() : nullptr;
  const double* bv = bias.defined() ? bias.values().data() : nullptr;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * (gv ? gv[j] : 1.0) + (bv ? bv[j] : 0.0);
    }
  }
  std::vector<Tensor> inputs{x};
  if (gain.defined()) inputs.push_back(gain);
  if (bias.defined()) inputs.push_back(bias);
  return finish(OpKind::layernorm, x.shape(), std::move(out), inputs,
                [x, gain, bias, xhat, inv_std, rows, d](std::span<const double> g) {
                  const double* gv = gain.defined() ? gain.values().data() : nullptr;
                  if (gain.defined() && gain.requires_grad()) {
                    auto& gg = gbuf(gain);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                  }
                  if (bias.defined() && bias.requires_grad()) {
                    auto& gb = gbuf(bias);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                  }
                  if (!x.requires_grad()) return;
                  auto& gx = gbuf(x);
                  std::vector<double> dh(d);
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* h = xhat->data() + r * d;
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      dh[j] = g[r * d + j] * (gv ? gv[j] : 1.0);
                      mean_dh += dh[j];
                      mean_dh_h += dh[j] * h[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    const double is = (*inv_std)[r];
                    for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += is * (dh[j] - mean_dh - h[j] * mean_dh_h);
                  }
                });
}

namespace {

Tensor reduce_axis(OpKind kind, const Tensor& a, int axis, bool mean) {
  const std::size_t ax = norm_axis(kind, a.shape(), axis);
  const auto split = split_at(a.shape(), ax);
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != ax) out_shape.push_back(a.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  const double f = mean ? 1.0 / static_cast<double>(split.n) : 1.0;
  const auto av = a.values();
  std::vector<double> out(split.outer * split.inner, 0.0);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.n; ++i)
      for (std::size_t j = 0; j < split.inner; ++j)
        out[o * split.inner + j] += av[(o * split.n + i) * split.inner + j];
  if (mean)
    for (auto& v : out) v *= f;
  return finish(kind, std::move(out_shape), std::move(out), {a}, [a, split, f](std::span<const double> g) {
    auto& ga = gbuf(a);
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t i = 0; i < split.n; ++i)
        for (std::size_t j = 0; j < split.inner; ++j)
          ga[(o * split.n + i) * split.inner + j] += g[o * split.inner + j] * f;
  });
}

}  // namespace

Tensor mean_axis(const Tensor& a, int axis) { return reduce_axis(OpKind::mean_axis, a, axis, true); }
Tensor sum_axis(const Tensor& a, int axis) { return reduce_axis(OpKind::sum_axis, a, axis, false); }

Tensor sum_all(const Tensor& a) { return sum_axis(reshape(a, {a.numel()}), 0); }
Tensor mean_all(const Tensor& a) { return mean_axis(reshape(a, {a.numel()}), 0); }

Tensor sum_unordered(const Tensor& a) {
  std::vector<double> sorted(a.values().begin(), a.values().end());
  std::sort(sorted.begin(), sorted.end());
  double s = 0.0;
  for (double v : sorted) s += v;
  const std::size_t n = a.numel();
  return finish(OpKind::sum_axis, {1}, {s}, {a}, [a, n](std::span<const double> g) {
    auto& ga = gbuf(a);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
  });
}

Tensor l2_normalize_last(const Tensor& a) {
  constexpr double kMinNorm = 1e-12;
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  const auto av = a.values();
  std::vector<double> out(a.numel());
  auto norms = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = av.data() + r * d;
    const double n = std::max(std::sqrt(kernels::dot(xr, xr, d)), kMinNorm);
    (*norms)[r] = n;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] / n;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return finish(OpKind::l2_normalize_last, a.shape(), std::move(out), {a},
                [a, y, norms, rows, d](std::span<const double> g) {
                  auto& ga = gbuf(a);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* yr = y->data() + r * d;
                    const double* gr = g.data() + r * d;
                    const double dd = kernels::dot(yr, gr, d);
                    const double n = (*norms)[r];
                    for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += (gr[j] - yr[j] * dd) / n;
                  }
                });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids, Shape lead) {
  if (table.rank() != 2) shape_fail1(OpKind::embedding_lookup, table.shape(), "table must be rank 2");
  if (shape_numel(lead) != ids.size() || ids.empty()) {
    shape_fail(OpKind::embedding_lookup, table.shape(), lead, "id count does not match output lead shape");
  }
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  for (auto id : ids) {
    if (id >= v) {
      throw ShapeError("embedding-lookup: id " + std::to_string(id) + " out of range for table " +
                       shape_str(table.shape()));
    }
  }
  const auto tv = table.values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  lead.push_back(d);
  return finish(OpKind::embedding_lookup, std::move(lead), std::move(out), {table},
                [table, ids, d](std::span<const double> g) {
                  auto& gt = gbuf(table);
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    double* dst = gt.data() + ids[i] * d;
                    for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                  }
                });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
  return embedding_lookup(table, ids, Shape{ids.size()});
}

Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, const Shape& mask_shape, double value) {
  if (!is_suffix(x.shape(), mask_shape) || shape_numel(mask_shape) != mask.size()) {
    shape_fail(OpKind::masked_fill, x.shape(), mask_shape, "mask must match a suffix");
  }
  const std::size_t nm = mask.size();
  const auto xv = x.values();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t j = 0; j < out.size(); ++j)
    if (mask[j % nm]) out[j] = value;
  return finish(OpKind::masked_fill, x.shape(), std::move(out), {x}, [x, mask, nm](std::span<const double> g) {
    auto& gx = gbuf(x);
    for (std::size_t j = 0; j < g.size(); ++j)
      if (!mask[j % nm]) gx[j] += g[j];
  });
}

}  // namespace caft::ops
