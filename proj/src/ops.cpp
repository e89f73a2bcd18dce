#include "cellstn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>

#include "cellstn/errors.hpp"
#include "cellstn/kernels.hpp"

namespace cellstn {
namespace {

using kernels::Trans;

struct ImageDims {
  std::size_t n, c, h, w;
  bool batched;
  std::size_t plane() const { return h * w; }
  std::size_t image() const { return c * h * w; }
};

ImageDims image_dims(const Tensor& t, const char* what) {
  const Shape& s = t.shape();
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw DimensionError(std::string(what) + ": expected [C,H,W] or [N,C,H,W], got " + shape_string(s));
}

Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  if (d.batched) return {d.n, c, h, w};
  return {c, h, w};
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
}

struct ConvGeometry {
  std::size_t ci, h, w;
  std::size_t co, kh, kw;
  std::size_t stride, ph, pw;
  std::size_t ho, wo;
  std::size_t patch() const { return ci * kh * kw; }
  std::size_t out_plane() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && ph == 0 && pw == 0; }
};

std::vector<double>& scratch(int slot) {
  thread_local std::vector<double> buffers[2];
  return buffers[slot];
}

void im2col(const ConvGeometry& g, const double* in, double* col) {
  const std::size_t P = g.out_plane();
  for (std::size_t c = 0; c < g.ci; ++c) {
    const double* plane = in + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ki) - std::ptrdiff_t(g.ph);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = plane + std::size_t(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kj) - std::ptrdiff_t(g.pw);
            dst[ox] = (ix < 0 || ix >= std::ptrdiff_t(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* in) {
  const std::size_t P = g.out_plane();
  for (std::size_t c = 0; c < g.ci; ++c) {
    double* plane = in + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ki) - std::ptrdiff_t(g.ph);
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) continue;
          double* dst = plane + std::size_t(iy) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kj) - std::ptrdiff_t(g.pw);
            if (ix >= 0 && ix < std::ptrdiff_t(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel_t, const Tensor& bias, Padding padding,
              std::size_t stride) {
  const ImageDims d = image_dims(input, "conv2d input");
  const Shape& ks = kernel_t.shape();
  if (ks.size() != 4)
    throw DimensionError("conv2d: kernels must be [C_out,C_in,kH,kW], got " + shape_string(ks));
  if (ks[1] != d.c)
    throw DimensionError("conv2d: input channel axis has " + std::to_string(d.c) +
                         " but kernels axis 1 has " + std::to_string(ks[1]));
  if (ks[2] % 2 == 0 || ks[3] % 2 == 0)
    throw DimensionError("conv2d: kernel sides (axes 2,3) must be odd, got " + shape_string(ks));
  if (bias.shape() != Shape{ks[0]})
    throw DimensionError("conv2d: bias must be [" + std::to_string(ks[0]) + "], got " +
                         shape_string(bias.shape()));
  if (stride == 0) throw ContractError("conv2d: stride must be positive");

  ConvGeometry g{};
  g.ci = d.c;
  g.h = d.h;
  g.w = d.w;
  g.co = ks[0];
  g.kh = ks[2];
  g.kw = ks[3];
  g.stride = stride;
  g.ph = padding == Padding::same ? (g.kh - 1) / 2 : 0;
  g.pw = padding == Padding::same ? (g.kw - 1) / 2 : 0;
  if (g.h + 2 * g.ph < g.kh || g.w + 2 * g.pw < g.kw)
    throw DimensionError("conv2d: kernel " + shape_string(ks) + " larger than input " +
                         shape_string(input.shape()));
  g.ho = (g.h + 2 * g.ph - g.kh) / stride + 1;
  g.wo = (g.w + 2 * g.pw - g.kw) / stride + 1;

  const std::size_t K = g.patch();
  const std::size_t P = g.out_plane();
  std::vector<double> out(d.n * g.co * P);
  const double* in = input.values().data();
  const double* wts = kernel_t.values().data();
  const double* b = bias.values().data();
  std::vector<double>& col = scratch(0);
  if (!g.pointwise()) col.resize(K * P);
  for (std::size_t n = 0; n < d.n; ++n) {
    const double* in_n = in + n * d.image();
    const double* cols = in_n;
    if (!g.pointwise()) {
      im2col(g, in_n, col.data());
      cols = col.data();
    }
    double* out_n = out.data() + n * g.co * P;
    for (std::size_t co = 0; co < g.co; ++co) std::fill(out_n + co * P, out_n + (co + 1) * P, b[co]);
    kernels::gemm(Trans::no, Trans::no, g.co, P, K, wts, K, cols, P, out_n, P, true);
  }

  return make_op_result(
      image_shape(d, g.co, g.ho, g.wo), std::move(out), {input, kernel_t, bias},
      [g, d](BackwardContext& ctx) {
        const std::size_t K = g.patch();
        const std::size_t P = g.out_plane();
        const double* dout = ctx.out_grad().data();
        const double* in = ctx.input_value(0).data();
        const double* wts = ctx.input_value(1).data();
        if (ctx.needs_grad(2)) {
          double* db = ctx.input_grad(2).data();
          for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t co = 0; co < g.co; ++co) {
              const double* row = dout + (n * g.co + co) * P;
              double s = 0.0;
              for (std::size_t p = 0; p < P; ++p) s += row[p];
              db[co] += s;
            }
        }
        std::vector<double>& col = scratch(0);
        std::vector<double>& dcol = scratch(1);
        if (!g.pointwise()) {
          col.resize(K * P);
          dcol.resize(K * P);
        }
        double* dw = ctx.needs_grad(1) ? ctx.input_grad(1).data() : nullptr;
        double* din = ctx.needs_grad(0) ? ctx.input_grad(0).data() : nullptr;
        for (std::size_t n = 0; n < d.n; ++n) {
          const double* in_n = in + n * d.image();
          const double* dout_n = dout + n * g.co * P;
          if (dw) {
            const double* cols = in_n;
            if (!g.pointwise()) {
              im2col(g, in_n, col.data());
              cols = col.data();
            }
            kernels::gemm(Trans::no, Trans::yes, g.co, K, P, dout_n, P, cols, P, dw, K, true);
          }
          if (din) {
            double* din_n = din + n * d.image();
            if (g.pointwise()) {
              kernels::gemm(Trans::yes, Trans::no, K, P, g.co, wts, K, dout_n, P, din_n, P, true);
            } else {
              kernels::gemm(Trans::yes, Trans::no, K, P, g.co, wts, K, dout_n, P, dcol.data(), P, false);
              col2im_add(g, dcol.data(), din_n);
            }
          }
        }
      });
}

namespace {

Tensor pooled_result(const Tensor& input, const ImageDims& d, std::size_t ho, std::size_t wo, std::vector<double> out,
                     std::shared_ptr<std::vector<std::uint32_t>> argmax) {
  const std::size_t planes = d.n * d.c;
  const std::size_t out_plane = ho * wo;
  const std::size_t in_plane = d.plane();
  return make_op_result(image_shape(d, d.c, ho, wo), std::move(out), {input},
                        [argmax, planes, out_plane, in_plane](BackwardContext& ctx) {
                          const double* dout = ctx.out_grad().data();
                          double* din = ctx.input_grad(0).data();
                          for (std::size_t pl = 0; pl < planes; ++pl)
                            for (std::size_t o = 0; o < out_plane; ++o)
                              din[pl * in_plane + (*argmax)[pl * out_plane + o]] += dout[pl * out_plane + o];
                        });
}

}  // namespace

Tensor max_pool(const Tensor& input, std::size_t window, std::size_t stride, std::size_t padding) {
  const ImageDims d = image_dims(input, "max_pool input");
  if (window == 0 || stride == 0) throw ContractError("max_pool: window and stride must be positive");
  if (d.h + 2 * padding < window || d.w + 2 * padding < window)
    throw DimensionError("max_pool: window larger than input " + shape_string(input.shape()));
  const std::size_t ho = (d.h + 2 * padding - window) / stride + 1;
  const std::size_t wo = (d.w + 2 * padding - window) / stride + 1;
  const std::size_t planes = d.n * d.c;
  std::vector<double> out(planes * ho * wo);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const double* in = input.values().data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = in + pl * d.plane();
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::uint32_t best_idx = 0;
        bool found = false;
        for (std::size_t ky = 0; ky < window; ++ky) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(padding);
          if (iy < 0 || iy >= std::ptrdiff_t(d.h)) continue;
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(padding);
            if (ix < 0 || ix >= std::ptrdiff_t(d.w)) continue;
            const std::size_t idx = std::size_t(iy) * d.w + std::size_t(ix);
            if (!found || src[idx] > best) {
              best = src[idx];
              best_idx = std::uint32_t(idx);
              found = true;
            }
          }
        }
        const std::size_t o = (pl * ho + oy) * wo + ox;
        out[o] = best;
        (*argmax)[o] = best_idx;
      }
    }
  }
  return pooled_result(input, d, ho, wo, std::move(out), std::move(argmax));
}

Tensor maxpool2d(const Tensor& input) {
  const ImageDims d = image_dims(input, "maxpool2d input");
  if (d.h % 2 != 0 || d.w % 2 != 0)
    throw DimensionError("maxpool2d: H and W must be even, got " + shape_string(input.shape()));
  const std::size_t ho = d.h / 2;
  const std::size_t wo = d.w / 2;
  std::vector<double> out(d.n * d.c * ho * wo);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const double* in = input.values().data();
  std::size_t o = 0;
  for (std::size_t pl = 0; pl < d.n * d.c; ++pl) {
    const double* src = in + pl * d.plane();
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const std::uint32_t r0 = std::uint32_t(2 * oy * d.w);
      const std::uint32_t r1 = r0 + std::uint32_t(d.w);
      for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
        const std::uint32_t x0 = std::uint32_t(2 * ox);
        std::uint32_t best = r0 + x0;
        for (std::uint32_t idx : {r0 + x0 + 1, r1 + x0, r1 + x0 + 1})
          if (src[idx] > src[best]) best = idx;
        out[o] = src[best];
        (*argmax)[o] = best;
      }
    }
  }
  return pooled_result(input, d, ho, wo, std::move(out), std::move(argmax));
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  const Shape& is = input.shape();
  const Shape& ws = weights.shape();
  if (ws.size() != 2) throw DimensionError("dense: weights must be [M,N], got " + shape_string(ws));
  const std::size_t m = ws[0];
  const std::size_t k = ws[1];
  std::size_t batch = 0;
  if (is.size() == 1 && is[0] == k)
    batch = 1;
  else if (is.size() == 2 && is[1] == k)
    batch = is[0];
  else
    throw DimensionError("dense: input " + shape_string(is) + " does not match weights " + shape_string(ws));
  if (bias.shape() != Shape{m})
    throw DimensionError("dense: bias must be [" + std::to_string(m) + "], got " + shape_string(bias.shape()));

  std::vector<double> out(batch * m);
  const double* b = bias.values().data();
  for (std::size_t r = 0; r < batch; ++r) std::copy(b, b + m, out.begin() + r * m);
  kernels::gemm(Trans::no, Trans::yes, batch, m, k, input.values().data(), k, weights.values().data(),
                k, out.data(), m, true);
  Shape out_shape = is.size() == 1 ? Shape{m} : Shape{batch, m};
  return make_op_result(std::move(out_shape), std::move(out), {input, weights, bias},
                        [batch, m, k](BackwardContext& ctx) {
                          const double* dout = ctx.out_grad().data();
                          if (ctx.needs_grad(0))
                            kernels::gemm(Trans::no, Trans::no, batch, k, m, dout, m,
                                          ctx.input_value(1).data(), k, ctx.input_grad(0).data(), k, true);
                          if (ctx.needs_grad(1))
                            kernels::gemm(Trans::yes, Trans::no, m, k, batch, dout, m,
                                          ctx.input_value(0).data(), k, ctx.input_grad(1).data(), k, true);
                          if (ctx.needs_grad(2)) {
                            double* db = ctx.input_grad(2).data();
                            for (std::size_t r = 0; r < batch; ++r)
                              for (std::size_t j = 0; j < m; ++j) db[j] += dout[r * m + j];
                          }
                        });
}

Tensor relu(const Tensor& input) {
  std::vector<double> out(input.size());
  kernels::relu_forward(out.size(), input.values().data(), out.data());
  return make_op_result(input.shape(), std::move(out), {input}, [](BackwardContext& ctx) {
    kernels::relu_backward(ctx.out_grad().size(), ctx.input_value(0).data(), ctx.out_grad().data(),
                           ctx.input_grad(0).data());
  });
}

Tensor softmax(const Tensor& input) {
  if (input.rank() == 0 || input.shape().back() == 0)
    throw DimensionError("softmax: needs a non-empty last axis, got " + shape_string(input.shape()));
  const std::size_t k = input.shape().back();
  const std::size_t rows = input.size() / k;
  std::vector<double> out(input.size());
  const double* x = input.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * k;
    double* yr = out.data() + r * k;
    const double mx = *std::max_element(xr, xr + k);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      total += yr[i];
    }
    for (std::size_t i = 0; i < k; ++i) yr[i] /= total;
  }
  return make_op_result(input.shape(), std::move(out), {input}, [rows, k](BackwardContext& ctx) {
    const double* y = ctx.out_value().data();
    const double* dy = ctx.out_grad().data();
    double* dx = ctx.input_grad(0).data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < k; ++i) dot += dy[r * k + i] * y[r * k + i];
      for (std::size_t i = 0; i < k; ++i) dx[r * k + i] += y[r * k + i] * (dy[r * k + i] - dot);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  kernels::axpy(out.size(), 1.0, b.values().data(), out.data());
  return make_op_result(a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
    const auto dy = ctx.out_grad();
    for (std::size_t i = 0; i < 2; ++i)
      if (ctx.needs_grad(i)) kernels::axpy(dy.size(), 1.0, dy.data(), ctx.input_grad(i).data());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
    const auto dy = ctx.out_grad();
    if (ctx.needs_grad(0)) kernels::axpy(dy.size(), 1.0, dy.data(), ctx.input_grad(0).data());
    if (ctx.needs_grad(1)) kernels::axpy(dy.size(), -1.0, dy.data(), ctx.input_grad(1).data());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
    const auto dy = ctx.out_grad();
    const auto av = ctx.input_value(0);
    const auto bv = ctx.input_value(1);
    if (ctx.needs_grad(0)) {
      auto da = ctx.input_grad(0);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
    }
    if (ctx.needs_grad(1)) {
      auto db = ctx.input_grad(1);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return make_op_result(a.shape(), std::move(out), {a}, [factor](BackwardContext& ctx) {
    kernels::axpy(ctx.out_grad().size(), factor, ctx.out_grad().data(), ctx.input_grad(0).data());
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + value;
  return make_op_result(a.shape(), std::move(out), {a}, [](BackwardContext& ctx) {
    kernels::axpy(ctx.out_grad().size(), 1.0, ctx.out_grad().data(), ctx.input_grad(0).data());
  });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
  return make_op_result(a.shape(), std::move(out), {a}, [](BackwardContext& ctx) {
    const auto dy = ctx.out_grad();
    const auto av = ctx.input_value(0);
    auto da = ctx.input_grad(0);
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += 2.0 * av[i] * dy[i];
  });
}

Tensor sqrt(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
  return make_op_result(a.shape(), std::move(out), {a}, [](BackwardContext& ctx) {
    const auto dy = ctx.out_grad();
    const auto y = ctx.out_value();
    auto da = ctx.input_grad(0);
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (y[i] > 0.0) da[i] += dy[i] * 0.5 / y[i];
  });
}

Tensor log_clamped(const Tensor& a, double floor) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(av[i], floor));
  return make_op_result(a.shape(), std::move(out), {a}, [floor](BackwardContext& ctx) {
    const auto dy = ctx.out_grad();
    const auto av = ctx.input_value(0);
    auto da = ctx.input_grad(0);
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (av[i] > floor) da[i] += dy[i] / av[i];
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_op_result({}, {total}, {a}, [](BackwardContext& ctx) {
    const double g = ctx.out_grad()[0];
    for (double& d : ctx.input_grad(0)) d += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / double(a.size()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op_result(std::move(shape), std::move(out), {a}, [](BackwardContext& ctx) {
    kernels::axpy(ctx.out_grad().size(), 1.0, ctx.out_grad().data(), ctx.input_grad(0).data());
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size())
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_string(first));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size())
      throw DimensionError("concat: rank mismatch " + shape_string(s) + " vs " + shape_string(first));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i])
        throw DimensionError("concat: axis " + std::to_string(i) + " differs: " + shape_string(s) +
                             " vs " + shape_string(first));
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const double* src = parts[pi].values().data();
    const std::size_t chunk = extents[pi] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * chunk, src + (o + 1) * chunk, out.begin() + o * total * inner + offset * inner);
    offset += extents[pi];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op_result(std::move(out_shape), std::move(out), std::move(inputs),
                        [extents, outer, inner, total](BackwardContext& ctx) {
                          const double* dy = ctx.out_grad().data();
                          std::size_t offset = 0;
                          for (std::size_t pi = 0; pi < extents.size(); ++pi) {
                            const std::size_t chunk = extents[pi] * inner;
                            if (ctx.needs_grad(pi)) {
                              double* dx = ctx.input_grad(pi).data();
                              for (std::size_t o = 0; o < outer; ++o)
                                kernels::axpy(chunk, 1.0, dy + o * total * inner + offset * inner,
                                              dx + o * chunk);
                            }
                            offset += extents[pi];
                          }
                        });
}

Tensor column(const Tensor& a, std::size_t j) {
  if (a.rank() != 2 || j >= a.dim(1))
    throw DimensionError("column " + std::to_string(j) + " of " + shape_string(a.shape()));
  const std::size_t rows = a.dim(0);
  const std::size_t cols = a.dim(1);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = a.values()[r * cols + j];
  return make_op_result({rows}, std::move(out), {a}, [rows, cols, j](BackwardContext& ctx) {
    const auto dy = ctx.out_grad();
    auto dx = ctx.input_grad(0);
    for (std::size_t r = 0; r < rows; ++r) dx[r * cols + j] += dy[r];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  if (a.rank() == 0 || begin + count > a.dim(0))
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") of " + shape_string(a.shape()));
  const std::size_t row = a.size() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape[0] = count;
  std::vector<double> out(a.values().begin() + begin * row, a.values().begin() + (begin + count) * row);
  return make_op_result(std::move(out_shape), std::move(out), {a}, [begin, row](BackwardContext& ctx) {
    const auto dy = ctx.out_grad();
    kernels::axpy(dy.size(), 1.0, dy.data(), ctx.input_grad(0).data() + begin * row);
  });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("stack: no inputs");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const Tensor& p : parts) {
    if (p.shape() != parts[0].shape())
      throw DimensionError("stack: shapes " + shape_string(p.shape()) + " and " +
                           shape_string(parts[0].shape()) + " differ");
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, 0);
}

}  // namespace cellstn
