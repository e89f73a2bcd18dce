#include "cellstn/stn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cellstn/errors.hpp"
#include "cellstn/ops.hpp"

namespace cellstn {
namespace {

// Normalised coordinate of pixel j along a side of length n.
double normalized_coord(std::size_t j, std::size_t n) {
  return double(std::ptrdiff_t(2 * j + 1) - std::ptrdiff_t(n)) / double(n);
}

// Inverse of normalized_coord. Values within 1e-10 px of a pixel centre snap
// to it, which makes identity resampling exact.
double pixel_coord(double x, std::size_t n) {
  const double p = (x * double(n) + double(n) - 1.0) * 0.5;
  const double r = std::nearbyint(p);
  return std::abs(p - r) <= 1e-10 ? r : p;
}

struct SampleDims {
  std::size_t n, c, h, w, ho, wo;
  bool batched;
};

}  // namespace

AffineTheta AffineTheta::similarity(double scale, double angle, double tx, double ty) {
  const double c = std::cos(angle) * scale;
  const double s = std::sin(angle) * scale;
  return AffineTheta{{c, -s, tx, s, c, ty}};
}

AffineTheta AffineTheta::from_values(std::span<const double> six) {
  if (six.size() != 6) throw DimensionError("affine theta needs 6 values, got " + std::to_string(six.size()));
  AffineTheta t;
  std::copy(six.begin(), six.end(), t.m.begin());
  return t;
}

bool AffineTheta::finite() const {
  return std::all_of(m.begin(), m.end(), [](double v) { return std::isfinite(v); });
}

Tensor AffineTheta::to_tensor(bool requires_grad) const {
  return Tensor::from({6}, {m.begin(), m.end()}, requires_grad);
}

void CropGeometry::validate() const {
  if (!(input_size > cell_size && cell_size > 0))
    throw ContractError("crop geometry needs input_size > cell_size > 0, got " + std::to_string(input_size) +
                        " and " + std::to_string(cell_size));
  if (!(scale > 0.0) || !std::isfinite(scale))
    throw ContractError("crop geometry scale must be positive and finite");
  const int bound = max_offset();
  if (std::abs(dx) > bound || std::abs(dy) > bound)
    throw ContractError("crop offset (" + std::to_string(dx) + ", " + std::to_string(dy) +
                        ") exceeds the containment bound " + std::to_string(bound));
}

AffineTheta make_ground_truth_theta(const CropGeometry& geom) {
  geom.validate();
  const double d = double(geom.input_size);
  return AffineTheta{{geom.scale, 0.0, -2.0 * geom.dx / d, 0.0, geom.scale, -2.0 * geom.dy / d}};
}

Tensor affine_grid(const AffineTheta& theta, std::size_t out_height, std::size_t out_width) {
  NoGradGuard guard;
  return affine_grid(theta.to_tensor(), out_height, out_width);
}

Tensor affine_grid(const Tensor& theta, std::size_t out_height, std::size_t out_width) {
  if (out_height == 0 || out_width == 0) throw ContractError("affine_grid: output size must be positive");
  std::size_t batch = 0;
  bool batched = false;
  if (theta.shape() == Shape{6}) {
    batch = 1;
  } else if (theta.rank() == 2 && theta.dim(1) == 6) {
    batch = theta.dim(0);
    batched = true;
  } else {
    throw DimensionError("affine_grid: theta must be [6] or [B,6], got " + shape_string(theta.shape()));
  }
  const std::size_t ho = out_height, wo = out_width;
  std::vector<double> xs(wo), ys(ho);
  for (std::size_t j = 0; j < wo; ++j) xs[j] = normalized_coord(j, wo);
  for (std::size_t i = 0; i < ho; ++i) ys[i] = normalized_coord(i, ho);

  std::vector<double> out(batch * ho * wo * 2);
  const double* th = theta.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* t = th + 6 * b;
    double* g = out.data() + b * ho * wo * 2;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        g[(i * wo + j) * 2 + 0] = t[0] * xs[j] + t[1] * ys[i] + t[2];
        g[(i * wo + j) * 2 + 1] = t[3] * xs[j] + t[4] * ys[i] + t[5];
      }
  }
  Shape shape = batched ? Shape{batch, ho, wo, 2} : Shape{ho, wo, 2};
  return make_op_result(std::move(shape), std::move(out), {theta},
                        [batch, ho, wo, xs, ys](BackwardContext& ctx) {
                          const double* dg = ctx.out_grad().data();
                          double* dt = ctx.input_grad(0).data();
                          for (std::size_t b = 0; b < batch; ++b) {
                            double acc[6] = {0, 0, 0, 0, 0, 0};
                            const double* g = dg + b * ho * wo * 2;
                            for (std::size_t i = 0; i < ho; ++i)
                              for (std::size_t j = 0; j < wo; ++j) {
                                const double gx = g[(i * wo + j) * 2 + 0];
                                const double gy = g[(i * wo + j) * 2 + 1];
                                acc[0] += gx * xs[j];
                                acc[1] += gx * ys[i];
                                acc[2] += gx;
                                acc[3] += gy * xs[j];
                                acc[4] += gy * ys[i];
                                acc[5] += gy;
                              }
                            for (int k = 0; k < 6; ++k) dt[6 * b + k] += acc[k];
                          }
                        });
}

Tensor bilinear_sample(const Tensor& image, const Tensor& grid) {
  SampleDims d{};
  const Shape& is = image.shape();
  const Shape& gs = grid.shape();
  if (is.size() == 3 && gs.size() == 3 && gs[2] == 2) {
    d = {1, is[0], is[1], is[2], gs[0], gs[1], false};
  } else if (is.size() == 4 && gs.size() == 4 && gs[3] == 2 && gs[0] == is[0]) {
    d = {is[0], is[1], is[2], is[3], gs[1], gs[2], true};
  } else {
    throw DimensionError("bilinear_sample: image " + shape_string(is) + " incompatible with grid " +
                         shape_string(gs));
  }
  const double* img = image.values().data();
  const double* grd = grid.values().data();
  for (double v : grid.values())
    if (!std::isfinite(v)) throw ContractError("bilinear_sample: grid contains non-finite coordinates");

  const std::size_t out_plane = d.ho * d.wo;
  const std::size_t in_plane = d.h * d.w;
  std::vector<double> out(d.n * d.c * out_plane);
  const auto hh = std::ptrdiff_t(d.h), ww = std::ptrdiff_t(d.w);
  for (std::size_t n = 0; n < d.n; ++n) {
    const double* g = grd + n * out_plane * 2;
    for (std::size_t p = 0; p < out_plane; ++p) {
      const double px = pixel_coord(g[2 * p], d.w);
      const double py = pixel_coord(g[2 * p + 1], d.h);
      const double fx = std::floor(px), fy = std::floor(py);
      const double wx1 = px - fx, wy1 = py - fy;
      const double wx0 = 1.0 - wx1, wy0 = 1.0 - wy1;
      const auto x0 = std::ptrdiff_t(fx), y0 = std::ptrdiff_t(fy);
      const bool vx0 = x0 >= 0 && x0 < ww, vx1 = x0 + 1 >= 0 && x0 + 1 < ww;
      const bool vy0 = y0 >= 0 && y0 < hh, vy1 = y0 + 1 >= 0 && y0 + 1 < hh;
      for (std::size_t c = 0; c < d.c; ++c) {
        const double* plane = img + (n * d.c + c) * in_plane;
        double v = 0.0;
        if (vy0 && vx0) v += wy0 * wx0 * plane[y0 * ww + x0];
        if (vy0 && vx1) v += wy0 * wx1 * plane[y0 * ww + x0 + 1];
        if (vy1 && vx0) v += wy1 * wx0 * plane[(y0 + 1) * ww + x0];
        if (vy1 && vx1) v += wy1 * wx1 * plane[(y0 + 1) * ww + x0 + 1];
        out[(n * d.c + c) * out_plane + p] = v;
      }
    }
  }

  Shape out_shape = d.batched ? Shape{d.n, d.c, d.ho, d.wo} : Shape{d.c, d.ho, d.wo};
  return make_op_result(std::move(out_shape), std::move(out), {image, grid}, [d](BackwardContext& ctx) {
    const double* img = ctx.input_value(0).data();
    const double* grd = ctx.input_value(1).data();
    const double* dout = ctx.out_grad().data();
    double* dimg = ctx.needs_grad(0) ? ctx.input_grad(0).data() : nullptr;
    double* dgrid = ctx.needs_grad(1) ? ctx.input_grad(1).data() : nullptr;
    const std::size_t out_plane = d.ho * d.wo;
    const std::size_t in_plane = d.h * d.w;
    const auto hh = std::ptrdiff_t(d.h), ww = std::ptrdiff_t(d.w);
    for (std::size_t n = 0; n < d.n; ++n) {
      const double* g = grd + n * out_plane * 2;
      for (std::size_t p = 0; p < out_plane; ++p) {
        const double px = pixel_coord(g[2 * p], d.w);
        const double py = pixel_coord(g[2 * p + 1], d.h);
        const double fx = std::floor(px), fy = std::floor(py);
        const double wx1 = px - fx, wy1 = py - fy;
        const double wx0 = 1.0 - wx1, wy0 = 1.0 - wy1;
        const auto x0 = std::ptrdiff_t(fx), y0 = std::ptrdiff_t(fy);
        const bool vx0 = x0 >= 0 && x0 < ww, vx1 = x0 + 1 >= 0 && x0 + 1 < ww;
        const bool vy0 = y0 >= 0 && y0 < hh, vy1 = y0 + 1 >= 0 && y0 + 1 < hh;
        double dpx = 0.0, dpy = 0.0;
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t base = (n * d.c + c) * in_plane;
          const double go = dout[(n * d.c + c) * out_plane + p];
          const double v00 = (vy0 && vx0) ? img[base + y0 * ww + x0] : 0.0;
          const double v01 = (vy0 && vx1) ? img[base + y0 * ww + x0 + 1] : 0.0;
          const double v10 = (vy1 && vx0) ? img[base + (y0 + 1) * ww + x0] : 0.0;
          const double v11 = (vy1 && vx1) ? img[base + (y0 + 1) * ww + x0 + 1] : 0.0;
          if (dimg) {
            if (vy0 && vx0) dimg[base + y0 * ww + x0] += go * wy0 * wx0;
            if (vy0 && vx1) dimg[base + y0 * ww + x0 + 1] += go * wy0 * wx1;
            if (vy1 && vx0) dimg[base + (y0 + 1) * ww + x0] += go * wy1 * wx0;
            if (vy1 && vx1) dimg[base + (y0 + 1) * ww + x0 + 1] += go * wy1 * wx1;
          }
          dpx += go * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
          dpy += go * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
        }
        if (dgrid) {
          dgrid[n * out_plane * 2 + 2 * p] += dpx * 0.5 * double(d.w);
          dgrid[n * out_plane * 2 + 2 * p + 1] += dpy * 0.5 * double(d.h);
        }
      }
    }
  });
}

std::pair<double, double> extract_scales(const AffineTheta& theta) {
  return {std::sqrt(theta.a11() * theta.a11() + theta.a21() * theta.a21()),
          std::sqrt(theta.a12() * theta.a12() + theta.a22() * theta.a22())};
}

std::pair<Tensor, Tensor> extract_scales(const Tensor& theta) {
  if (theta.rank() != 2 || theta.dim(1) != 6)
    throw DimensionError("extract_scales: theta must be [B,6], got " + shape_string(theta.shape()));
  Tensor sx = sqrt(add(square(column(theta, 0)), square(column(theta, 3))));
  Tensor sy = sqrt(add(square(column(theta, 1)), square(column(theta, 4))));
  return {sx, sy};
}

namespace {

Tensor crop_window(const Tensor& source, int x0, int y0, int side) {
  if (source.rank() != 3) throw DimensionError("crop: source must be [C,H,W], got " + shape_string(source.shape()));
  const auto c = source.dim(0), h = source.dim(1), w = source.dim(2);
  if (x0 < 0 || y0 < 0 || std::size_t(x0 + side) > w || std::size_t(y0 + side) > h)
    throw ContractError("crop window at (" + std::to_string(x0) + ", " + std::to_string(y0) + ") size " +
                        std::to_string(side) + " exceeds source " + shape_string(source.shape()));
  std::vector<double> out(c * side * side);
  const double* src = source.values().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (int y = 0; y < side; ++y) {
      const double* row = src + (ch * h + std::size_t(y0 + y)) * w + std::size_t(x0);
      std::copy(row, row + side, out.begin() + (ch * side + y) * side);
    }
  return Tensor::from({c, std::size_t(side), std::size_t(side)}, std::move(out));
}

}  // namespace

Tensor crop_with_offset(const Tensor& source, int center_x, int center_y, const CropGeometry& geom) {
  geom.validate();
  const int half = geom.input_size / 2;
  return crop_window(source, center_x - half + geom.dx, center_y - half + geom.dy, geom.input_size);
}

OffsetCrop random_offset_crop(const Tensor& source, int center_x, int center_y, const CropGeometry& geom,
                              std::mt19937_64& rng) {
  CropGeometry g = geom;
  g.dx = g.dy = 0;
  g.validate();
  if (source.rank() != 3) throw DimensionError("random_offset_crop: source must be [C,H,W]");
  const int w = int(source.dim(2)), h = int(source.dim(1));
  const int half = g.input_size / 2;
  const int bound = g.max_offset();
  // origin = center - half + offset must lie in [0, size - d_i]
  const int lo_x = std::max(-bound, half - center_x), hi_x = std::min(bound, w - g.input_size - center_x + half);
  const int lo_y = std::max(-bound, half - center_y), hi_y = std::min(bound, h - g.input_size - center_y + half);
  if (lo_x > hi_x || lo_y > hi_y)
    throw ContractError("random_offset_crop: no window of side " + std::to_string(g.input_size) + " around (" +
                        std::to_string(center_x) + ", " + std::to_string(center_y) + ") fits in the source");
  OffsetCrop out;
  out.clamped = lo_x != -bound || hi_x != bound || lo_y != -bound || hi_y != bound;
  out.dx = std::uniform_int_distribution<int>(lo_x, hi_x)(rng);
  out.dy = std::uniform_int_distribution<int>(lo_y, hi_y)(rng);
  g.dx = out.dx;
  g.dy = out.dy;
  out.patch = crop_with_offset(source, center_x, center_y, g);
  return out;
}

}  // namespace cellstn
