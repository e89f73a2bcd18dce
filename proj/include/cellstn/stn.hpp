#pragma once

// Spatial-transformer geometry: ground-truth transforms from crop offsets,
// affine sampling grids, differentiable bilinear sampling and scale
// extraction.
//
// Normalised coordinates span [-1, 1] across the full image extent: -1 and +1
// are the outer pixel edges and 0 is the image centre, so pixel j of a side of
// length W has normalised coordinate (2j + 1) / W - 1. A transform maps output
// (target) coordinates to source coordinates.

#include <array>
#include <cstdint>
#include <random>
#include <utility>

#include "cellstn/tensor.hpp"

namespace cellstn {

// Row-major 2x3 affine matrix [[a11, a12, tx], [a21, a22, ty]].
struct AffineTheta {
  std::array<double, 6> m{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  double a11() const { return m[0]; }
  double a12() const { return m[1]; }
  double tx() const { return m[2]; }
  double a21() const { return m[3]; }
  double a22() const { return m[4]; }
  double ty() const { return m[5]; }

  static AffineTheta identity() { return {}; }
  // scale * R(angle) with translation (tx, ty).
  static AffineTheta similarity(double scale, double angle, double tx, double ty);
  static AffineTheta from_values(std::span<const double> six);

  bool finite() const;
  Tensor to_tensor(bool requires_grad = false) const;
};

struct CropGeometry {
  int input_size = 128;  // side of the patch handed to the localizer (d_i)
  int cell_size = 64;    // side of the region expected to contain a cell (d_c)
  double scale = 0.5;    // fixed ground-truth scale
  int dx = 0;            // crop-origin offset in pixels
  int dy = 0;

  int max_offset() const { return (input_size - cell_size) / 2; }
  // Throws ContractError when sizes, scale or offsets are out of range.
  void validate() const;
};

// [[s, 0, -2 dx / d_i], [0, s, -2 dy / d_i]]
AffineTheta make_ground_truth_theta(const CropGeometry& geom);

// Sampling grid [H_out, W_out, 2] holding (x, y) source coordinates.
Tensor affine_grid(const AffineTheta& theta, std::size_t out_height, std::size_t out_width);

// Differentiable in theta; theta is [6] (grid [H,W,2]) or [B,6] (grid [B,H,W,2]).
Tensor affine_grid(const Tensor& theta, std::size_t out_height, std::size_t out_width);

// Bilinear interpolation of image [C,H,W] (or [N,C,H,W]) at the grid's
// source coordinates, zero outside the image. Differentiable in image and grid.
Tensor bilinear_sample(const Tensor& image, const Tensor& grid);

// Column norms of the linear part: (sqrt(a11^2 + a21^2), sqrt(a12^2 + a22^2)).
std::pair<double, double> extract_scales(const AffineTheta& theta);

// Differentiable form over a [B,6] batch; returns ([B], [B]).
std::pair<Tensor, Tensor> extract_scales(const Tensor& theta);

struct OffsetCrop {
  Tensor patch;           // [C, d_i, d_i]
  int dx = 0;
  int dy = 0;
  bool clamped = false;   // offset range was narrowed by the source bounds
};

// Crops a d_i x d_i window whose origin is shifted by (dx, dy) from the
// cell-centred window, so the cell appears at patch centre minus (dx, dy).
// Offsets are drawn uniformly from the integers in [-max_offset, max_offset],
// narrowed to keep the window inside the source. geom.dx/dy are ignored.
OffsetCrop random_offset_crop(const Tensor& source, int center_x, int center_y,
                              const CropGeometry& geom, std::mt19937_64& rng);

// Deterministic variant using geom.dx / geom.dy.
Tensor crop_with_offset(const Tensor& source, int center_x, int center_y, const CropGeometry& geom);

}  // namespace cellstn
