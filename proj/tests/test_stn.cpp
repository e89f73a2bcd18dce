#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <numbers>
#include <random>

#include "cellstn/errors.hpp"
#include "cellstn/ops.hpp"
#include "cellstn/stn.hpp"
#include "test_util.hpp"

using namespace cellstn;
using cellstn::testing::max_rel_error;
using cellstn::testing::numeric_gradient;
using cellstn::testing::random_tensor;

namespace {

// Direct pixel-index window of a [C,H,W] tensor.
std::vector<double> window(const Tensor& src, int x0, int y0, int side) {
  const int c = int(src.dim(0)), h = int(src.dim(1)), w = int(src.dim(2));
  std::vector<double> out;
  for (int ch = 0; ch < c; ++ch)
    for (int y = y0; y < y0 + side; ++y)
      for (int x = x0; x < x0 + side; ++x) out.push_back(src[(std::size_t(ch) * h + y) * w + x]);
  return out;
}

}  // namespace

TEST(GroundTruth, CentredCrop) {
  const AffineTheta t = make_ground_truth_theta(CropGeometry{});
  EXPECT_EQ(t.m, (std::array<double, 6>{0.5, 0, 0, 0, 0.5, 0}));
}

TEST(GroundTruth, TranslationFromOffsets) {
  CropGeometry g;
  g.dx = 32;
  g.dy = -16;
  const AffineTheta t = make_ground_truth_theta(g);
  EXPECT_DOUBLE_EQ(t.tx(), -2.0 * 32 / 128);
  EXPECT_DOUBLE_EQ(t.ty(), -2.0 * -16 / 128);
  EXPECT_DOUBLE_EQ(t.tx(), -0.5);
  EXPECT_DOUBLE_EQ(t.ty(), 0.25);
}

TEST(GroundTruth, ContainmentBound) {
  CropGeometry g;
  EXPECT_EQ(g.max_offset(), (128 - 64) / 2);
  g.dx = 33;
  EXPECT_THROW(make_ground_truth_theta(g), ContractError);
  g.dx = 0;
  g.dy = -33;
  EXPECT_THROW(make_ground_truth_theta(g), ContractError);
  g.dy = -32;
  EXPECT_NO_THROW(make_ground_truth_theta(g));
}

TEST(GroundTruth, TranslationStaysInUnitRange) {
  CropGeometry g;
  for (int dx = -g.max_offset(); dx <= g.max_offset(); ++dx) {
    g.dx = dx;
    const AffineTheta t = make_ground_truth_theta(g);
    EXPECT_LE(std::abs(t.tx()), 1.0);
    EXPECT_TRUE(t.finite());
  }
}

TEST(AffineGrid, IdentityUsesPixelCentres) {
  const Tensor grid = affine_grid(AffineTheta::identity(), 3, 3);
  ASSERT_EQ(grid.shape(), (Shape{3, 3, 2}));
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(grid[(i * 3 + 0) * 2], -2.0 / 3.0, 1e-15);
    EXPECT_NEAR(grid[(i * 3 + 1) * 2], 0.0, 1e-15);
    EXPECT_NEAR(grid[(i * 3 + 2) * 2], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(grid[(0 * 3 + i) * 2 + 1], -2.0 / 3.0, 1e-15);
  }
}

TEST(AffineGrid, ScaleAndTranslation) {
  const Tensor id = affine_grid(AffineTheta::identity(), 4, 6);
  const Tensor half = affine_grid(AffineTheta::from_values(std::array<double, 6>{0.5, 0, 0, 0, 0.5, 0}), 4, 6);
  const Tensor shifted = affine_grid(AffineTheta::from_values(std::array<double, 6>{1, 0, -0.5, 0, 1, 0}), 4, 6);
  for (std::size_t i = 0; i < id.size(); ++i) {
    EXPECT_NEAR(half[i], 0.5 * id[i], 1e-15);
    EXPECT_LE(std::abs(half[i]), 0.5);
    if (i % 2 == 0)
      EXPECT_NEAR(shifted[i], id[i] - 0.5, 1e-15);
    else
      EXPECT_EQ(shifted[i], id[i]);
  }
}

TEST(BilinearSample, IdentityIsBitExact) {
  std::mt19937_64 rng(1);
  const Tensor img = random_tensor({3, 7, 10}, rng, -1, 1, false);
  const Tensor out = bilinear_sample(img, affine_grid(AffineTheta::identity(), 7, 10));
  ASSERT_EQ(out.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(out[i]), std::bit_cast<std::uint64_t>(img[i]));
}

TEST(BilinearSample, Midpoint) {
  const Tensor img = Tensor::from({1, 1, 2}, {0.0, 1.0});
  const Tensor grid = Tensor::from({1, 1, 2}, {0.0, 0.0});
  EXPECT_DOUBLE_EQ(bilinear_sample(img, grid).item(), 0.5);
}

TEST(BilinearSample, OutsideIsZero) {
  const Tensor img = Tensor::full({1, 4, 4}, 2.0);
  const Tensor grid = Tensor::from({1, 2, 2}, {5.0, 0.0, -0.99, -3.0});
  const Tensor out = bilinear_sample(img, grid);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);
}

TEST(BilinearSample, RejectsNonFiniteGrid) {
  const Tensor img = Tensor::full({1, 4, 4}, 2.0);
  const Tensor grid = Tensor::from({1, 1, 2}, {std::nan(""), 0.0});
  EXPECT_THROW(bilinear_sample(img, grid), ContractError);
}

TEST(BilinearSample, AxisAlignedScaleMatchesDirectCrop) {
  // Integer pattern; the scale-0.5 centred transform on a 16 px image samples
  // pixels 4..11 exactly.
  std::vector<double> v(16 * 16);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = double(i % 97);
  const Tensor img = Tensor::from({1, 16, 16}, v);
  CropGeometry g;
  g.input_size = 16;
  g.cell_size = 8;
  for (int dx = -4; dx <= 4; ++dx)
    for (int dy = -4; dy <= 4; dy += 2) {
      g.dx = dx;
      g.dy = dy;
      const Tensor out = bilinear_sample(img, affine_grid(make_ground_truth_theta(g), 8, 8));
      const auto expect = window(img, 4 - dx, 4 - dy, 8);
      for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
    }
}

TEST(BilinearSample, ImageAndGridGradients) {
  std::mt19937_64 rng(2);
  Tensor img = random_tensor({2, 5, 5}, rng);
  Tensor grid = random_tensor({3, 3, 2}, rng, -0.9, 0.9);
  const Tensor w = random_tensor({2, 3, 3}, rng, -1, 1, false);
  auto f = [&] { return sum(mul(bilinear_sample(img, grid), w)); };
  f().backward();
  for (Tensor* t : {&img, &grid}) {
    const auto numeric = numeric_gradient([&] { NoGradGuard g; return f().item(); }, *t);
    EXPECT_LT(max_rel_error(t->grad(), numeric), 1e-4);
  }
}

TEST(BilinearSample, ThetaGradient) {
  std::mt19937_64 rng(3);
  const Tensor img = random_tensor({3, 8, 8}, rng, -1, 1, false);
  Tensor theta = Tensor::from({6}, {0.47, 0.05, 0.11, -0.03, 0.52, -0.07}, true);
  const Tensor w = random_tensor({3, 4, 4}, rng, -1, 1, false);
  auto f = [&] { return sum(mul(bilinear_sample(img, affine_grid(theta, 4, 4)), w)); };
  f().backward();
  const auto numeric = numeric_gradient([&] { NoGradGuard g; return f().item(); }, theta);
  EXPECT_LT(max_rel_error(theta.grad(), numeric), 1e-4);
}

TEST(BilinearSample, BatchedMatchesPerImage) {
  std::mt19937_64 rng(4);
  const Tensor imgs = random_tensor({2, 3, 6, 6}, rng, -1, 1, false);
  const Tensor thetas = Tensor::from({2, 6}, {0.5, 0, 0.1, 0, 0.5, -0.2, 0.4, 0.1, 0, -0.1, 0.6, 0.3});
  const Tensor out = bilinear_sample(imgs, affine_grid(thetas, 3, 3));
  ASSERT_EQ(out.shape(), (Shape{2, 3, 3, 3}));
  for (std::size_t b = 0; b < 2; ++b) {
    const Tensor one = bilinear_sample(reshape(slice_rows(imgs, b, 1), {3, 6, 6}),
                                       affine_grid(reshape(slice_rows(thetas, b, 1), {6}), 3, 3));
    for (std::size_t i = 0; i < one.size(); ++i) EXPECT_EQ(out[b * one.size() + i], one[i]);
  }
}

TEST(ExtractScales, Examples) {
  auto s = extract_scales(AffineTheta::from_values(std::array<double, 6>{0.5, 0, 0.2, 0, 0.5, -0.1}));
  EXPECT_EQ(s.first, 0.5);
  EXPECT_EQ(s.second, 0.5);
  s = extract_scales(AffineTheta::from_values(std::array<double, 6>{3, 0, 0, 4, 1, 0}));
  EXPECT_DOUBLE_EQ(s.first, 5.0);
  const double phi = std::numbers::pi / 6;
  const AffineTheta r = AffineTheta::similarity(0.5, phi, 0, 0);
  EXPECT_NEAR(r.a11(), 0.5 * std::cos(phi), 1e-15);
  EXPECT_NEAR(r.a21(), 0.25, 1e-15);
  s = extract_scales(r);
  EXPECT_NEAR(s.first, 0.5, 1e-12);
  EXPECT_NEAR(s.second, 0.5, 1e-12);
}

TEST(ExtractScales, RotationInvariant) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi), scale(0.1, 2.0);
  for (int i = 0; i < 200; ++i) {
    const double s = scale(rng);
    const auto [sx, sy] = extract_scales(AffineTheta::similarity(s, angle(rng), 0.1, -0.3));
    EXPECT_NEAR(sx, s, 1e-12);
    EXPECT_NEAR(sy, s, 1e-12);
  }
}

TEST(ExtractScales, TensorFormMatchesAndDifferentiates) {
  std::mt19937_64 rng(6);
  Tensor theta = random_tensor({2, 6}, rng);
  const auto [sx, sy] = extract_scales(theta);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto ref = extract_scales(AffineTheta::from_values(theta.values().subspan(6 * b, 6)));
    EXPECT_DOUBLE_EQ(sx[b], ref.first);
    EXPECT_DOUBLE_EQ(sy[b], ref.second);
  }
  auto f = [&] {
    const auto [a, c] = extract_scales(theta);
    return add(sum(a), scale(sum(c), 0.3));
  };
  f().backward();
  const auto numeric = numeric_gradient([&] { NoGradGuard g; return f().item(); }, theta);
  EXPECT_LT(max_rel_error(theta.grad(), numeric), 1e-6);
}

TEST(OffsetCrop, ZeroOffsetIsCentredCrop) {
  std::mt19937_64 rng(7);
  const Tensor src = random_tensor({3, 192, 192}, rng, 0, 1, false);
  const CropGeometry g;
  const Tensor patch = crop_with_offset(src, 96, 96, g);
  const auto expect = window(src, 96 - 64, 96 - 64, 128);
  ASSERT_EQ(patch.shape(), (Shape{3, 128, 128}));
  for (std::size_t i = 0; i < expect.size(); ++i) ASSERT_EQ(patch[i], expect[i]);
}

TEST(OffsetCrop, RandomOffsetsStayInBounds) {
  std::mt19937_64 rng(8);
  const Tensor src = Tensor::zeros({1, 192, 192});
  const CropGeometry g;
  int seen_lo = 0, seen_hi = 0;
  for (int i = 0; i < 2000; ++i) {
    const OffsetCrop c = random_offset_crop(src, 96, 96, g, rng);
    EXPECT_GE(c.dx, -32);
    EXPECT_LE(c.dx, 32);
    EXPECT_GE(c.dy, -32);
    EXPECT_LE(c.dy, 32);
    EXPECT_FALSE(c.clamped);
    seen_lo = std::min(seen_lo, c.dx);
    seen_hi = std::max(seen_hi, c.dx);
  }
  EXPECT_EQ(seen_lo, -32);
  EXPECT_EQ(seen_hi, 32);
}

TEST(OffsetCrop, ClampsNearSourceEdge) {
  std::mt19937_64 rng(9);
  const Tensor src = Tensor::zeros({1, 150, 150});
  const CropGeometry g;
  for (int i = 0; i < 200; ++i) {
    const OffsetCrop c = random_offset_crop(src, 70, 75, g, rng);
    EXPECT_TRUE(c.clamped);
    EXPECT_GE(70 - 64 + c.dx, 0);
    EXPECT_LE(70 - 64 + c.dx + 128, 150);
  }
  EXPECT_THROW(random_offset_crop(Tensor::zeros({1, 100, 100}), 50, 50, g, rng), ContractError);
}

TEST(OffsetCrop, RoundTripRecoversCentredCell) {
  std::mt19937_64 rng(10);
  const Tensor src = random_tensor({3, 192, 192}, rng, 0, 1, false);
  CropGeometry g;
  const auto expect = window(src, 96 - 32, 96 - 32, 64);
  for (int dx : {-32, -16, 0, 7, 32})
    for (int dy : {-32, -5, 0, 16, 32}) {
      g.dx = dx;
      g.dy = dy;
      const Tensor patch = crop_with_offset(src, 96, 96, g);
      const Tensor cell = bilinear_sample(patch, affine_grid(make_ground_truth_theta(g), 64, 64));
      double worst = 0.0;
      for (std::size_t i = 0; i < expect.size(); ++i) worst = std::max(worst, std::abs(cell[i] - expect[i]));
      EXPECT_LT(worst, 1e-9) << dx << "," << dy;
    }
}
