#pragma once

// Training objectives: cross-entropy classification loss, the constrained
// affine localization loss and their weighted combination. Tensor forms take
// batches and return the batch mean.

#include <array>
#include <optional>
#include <span>
#include <string_view>

#include "cellstn/stn.hpp"
#include "cellstn/tensor.hpp"

namespace cellstn {

// Canonical class order.
enum class CellClass : int { granulocyte = 0, mitosis = 1, tumor = 2 };
inline constexpr std::size_t kNumClasses = 3;

std::string_view class_name(CellClass c);
std::optional<CellClass> parse_class(std::string_view name);
inline std::size_t class_index(CellClass c) { return std::size_t(c); }

struct ClassLabel {
  CellClass cls = CellClass::granulocyte;
  std::array<double, kNumClasses> one_hot() const;
};

struct LossWeights {
  double kappa = 1.0;
  void validate() const;
};

inline constexpr double kProbabilityFloor = 1e-12;

// -sum_i ln(max(p_i, 1e-12)) * c_i
double cross_entropy(std::span<const double> probs, ClassLabel label);
// probs [3] or [B,3]; one label per row.
Tensor cross_entropy(const Tensor& probs, std::span<const CellClass> labels);

// Sum of squared translation errors, squared errors of both extracted scales
// against the ground-truth scale, (a11 - a22)^2 and (a12 + a21)^2. Rotation is
// left free. theta_gt must be of ground-truth form.
double localization_loss(const AffineTheta& theta_hat, const AffineTheta& theta_gt);
// theta_hat [B,6]; one ground truth per row.
Tensor localization_loss(const Tensor& theta_hat, std::span<const AffineTheta> theta_gt);

// l_loc + kappa * l_cla
double combined_loss(double l_loc, double l_cla, const LossWeights& w);
Tensor combined_loss(const Tensor& l_loc, const Tensor& l_cla, const LossWeights& w);

}  // namespace cellstn
