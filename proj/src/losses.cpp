#include "cellstn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cellstn/errors.hpp"
#include "cellstn/ops.hpp"

namespace cellstn {
namespace {

void require_ground_truth_form(const AffineTheta& gt) {
  if (gt.a11() != gt.a22() || gt.a12() != 0.0 || gt.a21() != 0.0 || !(gt.a11() > 0.0))
    throw ContractError("localization_loss: ground truth must be [[s,0,tx],[0,s,ty]] with s > 0");
}

}  // namespace

std::string_view class_name(CellClass c) {
  switch (c) {
    case CellClass::granulocyte:
      return "granulocyte";
    case CellClass::mitosis:
      return "mitosis";
    case CellClass::tumor:
      return "tumor";
  }
  return "unknown";
}

std::optional<CellClass> parse_class(std::string_view name) {
  for (CellClass c : {CellClass::granulocyte, CellClass::mitosis, CellClass::tumor})
    if (name == class_name(c)) return c;
  return std::nullopt;
}

std::array<double, kNumClasses> ClassLabel::one_hot() const {
  std::array<double, kNumClasses> v{};
  v[class_index(cls)] = 1.0;
  return v;
}

void LossWeights::validate() const {
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw ContractError("kappa must be finite and non-negative");
}

double cross_entropy(std::span<const double> probs, ClassLabel label) {
  if (probs.size() != kNumClasses)
    throw DimensionError("cross_entropy: expected 3 probabilities, got " + std::to_string(probs.size()));
  const auto c = label.one_hot();
  double loss = 0.0;
  for (std::size_t i = 0; i < kNumClasses; ++i) loss -= std::log(std::max(probs[i], kProbabilityFloor)) * c[i];
  return loss;
}

Tensor cross_entropy(const Tensor& probs, std::span<const CellClass> labels) {
  const bool single = probs.shape() == Shape{kNumClasses};
  const std::size_t batch = single ? 1 : (probs.rank() == 2 ? probs.dim(0) : 0);
  if (!single && !(probs.rank() == 2 && probs.dim(1) == kNumClasses))
    throw DimensionError("cross_entropy: probabilities must be [3] or [B,3], got " + shape_string(probs.shape()));
  if (labels.size() != batch)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(batch) + " rows");
  std::vector<double> one_hot(batch * kNumClasses, 0.0);
  for (std::size_t b = 0; b < batch; ++b) one_hot[b * kNumClasses + class_index(labels[b])] = 1.0;
  const Tensor targets = Tensor::from(probs.shape(), std::move(one_hot));
  return scale(sum(mul(log_clamped(probs, kProbabilityFloor), targets)), -1.0 / double(batch));
}

double localization_loss(const AffineTheta& h, const AffineTheta& gt) {
  require_ground_truth_form(gt);
  const double s = gt.a11();
  const auto [sx, sy] = extract_scales(h);
  const auto sq = [](double v) { return v * v; };
  return sq(h.tx() - gt.tx()) + sq(h.ty() - gt.ty()) + sq(sx - s) + sq(sy - s) + sq(h.a11() - h.a22()) +
         sq(h.a12() + h.a21());
}

Tensor localization_loss(const Tensor& theta_hat, std::span<const AffineTheta> theta_gt) {
  Tensor theta = theta_hat;
  if (theta.shape() == Shape{6}) theta = reshape(theta, {1, 6});
  if (theta.rank() != 2 || theta.dim(1) != 6)
    throw DimensionError("localization_loss: theta must be [6] or [B,6], got " + shape_string(theta_hat.shape()));
  const std::size_t batch = theta.dim(0);
  if (theta_gt.size() != batch)
    throw DimensionError("localization_loss: " + std::to_string(theta_gt.size()) + " ground truths for " +
                         std::to_string(batch) + " rows");
  std::vector<double> gx(batch), gy(batch), gs(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    require_ground_truth_form(theta_gt[b]);
    gx[b] = theta_gt[b].tx();
    gy[b] = theta_gt[b].ty();
    gs[b] = theta_gt[b].a11();
  }
  const Tensor tx = Tensor::from({batch}, std::move(gx));
  const Tensor ty = Tensor::from({batch}, std::move(gy));
  const Tensor ts = Tensor::from({batch}, std::move(gs));
  const auto [sx, sy] = extract_scales(theta);
  Tensor total = square(sub(column(theta, 2), tx));
  total = add(total, square(sub(column(theta, 5), ty)));
  total = add(total, square(sub(sx, ts)));
  total = add(total, square(sub(sy, ts)));
  total = add(total, square(sub(column(theta, 0), column(theta, 4))));
  total = add(total, square(add(column(theta, 1), column(theta, 3))));
  return mean(total);
}

double combined_loss(double l_loc, double l_cla, const LossWeights& w) {
  w.validate();
  if (!(l_loc >= 0.0) || !(l_cla >= 0.0) || !std::isfinite(l_loc) || !std::isfinite(l_cla))
    throw ContractError("combined_loss: losses must be finite and non-negative");
  return l_loc + w.kappa * l_cla;
}

Tensor combined_loss(const Tensor& l_loc, const Tensor& l_cla, const LossWeights& w) {
  w.validate();
  if (l_loc.size() != 1 || l_cla.size() != 1) throw DimensionError("combined_loss: scalar losses expected");
  return add(reshape(l_loc, {}), scale(reshape(l_cla, {}), w.kappa));
}

}  // namespace cellstn
