#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cellstn/tensor.hpp"

namespace cellstn {

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  // One buffer per parameter tensor; allocated on the first step.
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Bias-corrected Adam update of every parameter from its accumulated
// gradient (zero when none was accumulated). Increments state.step.
void adam_step(std::span<Tensor> params, AdamState& state);

// Same update with gradients supplied explicitly, one buffer per parameter.
void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state);

}  // namespace cellstn
