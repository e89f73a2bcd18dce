#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cellstn/tensor.hpp"

namespace cellstn {

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  double denominator_floor = 1e-8;
  // 0 checks every element; otherwise a seeded random subset per input.
  std::size_t max_elements_per_input = 0;
  std::uint64_t seed = 0;
  // Skip elements whose four half-step difference quotients over [-eps, eps]
  // disagree by more than the tolerance: the perturbation crossed a ReLU,
  // pooling or sampling kink, where central differences are meaningless. A wrong
  // analytic gradient at a smooth point is still caught.
  bool skip_kinks = false;
};

struct GradcheckFailure {
  std::size_t input;
  std::size_t element;
  double analytic;
  double numeric;
  double rel_error;
};

struct GradcheckReport {
  bool passed = true;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // skipped, counted separately from checked
  double max_rel_error = 0.0;
  std::vector<GradcheckFailure> failures;
};

// Builds a scalar-valued graph from the given leaf inputs.
using GraphBuilder = std::function<Tensor(std::span<const Tensor>)>;

// Compares reverse-mode gradients of f against central differences,
// |analytic - numeric| / max(|analytic|, |numeric|, floor) <= tolerance per element.
// Inputs must be leaf tensors; their values are restored afterwards and
// their accumulated gradients are cleared.
GradcheckReport finite_diff_gradcheck(const GraphBuilder& f, std::span<Tensor> inputs,
                                      const GradcheckOptions& options = {});

}  // namespace cellstn
