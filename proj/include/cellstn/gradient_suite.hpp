#pragma once
// Finite-difference checks of every differentiable operation on random
// instances. Used by the `gradcheck` subcommand and the tests.
#include <cstdint>
#include <string>
#include <vector>

#include "cellstn/gradcheck.hpp"

namespace cellstn {

struct SuiteResult {
  std::string op;
  std::size_t instances = 0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
  double max_rel_error = 0.0;
  bool passed = true;
  std::vector<GradcheckFailure> failures;
};

// Composite cases skip elements at activation kinks; a case fails if more
// than 5 % of its elements are skipped.
std::vector<SuiteResult> run_gradient_suite(std::size_t instances = 5, std::uint64_t seed = 1,
                                            const GradcheckOptions& options = {});

}  // namespace cellstn
