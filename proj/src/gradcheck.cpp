#include "cellstn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cellstn/errors.hpp"

namespace cellstn {

GradcheckReport finite_diff_gradcheck(const GraphBuilder& f, std::span<Tensor> inputs,
                                      const GradcheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("gradcheck: eps must be positive");
  for (Tensor& t : inputs) {
    if (!t.is_leaf() || !t.requires_grad())
      throw ContractError("gradcheck: inputs must be leaf tensors that require gradients");
    t.zero_grad();
  }

  const Tensor out = f(inputs);
  if (out.size() != 1) throw ContractError("gradcheck: builder must return a scalar");
  out.backward();

  GradcheckReport report;
  std::mt19937_64 rng(options.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::vector<double> analytic = inputs[i].grad();
    std::vector<std::size_t> elements(inputs[i].size());
    std::iota(elements.begin(), elements.end(), std::size_t{0});
    if (options.max_elements_per_input > 0 && elements.size() > options.max_elements_per_input) {
      std::shuffle(elements.begin(), elements.end(), rng);
      elements.resize(options.max_elements_per_input);
      std::sort(elements.begin(), elements.end());
    }
    auto values = inputs[i].mutable_values();
    for (std::size_t e : elements) {
      const double saved = values[e];
      double plus = 0.0, minus = 0.0;
      double half[2] = {0.0, 0.0}, centre = 0.0;
      {
        NoGradGuard guard;
        values[e] = saved + options.eps;
        plus = f(inputs).item();
        values[e] = saved - options.eps;
        minus = f(inputs).item();
        if (options.skip_kinks) {
          values[e] = saved - 0.5 * options.eps;
          half[0] = f(inputs).item();
          values[e] = saved + 0.5 * options.eps;
          half[1] = f(inputs).item();
          values[e] = saved;
          centre = f(inputs).item();
        }
      }
      values[e] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      if (options.skip_kinks) {
        const double h = 0.5 * options.eps;
        const double slopes[4] = {(half[0] - minus) / h, (centre - half[0]) / h,
                                  (half[1] - centre) / h, (plus - half[1]) / h};
        const auto [lo, hi] = std::minmax_element(std::begin(slopes), std::end(slopes));
        const double scale = std::max({std::abs(*lo), std::abs(*hi), options.denominator_floor});
        if ((*hi - *lo) / scale > options.tolerance) {
          report.kinks += 1;
          continue;
        }
      }
      const double denom =
          std::max({std::abs(analytic[e]), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(analytic[e] - numeric) / denom;
      report.checked += 1;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      if (!(rel <= options.tolerance)) {
        report.passed = false;
        report.failures.push_back({i, e, analytic[e], numeric, rel});
      }
    }
    inputs[i].zero_grad();
  }
  return report;
}

}  // namespace cellstn
