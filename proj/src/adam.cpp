#include "cellstn/adam.hpp"

#include <cmath>
#include <string>

#include "cellstn/errors.hpp"
#include "cellstn/kernels.hpp"

namespace cellstn {
namespace {

void ensure_moments(std::span<Tensor> params, AdamState& state) {
  if (state.first_moment.empty() && state.second_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
    throw DimensionError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, given " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.first_moment[i].size() != params[i].size() || state.second_moment[i].size() != params[i].size())
      throw DimensionError("adam_step: moment buffer " + std::to_string(i) +
                           " does not match parameter of shape " + shape_string(params[i].shape()));
}

}  // namespace

void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state) {
  if (grads.size() != params.size())
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  ensure_moments(params, state);
  state.step += 1;
  const double t = double(state.step);
  const kernels::AdamCoefficients k{state.learning_rate,
                                    state.beta1,
                                    state.beta2,
                                    state.epsilon,
                                    1.0 - std::pow(state.beta1, t),
                                    1.0 - std::pow(state.beta2, t)};
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size())
      throw DimensionError("adam_step: gradient " + std::to_string(i) + " has " +
                           std::to_string(grads[i].size()) + " values for parameter of shape " +
                           shape_string(params[i].shape()));
    auto values = params[i].mutable_values();
    kernels::adam_update(values.size(), k, grads[i].data(), state.first_moment[i].data(),
                         state.second_moment[i].data(), values.data());
  }
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params) grads.push_back(p.grad());
  adam_step(params, grads, state);
}

}  // namespace cellstn
