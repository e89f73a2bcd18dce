#pragma once

// Dense row-major double tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations record their inputs
// and a backward closure only when at least one input requires a gradient and
// recording has not been disabled with NoGradGuard. Node ids increase with
// creation order, which is also a topological order of every graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cellstn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  double operator[](std::size_t i) const { return values()[i]; }
  double item() const;

  // Writable view for leaf tensors (parameters, gradcheck inputs). Throws
  // ContractError on tensors produced by an operation.
  std::span<double> mutable_values();

  bool requires_grad() const;
  bool is_leaf() const;
  std::uint64_t id() const;

  bool has_grad() const;
  // Accumulated gradient; all zeros when none has been accumulated yet.
  std::vector<double> grad() const;
  std::span<const double> grad_view() const;
  void zero_grad();

  // Reverse pass from a single-element tensor. Gradients accumulate
  // additively into every reachable tensor that requires one.
  void backward() const;

  // Same values, no history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend class BackwardContext;
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(class BackwardContext&)>);
};

// View handed to an operation's backward closure.
class BackwardContext {
 public:
  std::span<const double> out_grad() const;
  std::span<const double> out_value() const;
  const Tensor& input(std::size_t i) const { return inputs_[i]; }
  std::span<const double> input_value(std::size_t i) const { return inputs_[i].values(); }
  bool needs_grad(std::size_t i) const;
  // Zero-initialised on first use within a backward pass.
  std::span<double> input_grad(std::size_t i);

 private:
  BackwardContext(detail::Node& out, std::span<const Tensor> inputs) : out_(out), inputs_(inputs) {}
  detail::Node& out_;
  std::span<const Tensor> inputs_;
  friend class Tensor;
};

using BackwardFn = std::function<void(BackwardContext&)>;

// Builds the output tensor of a differentiable operation. The closure is kept
// only if some input requires a gradient and recording is enabled.
Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      BackwardFn backward);

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> adjoint;  // scratch for the pass in progress
  std::vector<Tensor> inputs;
  BackwardFn backward;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
};

}  // namespace detail

}  // namespace cellstn
