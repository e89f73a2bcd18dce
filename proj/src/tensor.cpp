#include "cellstn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <malloc.h>
#include <sstream>
#include <unordered_set>

#include "cellstn/errors.hpp"
#include "cellstn/kernels.hpp"

namespace cellstn {
namespace {

// Activation buffers are large and short-lived. Serving them from the heap
// instead of fresh mappings avoids a page fault per touched page.
const bool heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_recording = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size())
    throw DimensionError("tensor of shape " + shape_string(shape) + " given " +
                         std::to_string(values.size()) + " values");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_node({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(node_->shape));
  return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->value.size(); }

std::span<const double> Tensor::values() const { return node_->value; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

std::span<double> Tensor::mutable_values() {
  if (!node_->leaf) throw ContractError("values of an operation result are immutable");
  return node_->value;
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->leaf; }
std::uint64_t Tensor::id() const { return node_->id; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

std::span<const double> Tensor::grad_view() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(new_node(shape(), node_->value, false)); }

void Tensor::backward() const {
  if (size() != 1)
    throw ContractError("backward() needs a single-element root, got shape " + shape_string(shape()));
  if (!requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const Tensor& in : n->inputs) {
      detail::Node* p = in.node_.get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  node_->adjoint.assign(1, 1.0);
  for (detail::Node* n : order) {
    if (n->adjoint.empty()) continue;
    if (n->backward) {
      BackwardContext ctx(*n, n->inputs);
      n->backward(ctx);
    }
    if (n->grad.empty()) {
      n->grad = std::move(n->adjoint);
    } else {
      kernels::axpy(n->grad.size(), 1.0, n->adjoint.data(), n->grad.data());
    }
    n->adjoint.clear();
    n->adjoint.shrink_to_fit();
  }
}

std::span<const double> BackwardContext::out_grad() const { return out_.adjoint; }
std::span<const double> BackwardContext::out_value() const { return out_.value; }

bool BackwardContext::needs_grad(std::size_t i) const { return inputs_[i].requires_grad(); }

std::span<double> BackwardContext::input_grad(std::size_t i) {
  detail::Node& in = *inputs_[i].node_;
  if (in.adjoint.empty()) in.adjoint.assign(in.value.size(), 0.0);
  return in.adjoint;
}

Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      BackwardFn backward) {
  bool any = false;
  if (g_recording)
    for (const Tensor& t : inputs) any = any || t.requires_grad();
  auto node = new_node(std::move(shape), std::move(values), any);
  node->leaf = false;
  if (any) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

bool grad_recording_enabled() { return g_recording; }

}  // namespace cellstn
