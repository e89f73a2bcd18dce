#pragma once

// Differentiable tensor operations.
//
// Image operations accept a single image [C,H,W] or a batch [N,C,H,W] and
// return the same rank. dense() accepts [In] or [N,In]; softmax() normalises
// the last axis.

#include <span>
#include <vector>

#include "cellstn/tensor.hpp"

namespace cellstn {

enum class Padding { same, valid };

// Cross-correlation plus bias. Kernel sides must be odd; 'same' pads with
// zeros so that stride 1 preserves H and W.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              Padding padding = Padding::same, std::size_t stride = 1);

// 2x2 window, stride 2. H and W must be even. Ties route the gradient to the
// first maximum in row-major window order.
Tensor maxpool2d(const Tensor& input);

// General max pooling with -inf padding (the inception pooled branch uses
// window 3, stride 1, padding 1).
Tensor max_pool(const Tensor& input, std::size_t window, std::size_t stride, std::size_t padding);

// weights [M,N] . input + bias
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);

// Subgradient 0 at x == 0.
Tensor relu(const Tensor& input);

Tensor softmax(const Tensor& input);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
// Gradient taken as 0 where the result is 0.
Tensor sqrt(const Tensor& a);
// log(max(a, floor)); gradient 0 where clamped.
Tensor log_clamped(const Tensor& a, double floor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
// Concatenation along one axis; all other dims must agree.
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Column j of a rank-2 tensor [B,K] as a [B] tensor.
Tensor column(const Tensor& a, std::size_t j);
// Rows [begin, begin + count) of the leading axis.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);

}  // namespace cellstn
