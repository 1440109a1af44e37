#pragma once

#include <vector>

#include "sepbn/tensor.hpp"

namespace sepbn::ops {

// Differentiable primitives as free functions. Forward passes return fresh
// tensors; backward passes take whatever context the forward saved. The
// layer classes in layers.hpp wrap these with saved-state bookkeeping.

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, int stride, int pad,
                     Tensor* grad_x, Tensor& grad_w, Tensor& grad_b);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, Tensor* grad_x,
                     Tensor& grad_w, Tensor& grad_b);

// leaky_relu derivative at exactly 0 is taken as 1.
Tensor leaky_relu(const Tensor& x, double slope);
Tensor leaky_relu_backward(const Tensor& x, const Tensor& grad_out, double slope);

Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out);  // y = sigmoid output

// Window maxima, k x k kernel. Argmax positions (flat input indices, first
// occurrence in row-major scan on ties) are written to `argmax` for backward.
Tensor max_pool2d(const Tensor& x, int k, int stride, std::vector<int64_t>& argmax);
Tensor adaptive_max_pool2d(const Tensor& x, int target, std::vector<int64_t>& argmax);
Tensor pool_backward(const std::vector<int64_t>& argmax, const Tensor& grad_out,
                     const std::vector<int>& in_shape);

Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& grad_out, const std::vector<int>& in_shape);

// Softmax over the last axis of logits/tau, computed with max subtraction.
Tensor temp_softmax(const Tensor& logits, double tau);
Tensor temp_softmax_backward(const Tensor& y, const Tensor& grad_out, double tau);

// Mean absolute difference over all elements; sign(0) taken as 0.
double l1_loss(const Tensor& pred, const Tensor& target, Tensor* grad_pred);

}  // namespace sepbn::ops
