#pragma once

#include <vector>

#include "s6la/tensor.hpp"

namespace s6la {

// Elementwise binary ops with NumPy-style right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// Matrix product over the last two axes. Leading axes must match exactly, or
// be absent on one operand (that operand is shared across the batch).
Tensor matmul(const Tensor& a, const Tensor& b);

enum class Padding { same, valid };

// Cross-correlation over the spatial axes of x [B,H,W,Cin] or [H,W,Cin] with
// kernel [kh,kw,Cin,Cout]. Kernel extents are restricted to {1,3}.
Tensor conv2d(const Tensor& x, const Tensor& kernel, Padding pad);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);

// Softmax over the last axis, computed with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);

// Normalization over the last axis with affine parameters gamma/beta [K].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int64_t>& sizes);

// Swap the last two axes.
Tensor transpose(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& s);
Tensor broadcast_to(const Tensor& x, const Shape& s);

// Non-overlapping average pooling by an integer factor over H and W.
Tensor avg_pool2d(const Tensor& x, int factor);

// Mean cross-entropy of logits [B,K] against integer labels, with a stable
// log-sum-exp. Gradient is (softmax - onehot)/B.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels);

}  // namespace s6la
