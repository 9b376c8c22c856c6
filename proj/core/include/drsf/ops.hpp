// Differentiable tensor operations.
//
// Feature maps follow the N x C x H x W convention. Binary elementwise ops
// accept a second operand of the same rank whose extents are either equal to
// the first operand's or 1 (e.g. per-channel [1,C,1,1] against [N,C,H,W]).
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "drsf/tensor.hpp"

namespace drsf {

enum class BinaryOp { add, sub, mul, div };

/// Divisors with |b| < 1e-300 are rejected.
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

/// scale * a + shift.
Tensor affine(const Tensor& a, double scale, double shift = 0.0);
inline Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }
inline Tensor operator*(double s, const Tensor& a) { return affine(a, s, 0.0); }
inline Tensor operator-(const Tensor& a) { return affine(a, -1.0, 0.0); }

/// Materializes b broadcast to `shape` (same rank; extents equal or 1).
Tensor broadcast_to(const Tensor& b, const Shape& shape);

Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
/// Natural log; requires strictly positive input.
Tensor log(const Tensor& a);

enum class Activation { sigmoid, relu, softplus, log_softmax };

/// `class_axis` is only consulted for log_softmax.
Tensor activation(Activation kind, const Tensor& x, std::size_t class_axis = 1);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
/// ln(1 + e^x), evaluated as x + ln(1 + e^-x) for x > 0.
Tensor softplus(const Tensor& x);
Tensor log_softmax(const Tensor& x, std::size_t class_axis);
Tensor softmax(const Tensor& x, std::size_t class_axis);

enum class Reduction { sum, mean, var };

/// Reduces over `axes`; var uses the population convention.
Tensor reduce(Reduction stat, const Tensor& x, std::vector<std::size_t> axes, bool keep_dims);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

/// [n x k] * [k x m].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N x Din] * w[Din x Dout] + bias[Dout].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
/// 3x3 kernel, stride 1, zero padding 1. k is [Cout x Cin x 3 x 3].
Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& bias);
/// Per-pixel linear map: x [N x Cin x H x W], w [Cin x Cout], bias [Cout].
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& bias);
/// 2x2 average pooling with stride 2; H and W must be even.
Tensor avg_pool2(const Tensor& x);
/// Nearest-neighbour upsampling of the two trailing axes.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// D[i,j] = ||x_i - y_j||^2 for x [n x d], y [m x d].
Tensor pairwise_sq_dists(const Tensor& x, const Tensor& y);

/// Identity forward; backward multiplies the incoming gradient by `factor`.
Tensor scale_gradient(const Tensor& x, double factor);

/// Mean over all non-class positions of -sum_k t_k log_softmax(logits)_k.
/// Targets are constants; each target row must sum to 1 +- 1e-6 with entries >= 0.
Tensor cross_entropy_soft(const Tensor& logits, const Tensor& targets, std::size_t class_axis = 1);

/// Mean over all non-class positions of -sum_k p_k ln p_k, with 0 ln 0 = 0.
/// Rows must be distributions (sum 1 +- 1e-6, entries >= 0).
Tensor mean_entropy(const Tensor& probs, std::size_t class_axis = 1);

/// Throws InvalidArgument unless every row along `class_axis` is a distribution.
void check_distribution(const Tensor& t, std::size_t class_axis, double tol, const char* what);

}  // namespace drsf
