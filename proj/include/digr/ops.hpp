#pragma once

#include "digr/tensor.hpp"

#include <vector>

// Differentiable primitives. Every function records a graph node when
// recording is enabled and one of its inputs requires a gradient; every
// backward rule is written in terms of these same primitives, so gradients
// can be differentiated again.
//
// Broadcasting is limited to matching shapes and one-element operands.

namespace digr {

struct Conv2dParams {
  Index stride = 1;
  Index padding = 0;
};

Index conv_output_size(Index input, Index kernel, Index stride, Index padding);

// Elementwise arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);

// Elementwise nonlinearities.
Tensor relu(const Tensor& x);
/// ReLU whose backward passes gradient only where both the input and the
/// incoming gradient are positive.
Tensor guided_relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
/// Gradient flows only where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);
/// Elementwise minimum; ties route the gradient to `a`.
Tensor minimum(const Tensor& a, const Tensor& b);
/// Multiplies by a constant 0/1 mask computed from x > 0 (no gradient to x).
Tensor mask_positive(const Tensor& grad, const Tensor& x);

// Linear algebra and convolution.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T and a^T * b without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x: [N, C, H, W], w: [O, C, KH, KW] -> [N, O, HO, WO].
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams params);
/// Adjoint of conv2d with respect to its input.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& input_shape,
                         Conv2dParams params);
/// Adjoint of conv2d with respect to its kernel.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape,
                          Conv2dParams params);
/// Adds bias[c] to every element of channel c of x: [N, C, ...].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// Sums x: [N, C, ...] over every axis except 1.
Tensor sum_to_channels(const Tensor& x);

// Reductions and shape manipulation.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sums over `axis`, dropping it.
Tensor sum_dim(const Tensor& x, std::size_t axis);
/// Inserts `axis` with extent `size`, repeating values along it.
Tensor expand_dim(const Tensor& x, std::size_t axis, Index size);
/// Maximum over `axis` (dropped); ties pick the first index.
Tensor max_dim(const Tensor& x, std::size_t axis);
/// Maximum over all elements; ties pick the first index.
Tensor max(const Tensor& x);
/// Index of the maximum along `axis`, first index on ties. Not differentiable.
std::vector<Index> argmax_dim(const Tensor& x, std::size_t axis);
/// out[o, i] = x[o, index[o, i], i] where x is viewed as [outer, axis, inner].
Tensor gather(const Tensor& x, std::size_t axis, const std::vector<Index>& index);
/// Adjoint of gather: scatters into zeros of `shape`.
Tensor scatter(const Tensor& values, std::size_t axis, const std::vector<Index>& index,
               const Shape& shape);
Tensor reshape(const Tensor& x, const Shape& shape);
/// Zero padding of the two trailing axes.
Tensor pad2d(const Tensor& x, Index padding);
/// Removes `padding` from each side of the two trailing axes.
Tensor crop2d(const Tensor& x, Index padding);
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);
/// Rows [start, start + length) along the leading axis.
Tensor narrow(const Tensor& x, Index start, Index length);
/// Adjoint of narrow: places x at `start` inside zeros of leading extent `total`.
Tensor embed(const Tensor& x, Index start, Index total);

// Softmax family over the trailing axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

/// Bilinear resize of the two trailing axes (half-pixel centers). Not recorded.
Tensor resize_bilinear(const Tensor& x, Index height, Index width);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace digr
