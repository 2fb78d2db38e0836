#pragma once

#include "scanmtl/tensor.hpp"

// Forward/backward kernels for the handful of layers the model uses.
// Backward functions accumulate into parameter gradients (+=) and overwrite
// the input gradient when one is requested.
namespace mcx::ops {

/// Output size of a strided convolution along one axis.
int conv_out_size(int in, int kernel, int stride, int pad);
/// Output size of a transposed convolution along one axis.
int deconv_out_size(int in, int kernel, int stride, int pad);

/// x: [M,C,H,W], w: [O,C,k,k], b: [O] -> [M,O,Ho,Wo]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride,
                     int pad, Tensor* dx, Tensor& dw, Tensor& db);

/// x: [M,C,H,W], w: [C,O,k,k], b: [O] -> [M,O,Ho,Wo]
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                        int pad);
void conv_transpose2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                               int stride, int pad, Tensor* dx, Tensor& dw, Tensor& db);

/// x: [M,I], w: [I,O], b: [O] -> [M,O]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx,
                     Tensor& dw, Tensor& db);

/// [M,C,H,W] -> [M,C]
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& dy, const std::vector<int>& x_shape);

/// Adds a per-position bias b: [C,H,W] to every sample of x: [M,C,H,W].
Tensor add_position_bias(const Tensor& x, const Tensor& b);
void add_position_bias_backward(const Tensor& dy, Tensor& db);

void relu_inplace(Tensor& x);
void sigmoid_inplace(Tensor& x);
/// dy *= 1[y > 0]
void relu_backward_inplace(const Tensor& y, Tensor& dy);
/// dy *= y (1 - y)
void sigmoid_backward_inplace(const Tensor& y, Tensor& dy);

}  // namespace mcx::ops
