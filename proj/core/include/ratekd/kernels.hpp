#pragma once

#include <cstdint>

#include "ratekd/tensor.hpp"

RATEKD_BEGIN_NAMESPACE

// Gradient-free numeric kernels. The autodiff ops and the spike-phase
// simulation are both built on these.
namespace kernels {

struct ConvGeometry {
  std::int64_t batch, in_channels, in_h, in_w;
  std::int64_t out_channels, kernel_h, kernel_w;
  std::int64_t stride, pad;
  std::int64_t out_h, out_w;
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, int stride, int pad);

/// Cross-correlation of x[N,C,H,W] with w[O,C,kh,kw] (+ optional bias[O]).
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad);
Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape,
                             int stride, int pad);
Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& x, const Shape& w_shape,
                              int stride, int pad);

/// C = op(A) * op(B) for rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);

/// Per-channel mean and biased variance over every axis except axis 1.
struct ChannelStats {
  Tensor mean;
  Tensor var;
};
ChannelStats channel_stats(const Tensor& x);

/// gamma * (x - mean) / sqrt(var + eps) + beta, broadcast along axis 1.
Tensor normalize_affine(const Tensor& x, const Tensor& mean, const Tensor& var,
                        const Tensor& gamma, const Tensor& beta, Real eps);

/// Mean over the spatial axes of x[N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& x);

/// Mean over the leading `groups` slabs: x[G*M, ...] -> [M, ...].
Tensor mean_over_groups(const Tensor& x, std::int64_t groups);

}  // namespace kernels

RATEKD_END_NAMESPACE
