#include "ratekd/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

RATEKD_BEGIN_NAMESPACE
namespace kernels {
namespace {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using ConstArrayMap = Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>;

// Columns per GEMM: several samples are packed side by side so that late
// stages with tiny feature maps still produce reasonably shaped products.
constexpr std::int64_t kTargetColumns = 2048;

std::int64_t samples_per_chunk(const ConvGeometry& g) {
  const auto per_sample = g.out_h * g.out_w;
  return std::clamp<std::int64_t>(kTargetColumns / per_sample, 1, g.batch);
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad == 0;
}

// Output columns [lo, hi) whose input column ow*stride - pad + kj is in range.
std::pair<std::int64_t, std::int64_t> valid_columns(const ConvGeometry& g, std::int64_t kj) {
  const auto off = g.pad - kj;
  std::int64_t lo = off > 0 ? (off + g.stride - 1) / g.stride : 0;
  std::int64_t hi = (g.in_w - 1 + off) >= 0 ? (g.in_w - 1 + off) / g.stride + 1 : 0;
  lo = std::min(lo, g.out_w);
  hi = std::clamp(hi, lo, g.out_w);
  return {lo, hi};
}

// col[(c,ki,kj), s*OHW + oh*OW + ow] for samples [first, first+count).
void im2col(const Real* x, const ConvGeometry& g, std::int64_t first, std::int64_t count,
            Real* col) {
  const auto ohw = g.out_h * g.out_w;
  const auto cols = count * ohw;
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
        Real* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * cols;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::int64_t s = 0; s < count; ++s) {
          const Real* plane = x + ((first + s) * g.in_channels + c) * g.in_h * g.in_w;
          Real* dst = row + s * ohw;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            Real* d = dst + oh * g.out_w;
            const auto ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.in_h) {
              std::fill(d, d + g.out_w, Real(0));
              continue;
            }
            std::fill(d, d + lo, Real(0));
            std::fill(d + hi, d + g.out_w, Real(0));
            const Real* src = plane + ih * g.in_w - g.pad + kj;
            if (g.stride == 1) {
              std::copy(src + lo, src + hi, d + lo);
            } else {
              for (std::int64_t ow = lo; ow < hi; ++ow) d[ow] = src[ow * g.stride];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const Real* col, const ConvGeometry& g, std::int64_t first, std::int64_t count,
                Real* gx) {
  const auto ohw = g.out_h * g.out_w;
  const auto cols = count * ohw;
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
        const Real* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * cols;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::int64_t s = 0; s < count; ++s) {
          Real* plane = gx + ((first + s) * g.in_channels + c) * g.in_h * g.in_w;
          const Real* src = row + s * ohw;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            const auto ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.in_h) continue;
            Real* d = plane + ih * g.in_w - g.pad + kj;
            const Real* r = src + oh * g.out_w;
            for (std::int64_t ow = lo; ow < hi; ++ow) d[ow * g.stride] += r[ow];
          }
        }
      }
    }
  }
}

// Move between NCHW sample slabs and a chunk laid out as [O, s*HW + p].
void gather_chunk(const Real* y, std::int64_t channels, std::int64_t hw, std::int64_t first,
                  std::int64_t count, Real* chunk) {
  for (std::int64_t o = 0; o < channels; ++o) {
    for (std::int64_t s = 0; s < count; ++s) {
      const Real* src = y + ((first + s) * channels + o) * hw;
      std::copy(src, src + hw, chunk + o * count * hw + s * hw);
    }
  }
}

void scatter_chunk(const Real* chunk, std::int64_t channels, std::int64_t hw, std::int64_t first,
                   std::int64_t count, Real* y) {
  for (std::int64_t o = 0; o < channels; ++o) {
    for (std::int64_t s = 0; s < count; ++s) {
      const Real* src = chunk + o * count * hw + s * hw;
      std::copy(src, src + hw, y + ((first + s) * channels + o) * hw);
    }
  }
}

std::vector<Real>& scratch(int slot) {
  thread_local std::vector<Real> buffers[3];
  return buffers[slot];
}

Real* scratch_data(int slot, std::int64_t n) {
  auto& b = scratch(slot);
  if (static_cast<std::int64_t>(b.size()) < n) b.resize(static_cast<std::size_t>(n));
  return b.data();
}

}  // namespace

ConvGeometry conv_geometry(const Shape& x, const Shape& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d expects x[N,C,H,W] and w[O,C,kh,kw], got " + x.to_string() + " and " +
                     w.to_string());
  }
  if (x[1] != w[1]) {
    throw ShapeError("conv2d channel mismatch: input " + x.to_string() + ", kernel " +
                     w.to_string());
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/padding");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, pad, 0, 0};
  if (g.kernel_h > g.in_h + 2 * pad || g.kernel_w > g.in_w + 2 * pad) {
    throw ShapeError("conv2d kernel " + w.to_string() + " larger than padded input " +
                     x.to_string());
  }
  g.out_h = (g.in_h + 2 * pad - g.kernel_h) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.kernel_w) / stride + 1;
  return g;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad) {
  const auto g = conv_geometry(x.shape(), w.shape(), stride, pad);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels)) {
    throw ShapeError("conv2d bias shape " + bias->shape().to_string());
  }
  Tensor y(Shape{g.batch, g.out_channels, g.out_h, g.out_w});
  const auto ohw = g.out_h * g.out_w;
  const auto kdim = g.in_channels * g.kernel_h * g.kernel_w;
  const auto chunk = samples_per_chunk(g);
  ConstMatMap wm(w.data(), g.out_channels, kdim);
  for (std::int64_t first = 0; first < g.batch; first += chunk) {
    const auto count = std::min(chunk, g.batch - first);
    const auto cols = count * ohw;
    const Real* col = nullptr;
    if (is_pointwise(g) && count == 1) {
      col = x.data() + first * g.in_channels * ohw;
    } else if (is_pointwise(g)) {
      Real* buf = scratch_data(0, kdim * cols);
      gather_chunk(x.data(), g.in_channels, ohw, first, count, buf);
      col = buf;
    } else {
      Real* buf = scratch_data(0, kdim * cols);
      im2col(x.data(), g, first, count, buf);
      col = buf;
    }
    Real* out = count == 1 ? y.data() + first * g.out_channels * ohw
                           : scratch_data(1, g.out_channels * cols);
    MatMap om(out, g.out_channels, cols);
    om.noalias() = wm * ConstMatMap(col, kdim, cols);
    if (bias) {
      for (std::int64_t o = 0; o < g.out_channels; ++o) om.row(o).array() += (*bias)[o];
    }
    if (count != 1) scatter_chunk(out, g.out_channels, ohw, first, count, y.data());
  }
  return y;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape,
                             int stride, int pad) {
  const auto g = conv_geometry(x_shape, w.shape(), stride, pad);
  Tensor gx(x_shape);
  const auto ohw = g.out_h * g.out_w;
  const auto kdim = g.in_channels * g.kernel_h * g.kernel_w;
  const auto chunk = samples_per_chunk(g);
  ConstMatMap wm(w.data(), g.out_channels, kdim);
  for (std::int64_t first = 0; first < g.batch; first += chunk) {
    const auto count = std::min(chunk, g.batch - first);
    const auto cols = count * ohw;
    const Real* gy = grad_out.data() + first * g.out_channels * ohw;
    if (count != 1) {
      Real* buf = scratch_data(1, g.out_channels * cols);
      gather_chunk(grad_out.data(), g.out_channels, ohw, first, count, buf);
      gy = buf;
    }
    if (is_pointwise(g)) {
      Real* gcol = count == 1 ? gx.data() + first * g.in_channels * ohw : scratch_data(0, kdim * cols);
      MatMap(gcol, kdim, cols).noalias() = wm.transpose() * ConstMatMap(gy, g.out_channels, cols);
      if (count != 1) scatter_chunk(gcol, g.in_channels, ohw, first, count, gx.data());
    } else {
      Real* gcol = scratch_data(0, kdim * cols);
      MatMap(gcol, kdim, cols).noalias() = wm.transpose() * ConstMatMap(gy, g.out_channels, cols);
      col2im_add(gcol, g, first, count, gx.data());
    }
  }
  return gx;
}

Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& x, const Shape& w_shape,
                              int stride, int pad) {
  const auto g = conv_geometry(x.shape(), w_shape, stride, pad);
  Tensor gw(w_shape);
  const auto ohw = g.out_h * g.out_w;
  const auto kdim = g.in_channels * g.kernel_h * g.kernel_w;
  const auto chunk = samples_per_chunk(g);
  MatMap gwm(gw.data(), g.out_channels, kdim);
  for (std::int64_t first = 0; first < g.batch; first += chunk) {
    const auto count = std::min(chunk, g.batch - first);
    const auto cols = count * ohw;
    const Real* gy = grad_out.data() + first * g.out_channels * ohw;
    if (count != 1) {
      Real* buf = scratch_data(1, g.out_channels * cols);
      gather_chunk(grad_out.data(), g.out_channels, ohw, first, count, buf);
      gy = buf;
    }
    const Real* col = nullptr;
    if (is_pointwise(g) && count == 1) {
      col = x.data() + first * g.in_channels * ohw;
    } else if (is_pointwise(g)) {
      Real* buf = scratch_data(0, kdim * cols);
      gather_chunk(x.data(), g.in_channels, ohw, first, count, buf);
      col = buf;
    } else {
      Real* buf = scratch_data(0, kdim * cols);
      im2col(x.data(), g, first, count, buf);
      col = buf;
    }
    gwm.noalias() += ConstMatMap(gy, g.out_channels, cols) * ConstMatMap(col, kdim, cols).transpose();
  }
  return gw;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands, got " + a.shape().to_string() + " and " +
                     b.shape().to_string());
  }
  const auto m = transpose_a ? a.dim(1) : a.dim(0);
  const auto k = transpose_a ? a.dim(0) : a.dim(1);
  const auto kb = transpose_b ? b.dim(1) : b.dim(0);
  const auto n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw ShapeError("matmul inner dimension mismatch: " + a.shape().to_string() + " x " +
                     b.shape().to_string());
  }
  Tensor c(Shape{m, n});
  ConstMatMap am(a.data(), a.dim(0), a.dim(1));
  ConstMatMap bm(b.data(), b.dim(0), b.dim(1));
  MatMap cm(c.data(), m, n);
  if (!transpose_a && !transpose_b) {
    cm.noalias() = am * bm;
  } else if (transpose_a && !transpose_b) {
    cm.noalias() = am.transpose() * bm;
  } else if (!transpose_a && transpose_b) {
    cm.noalias() = am * bm.transpose();
  } else {
    cm.noalias() = am.transpose() * bm.transpose();
  }
  return c;
}

ChannelStats channel_stats(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("channel_stats expects rank >= 2, got " + x.shape().to_string());
  const auto n = x.dim(0), c = x.dim(1), inner = x.shape().numel_from(2);
  ChannelStats s{Tensor(Shape{c}), Tensor(Shape{c})};
  const double count = static_cast<double>(n * inner);
  // Rows are reduced in Real, the per-row partials in double.
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double sum = 0, sq = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      sum += ConstArrayMap(x.data() + (i * c + ch) * inner, inner).sum();
    }
    const double mean_d = sum / count;
    const Real mean = static_cast<Real>(mean_d);
    for (std::int64_t i = 0; i < n; ++i) {
      sq += (ConstArrayMap(x.data() + (i * c + ch) * inner, inner) - mean).square().sum();
    }
    s.mean[ch] = mean;
    s.var[ch] = static_cast<Real>(sq / count);
  }
  return s;
}

Tensor normalize_affine(const Tensor& x, const Tensor& mean, const Tensor& var,
                        const Tensor& gamma, const Tensor& beta, Real eps) {
  if (x.rank() < 2) throw ShapeError("normalize expects rank >= 2");
  const auto n = x.dim(0), c = x.dim(1), inner = x.shape().numel_from(2);
  for (const Tensor* t : {&mean, &var, &gamma, &beta}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw ShapeError("normalize parameter shape " + t->shape().to_string() + " for input " +
                       x.shape().to_string());
    }
  }
  Tensor y(x.shape());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const Real scale = gamma[ch] / std::sqrt(var[ch] + eps);
    const Real shift = beta[ch] - mean[ch] * scale;
    for (std::int64_t i = 0; i < n; ++i) {
      const Real* p = x.data() + (i * c + ch) * inner;
      Real* q = y.data() + (i * c + ch) * inner;
      for (std::int64_t j = 0; j < inner; ++j) q[j] = p[j] * scale + shift;
    }
  }
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [N,C,H,W], got " + x.shape().to_string());
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y(Shape{n, c});
  for (std::int64_t i = 0; i < n * c; ++i) {
    const Real* p = x.data() + i * hw;
    Real s = 0;
    for (std::int64_t j = 0; j < hw; ++j) s += p[j];
    y[i] = s / static_cast<Real>(hw);
  }
  return y;
}

Tensor mean_over_groups(const Tensor& x, std::int64_t groups) {
  if (x.rank() < 1 || groups < 1 || x.dim(0) % groups != 0) {
    throw ShapeError("mean_over_groups: leading dim of " + x.shape().to_string() +
                     " not divisible by " + std::to_string(groups));
  }
  const auto slab = x.numel() / groups;
  Tensor y(x.shape().with_dim(0, x.dim(0) / groups));
  for (std::int64_t gi = 0; gi < groups; ++gi) {
    const Real* p = x.data() + gi * slab;
    for (std::int64_t j = 0; j < slab; ++j) y[j] += p[j];
  }
  y *= Real(1) / static_cast<Real>(groups);
  return y;
}

}  // namespace kernels
RATEKD_END_NAMESPACE
