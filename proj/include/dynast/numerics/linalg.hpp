#pragma once

// Matrix product and 2-d convolution. Both lower to a dense GEMM through
// Eigen maps over the tensor buffers; convolution uses im2col.

#include <Eigen/Core>

#include <algorithm>
#include <utility>
#include <vector>

#include "dynast/numerics/ops.hpp"

namespace dynast {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap cmap(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap map(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatMap cmap(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap map(double* p, std::size_t rows, std::size_t cols) {
  return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, pad;
  std::size_t out_h, out_w;

  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_h * out_w; }
};

// Grow-only per-thread buffer; contents are unspecified between uses.
inline double* scratch(std::size_t slot, std::size_t n) {
  thread_local std::vector<double, TensorAllocator<double>> buffers[3];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Channels are staged through a zero-padded plane so every column row is a
// plain strided read with no bounds tests.
inline void im2col(const Tensor& x, const ConvGeometry& g, double* out) {
  const std::size_t cols = g.col_cols();
  const std::size_t ph = g.height + 2 * g.pad, pw = g.width + 2 * g.pad;
  double* padded = scratch(2, ph * pw);
  std::fill(padded, padded + ph * pw, 0.0);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = x.data() + c * g.height * g.width;
    for (std::size_t y = 0; y < g.height; ++y) {
      std::copy(plane + y * g.width, plane + (y + 1) * g.width, padded + (y + g.pad) * pw + g.pad);
    }
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = out + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const double* src = padded + (oy * g.stride + ky) * pw + kx;
          double* dst = row + oy * g.out_w;
          if (g.stride == 1) {
            std::copy(src, src + g.out_w, dst);
          } else {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[ox] = src[ox * g.stride];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* in, const ConvGeometry& g, Tensor& dx) {
  const std::size_t cols = g.col_cols();
  const std::size_t ph = g.height + 2 * g.pad, pw = g.width + 2 * g.pad;
  double* padded = scratch(2, ph * pw);
  for (std::size_t c = 0; c < g.channels; ++c) {
    std::fill(padded, padded + ph * pw, 0.0);
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = in + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const double* src = row + oy * g.out_w;
          double* dst = padded + (oy * g.stride + ky) * pw + kx;
          if (g.stride == 1) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[ox] += src[ox];
          } else {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
    double* plane = dx.data() + c * g.height * g.width;
    for (std::size_t y = 0; y < g.height; ++y) {
      const double* src = padded + (y + g.pad) * pw + g.pad;
      double* dst = plane + y * g.width;
      for (std::size_t x = 0; x < g.width; ++x) dst[x] += src[x];
    }
  }
}

}  // namespace detail

// [m, k] x [k, n] -> [m, n]
inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out({m, n}, uninit);
  detail::map(out, m, n).noalias() = detail::cmap(a.value(), m, k) * detail::cmap(b.value(), k, n);
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    auto g = detail::cmap(self.grad, m, n);
    if (Tensor* ga = input_grad(self, 0)) {
      detail::map(*ga, m, k).noalias() += g * detail::cmap(input_value(self, 1), k, n).transpose();
    }
    if (Tensor* gb = input_grad(self, 1)) {
      detail::map(*gb, k, n).noalias() += detail::cmap(input_value(self, 0), m, k).transpose() * g;
    }
  });
}

// x: [C, H, W], weight: [O, C, K, K], bias: [O] or null. Zero padding.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride = 1, std::size_t pad = 0) {
  detail::require_rank(x, 3, "conv2d input");
  detail::require_rank(weight, 4, "conv2d weight");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws[1] != xs[0] || ws[2] != ws[3]) {
    throw ShapeError("conv2d: shape mismatch input " + shape_str(xs) + " vs weight " + shape_str(ws));
  }
  if (bias && (bias.shape().size() != 1 || bias.shape()[0] != ws[0])) {
    throw ShapeError("conv2d: shape mismatch weight " + shape_str(ws) + " vs bias " + shape_str(bias.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvGeometry g{xs[0], xs[1], xs[2], ws[2], stride, pad, 0, 0};
  if (xs[1] + 2 * pad < g.kernel || xs[2] + 2 * pad < g.kernel) {
    throw ShapeError("conv2d: kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
  }
  g.out_h = (xs[1] + 2 * pad - g.kernel) / stride + 1;
  g.out_w = (xs[2] + 2 * pad - g.kernel) / stride + 1;
  const std::size_t out_c = ws[0], rows = g.col_rows(), cols = g.col_cols();

  const double* colv = x.value().data();
  if (!g.pointwise()) {
    double* col = detail::scratch(0, rows * cols);
    detail::im2col(x.value(), g, col);
    colv = col;
  }

  Tensor out({out_c, g.out_h, g.out_w}, uninit);
  auto om = detail::map(out, out_c, cols);
  om.noalias() = detail::cmap(weight.value(), out_c, rows) * detail::cmap(colv, rows, cols);
  if (bias) {
    for (std::size_t o = 0; o < out_c; ++o) om.row(static_cast<Eigen::Index>(o)).array() += bias.value()[o];
  }

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return make_op(std::move(out), std::move(inputs), [g, out_c, rows, cols](Node& self) {
    auto gm = detail::cmap(self.grad, out_c, cols);
    if (Tensor* gw = input_grad(self, 1)) {
      // The column matrix is rebuilt rather than kept alive between passes.
      const double* colv = input_value(self, 0).data();
      if (!g.pointwise()) {
        double* col = detail::scratch(0, rows * cols);
        detail::im2col(input_value(self, 0), g, col);
        colv = col;
      }
      detail::map(*gw, out_c, rows).noalias() += gm * detail::cmap(colv, rows, cols).transpose();
    }
    if (self.inputs.size() > 2) {
      if (Tensor* gb = input_grad(self, 2)) {
        for (std::size_t o = 0; o < out_c; ++o) (*gb)[o] += gm.row(static_cast<Eigen::Index>(o)).sum();
      }
    }
    if (Tensor* gx = input_grad(self, 0)) {
      if (g.pointwise()) {
        detail::map(*gx, rows, cols).noalias() += detail::cmap(input_value(self, 1), out_c, rows).transpose() * gm;
      } else {
        double* dcol = detail::scratch(1, rows * cols);
        detail::map(dcol, rows, cols).noalias() = detail::cmap(input_value(self, 1), out_c, rows).transpose() * gm;
        detail::col2im_add(dcol, g, *gx);
      }
    }
  });
}

}  // namespace dynast
