#pragma once

#include <cmath>
#include <vector>

#include "dynast/numerics/ops.hpp"

namespace dynast {

inline constexpr double kNormEps = 1e-5;

// Per-channel spatial standardization of [C, H, W] with population variance.
inline Var instance_norm(const Var& x) {
  detail::require_rank(x, 3, "instance_norm");
  const std::size_t channels = x.shape()[0], plane = x.shape()[1] * x.shape()[2];
  if (plane < 2) throw ShapeError("instance_norm: needs H*W >= 2, got " + shape_str(x.shape()));
  Tensor out(x.shape(), uninit);
  std::vector<double> inv_std(channels);
  const double n = static_cast<double>(plane);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* xs = x.value().data() + c * plane;
    double m = 0.0;
    for (std::size_t p = 0; p < plane; ++p) m += xs[p];
    m /= n;
    double v = 0.0;
    for (std::size_t p = 0; p < plane; ++p) v += (xs[p] - m) * (xs[p] - m);
    v /= n;
    const double is = 1.0 / std::sqrt(v + kNormEps);
    inv_std[c] = is;
    double* ys = out.data() + c * plane;
    for (std::size_t p = 0; p < plane; ++p) ys[p] = (xs[p] - m) * is;
  }
  return make_op(std::move(out), {x}, [channels, plane, n, inv_std](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t c = 0; c < channels; ++c) {
      const double* g = self.grad.data() + c * plane;
      const double* y = self.value.data() + c * plane;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        mg += g[p];
        mgy += g[p] * y[p];
      }
      mg /= n;
      mgy /= n;
      double* dx = gx->data() + c * plane;
      for (std::size_t p = 0; p < plane; ++p) dx[p] += inv_std[c] * (g[p] - mg - y[p] * mgy);
    }
  });
}

// Normalizes the C-vector at every spatial position of [C, H, W], then applies
// per-channel gain and bias (each [C]).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  detail::require_rank(x, 3, "layer_norm");
  const std::size_t channels = x.shape()[0], plane = x.shape()[1] * x.shape()[2];
  const Shape cshape{channels};
  if (gain.shape() != cshape || bias.shape() != cshape) {
    throw ShapeError("layer_norm: shape mismatch input " + shape_str(x.shape()) + " vs gain " +
                     shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const double n = static_cast<double>(channels);
  std::vector<double> mean(plane, 0.0), var(plane, 0.0), inv_std(plane);
  const double* xv = x.value().data();
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) mean[p] += xv[c * plane + p];
  for (auto& m : mean) m /= n;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const double d = xv[c * plane + p] - mean[p];
      var[p] += d * d;
    }
  for (std::size_t p = 0; p < plane; ++p) inv_std[p] = 1.0 / std::sqrt(var[p] / n + kNormEps);

  Tensor normalized(x.shape(), uninit);
  Tensor out(x.shape(), uninit);
  for (std::size_t c = 0; c < channels; ++c) {
    const double gc = gain.value()[c], bc = bias.value()[c];
    for (std::size_t p = 0; p < plane; ++p) {
      const double y = (xv[c * plane + p] - mean[p]) * inv_std[p];
      normalized[c * plane + p] = y;
      out[c * plane + p] = gc * y + bc;
    }
  }
  return make_op(std::move(out), {x, gain, bias},
                 [channels, plane, n, inv_std, normalized = std::move(normalized)](Node& self) {
                   const Tensor& gv = input_value(self, 1);
                   const Tensor& g = self.grad;
                   if (Tensor* dg = input_grad(self, 1)) {
                     for (std::size_t c = 0; c < channels; ++c) {
                       double s = 0.0;
                       for (std::size_t p = 0; p < plane; ++p) s += g[c * plane + p] * normalized[c * plane + p];
                       (*dg)[c] += s;
                     }
                   }
                   if (Tensor* db = input_grad(self, 2)) {
                     for (std::size_t c = 0; c < channels; ++c) {
                       double s = 0.0;
                       for (std::size_t p = 0; p < plane; ++p) s += g[c * plane + p];
                       (*db)[c] += s;
                     }
                   }
                   Tensor* dx = input_grad(self, 0);
                   if (!dx) return;
                   std::vector<double> mg(plane, 0.0), mgy(plane, 0.0);
                   for (std::size_t c = 0; c < channels; ++c)
                     for (std::size_t p = 0; p < plane; ++p) {
                       const double gy = g[c * plane + p] * gv[c];
                       mg[p] += gy;
                       mgy[p] += gy * normalized[c * plane + p];
                     }
                   for (std::size_t p = 0; p < plane; ++p) {
                     mg[p] /= n;
                     mgy[p] /= n;
                   }
                   for (std::size_t c = 0; c < channels; ++c)
                     for (std::size_t p = 0; p < plane; ++p) {
                       const double gy = g[c * plane + p] * gv[c];
                       (*dx)[c * plane + p] += inv_std[p] * (gy - mg[p] - normalized[c * plane + p] * mgy[p]);
                     }
                 });
}

}  // namespace dynast
