#pragma once

#include <vector>

#include "dynast/numerics/ops.hpp"

namespace dynast {

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double w;  // weight of `hi`
};

// Align-corners sampling: output i maps to input i * (in - 1) / (out - 1).
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = out == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo >= in - 1) lo = in - 1;
    const std::size_t hi = lo + 1 < in ? lo + 1 : lo;
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

// [C, H, W] -> [C, new_h, new_w], bilinear with aligned corners. Same-size
// resizes return the input untouched.
inline Var bilinear_resize(const Var& x, std::size_t new_h, std::size_t new_w) {
  detail::require_rank(x, 3, "bilinear_resize");
  if (new_h == 0 || new_w == 0) throw ShapeError("bilinear_resize: zero target size");
  const std::size_t channels = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h == new_h && w == new_w) return x;
  auto ty = detail::lerp_taps(h, new_h);
  auto tx = detail::lerp_taps(w, new_w);
  Tensor out({channels, new_h, new_w}, uninit);
  const double* xv = x.value().data();
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = xv + c * h * w;
    for (std::size_t i = 0; i < new_h; ++i) {
      const auto& a = ty[i];
      const double* r0 = plane + a.lo * w;
      const double* r1 = plane + a.hi * w;
      double* dst = out.data() + (c * new_h + i) * new_w;
      for (std::size_t j = 0; j < new_w; ++j) {
        const auto& b = tx[j];
        const double top = r0[b.lo] + b.w * (r0[b.hi] - r0[b.lo]);
        const double bot = r1[b.lo] + b.w * (r1[b.hi] - r1[b.lo]);
        dst[j] = top + a.w * (bot - top);
      }
    }
  }
  return make_op(std::move(out), {x}, [channels, h, w, new_h, new_w, ty, tx](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t c = 0; c < channels; ++c) {
      double* plane = gx->data() + c * h * w;
      for (std::size_t i = 0; i < new_h; ++i) {
        const auto& a = ty[i];
        const double* g = self.grad.data() + (c * new_h + i) * new_w;
        for (std::size_t j = 0; j < new_w; ++j) {
          const auto& b = tx[j];
          const double gt = g[j] * (1.0 - a.w), gb = g[j] * a.w;
          plane[a.lo * w + b.lo] += gt * (1.0 - b.w);
          plane[a.lo * w + b.hi] += gt * b.w;
          plane[a.hi * w + b.lo] += gb * (1.0 - b.w);
          plane[a.hi * w + b.hi] += gb * b.w;
        }
      }
    }
  });
}

inline Tensor bilinear_resize(const Tensor& x, std::size_t new_h, std::size_t new_w) {
  return bilinear_resize(Var::constant(x), new_h, new_w).value();
}

}  // namespace dynast
