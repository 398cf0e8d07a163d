#pragma once

// Image similarity on the unit range. SSIM uses a 7x7 uniform window over
// every fully interior window position, population (co)variances, and is
// averaged over positions and channels.

#include <algorithm>
#include <cmath>

#include "dynast/numerics.hpp"

namespace dynast {

inline constexpr double kPsnrCap = 99.0;
inline constexpr std::size_t kSsimWindow = 7;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

struct ImageMetrics {
  double l1 = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

namespace detail {

inline void require_images(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape() || a.ndim() != 3) {
    throw ShapeError(std::string(what) + ": images " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " must share a [C,H,W] shape");
  }
}

}  // namespace detail

inline double l1_error(const Tensor& a, const Tensor& b) {
  detail::require_images(a, b, "l1_error");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double psnr(const Tensor& a, const Tensor& b) {
  detail::require_images(a, b, "psnr");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse_v = s / static_cast<double>(a.size());
  if (mse_v == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse_v));
}

inline double ssim(const Tensor& a, const Tensor& b) {
  detail::require_images(a, b, "ssim");
  const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2), k = kSsimWindow;
  if (H < k || W < k) throw ShapeError("ssim: images must be at least 7x7, got " + shape_str(a.shape()));
  const double n = static_cast<double>(k * k);
  double total = 0.0;
  for (std::size_t ch = 0; ch < C; ++ch) {
    for (std::size_t y = 0; y + k <= H; ++y) {
      for (std::size_t x = 0; x + k <= W; ++x) {
        double ma = 0, mb = 0;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            ma += a.at(ch, y + dy, x + dx);
            mb += b.at(ch, y + dy, x + dx);
          }
        }
        ma /= n;
        mb /= n;
        double va = 0, vb = 0, cov = 0;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const double da = a.at(ch, y + dy, x + dx) - ma, db = b.at(ch, y + dy, x + dx) - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
          }
        }
        va /= n;
        vb /= n;
        cov /= n;
        total += ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) /
                 ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
      }
    }
  }
  return total / static_cast<double>(C * (H - k + 1) * (W - k + 1));
}

inline ImageMetrics image_metrics(const Tensor& a, const Tensor& b) { return {l1_error(a, b), psnr(a, b), ssim(a, b)}; }

}  // namespace dynast
