#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "dynast/numerics/ops.hpp"

namespace dynast {

struct SoftmaxResult {
  Var probs;
  std::vector<std::size_t> degenerate_rows;  // rows with no unmasked entry
};

// Row-wise softmax of [rows, cols] with optional boolean mask (same layout,
// nonzero = keep). Masked entries are exactly 0; a fully masked row is all
// zeros and reported in degenerate_rows.
inline SoftmaxResult softmax_rows(const Var& logits, std::span<const std::uint8_t> mask = {}) {
  detail::require_rank(logits, 2, "softmax_rows");
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  if (!mask.empty() && mask.size() != rows * cols) {
    throw ShapeError("softmax_rows: mask of " + std::to_string(mask.size()) + " entries vs logits " +
                     shape_str(logits.shape()));
  }
  const bool masked = !mask.empty();
  Tensor out({rows, cols});
  SoftmaxResult result;
  const double* lv = logits.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = lv + r * cols;
    double* y = out.data() + r * cols;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!masked || mask[r * cols + c]) m = std::max(m, x[c]);
    }
    if (m == -std::numeric_limits<double>::infinity()) {
      result.degenerate_rows.push_back(r);
      continue;
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!masked || mask[r * cols + c]) {
        y[c] = std::exp(x[c] - m);
        z += y[c];
      }
    }
    const double iz = 1.0 / z;
    for (std::size_t c = 0; c < cols; ++c) y[c] *= iz;
  }
  result.probs = make_op(std::move(out), {logits}, [rows, cols](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
      double* d = gx->data() + r * cols;
      // Masked and degenerate entries have y == 0 and receive nothing.
      for (std::size_t c = 0; c < cols; ++c) d[c] += y[c] * (g[c] - dot);
    }
  });
  return result;
}

}  // namespace dynast
