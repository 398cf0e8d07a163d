#pragma once

// Elementwise, structural and reduction primitives with reverse-mode rules.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dynast/numerics/autograd.hpp"

namespace dynast {

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <typename F, typename D>
Var unary(const Var& x, F f, D dfdx) {
  Tensor out(x.shape(), uninit);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_op(std::move(out), {x}, [dfdx](Node& self) {
    const Tensor& xv = input_value(self, 0);
    if (Tensor* gx = input_grad(self, 0)) {
      for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
    }
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (Tensor* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(const Var& a, double slope = 0.2) {
  return detail::unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// log(1 + e^x), evaluated without overflow.
inline Var softplus(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return sigmoid_value(x); });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

inline Var transpose2d(const Var& a) {
  detail::require_rank(a, 2, "transpose2d");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r}, uninit);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.value()[i * c + j];
  return make_op(std::move(out), {a}, [r, c](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[j * r + i];
    }
  });
}

// [C_k, H, W] maps stacked along channels.
inline Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.size() != 3) throw ShapeError("concat_channels: expected [C,H,W], got " + shape_str(s0));
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != 3 || s[1] != s0[1] || s[2] != s0[2]) {
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(s0) + " vs " + shape_str(s));
    }
    channels += s[0];
  }
  Tensor out({channels, s0[1], s0[2]}, uninit);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.size(), out.data() + offset);
    offset += p.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_op(std::move(out), std::move(inputs), [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t n = self.inputs[k]->value.size();
      if (Tensor* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

inline Var concat_channels(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return concat_channels(std::span<const Var>(v));
}

// x[C,H,W] * m[1,H,W], broadcasting m over channels.
inline Var mul_spatial(const Var& x, const Var& m) {
  detail::require_rank(x, 3, "mul_spatial");
  const Shape& xs = x.shape();
  const Shape& ms = m.shape();
  if (ms.size() != 3 || ms[0] != 1 || ms[1] != xs[1] || ms[2] != xs[2]) {
    throw ShapeError("mul_spatial: shape mismatch " + shape_str(xs) + " vs " + shape_str(ms));
  }
  const std::size_t plane = xs[1] * xs[2];
  Tensor out = x.value();
  for (std::size_t c = 0; c < xs[0]; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] *= m.value()[p];
  return make_op(std::move(out), {x, m}, [plane](Node& self) {
    const Tensor& xv = input_value(self, 0);
    const Tensor& mv = input_value(self, 1);
    const std::size_t channels = xv.size() / plane;
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) (*g)[c * plane + p] += self.grad[c * plane + p] * mv[p];
    }
    if (Tensor* g = input_grad(self, 1)) {
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) (*g)[p] += self.grad[c * plane + p] * xv[c * plane + p];
    }
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().span()) s += v;
  return make_op(Tensor({1}, {s}), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (auto& v : g->span()) v += self.grad[0];
    }
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Sums of a list of scalars.
inline Var add_all(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_all: no terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// Per-element mean of squared differences.
inline Var mse(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mse");
  const std::size_t n = a.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return make_op(Tensor({1}, {s / static_cast<double>(n)}), {a, b}, [n](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * (av[i] - bv[i]);
    }
    if (Tensor* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] -= k * (av[i] - bv[i]);
    }
  });
}

// [R, C] -> [R]
inline Var row_sum(const Var& a) {
  detail::require_rank(a, 2, "row_sum");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += a.value()[r * cols + c];
    out[r] = s;
  }
  return make_op(std::move(out), {a}, [rows, cols](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*g)[r * cols + c] += self.grad[r];
    }
  });
}

// Per-channel spatial mean of [C,H,W] -> [C].
inline Var channel_mean(const Var& x) {
  detail::require_rank(x, 3, "channel_mean");
  const std::size_t channels = x.shape()[0], plane = x.shape()[1] * x.shape()[2];
  Tensor out({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    // Summed relative to the first element so a constant channel is exact.
    const double* xs = x.value().data() + c * plane;
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xs[p] - xs[0];
    out[c] = xs[0] + s / static_cast<double>(plane);
  }
  return make_op(std::move(out), {x}, [channels, plane](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double k = self.grad[c] / static_cast<double>(plane);
        for (std::size_t p = 0; p < plane; ++p) (*g)[c * plane + p] += k;
      }
    }
  });
}

// Per-channel population standard deviation of [C,H,W] -> [C]. The derivative
// of a zero-variance channel is taken as 0.
inline Var channel_std(const Var& x) {
  detail::require_rank(x, 3, "channel_std");
  const std::size_t channels = x.shape()[0], plane = x.shape()[1] * x.shape()[2];
  Tensor out({channels});
  std::vector<double> means(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* xs = x.value().data() + c * plane;
    double shifted = 0.0;
    for (std::size_t p = 0; p < plane; ++p) shifted += xs[p] - xs[0];
    shifted /= static_cast<double>(plane);
    double v = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      const double d = (xs[p] - xs[0]) - shifted;
      v += d * d;
    }
    means[c] = xs[0] + shifted;
    out[c] = std::sqrt(v / static_cast<double>(plane));
  }
  return make_op(std::move(out), {x}, [channels, plane, means](Node& self) {
    const Tensor& xv = input_value(self, 0);
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double sd = self.value[c];
        if (sd <= 0.0) continue;
        const double k = self.grad[c] / (static_cast<double>(plane) * sd);
        for (std::size_t p = 0; p < plane; ++p) (*g)[c * plane + p] += k * (xv[c * plane + p] - means[c]);
      }
    }
  });
}

}  // namespace dynast
