#pragma once

// Warping, matching loss, task losses (supervised and style) and the total
// objective. A fixed random conv pyramid stands in for a pretrained
// perceptual network; callers can supply their own tap features instead.

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynast/blocks.hpp"

namespace dynast {

inline constexpr double kWarpEps = 1e-8;

// W = D * exp(C - m) / (sum_slots D * exp(C - m) + eps), m the max of C over a
// query's valid slots. Rows whose gated mass is exactly 0 give W = 0.
//
// D only ever reaches here through the straight-through gate, so its gradient
// is a surrogate too: the derivative taken at the unpruned normaliser,
// A_s * (g_s - sum_t g_t W_t). That is exact when every valid slot is kept and
// stays bounded otherwise; the true e_s / z grows without limit as the kept
// mass shrinks, and one such step wrecks the optimiser state.
inline Var warp_matrix(const Var& c, const Var& d, const CandidateSet& cs) {
  const Shape want{cs.queries(), cs.capacity()};
  if (c.shape() != want || d.shape() != want) {
    throw ShapeError("warp_matrix: correlation " + shape_str(c.shape()) + ", decisions " + shape_str(d.shape()) +
                     ", candidates " + shape_str(want));
  }
  const std::size_t nq = cs.queries(), cap = cs.capacity();
  Tensor w(want);
  Tensor e(want);  // exp(C - m) on valid slots
  std::vector<std::size_t> argmax(nq);
  std::vector<double> z(nq), z_all(nq);
  const Tensor& cv = c.value();
  const Tensor& dv = d.value();
  for (std::size_t q = 0; q < nq; ++q) {
    const std::size_t n = cs.count(q);
    const double* row = cv.data() + q * cap;
    std::size_t best = 0;
    for (std::size_t s = 1; s < n; ++s) {
      if (row[s] > row[best]) best = s;
    }
    argmax[q] = best;
    double zq = 0.0, za = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      e[q * cap + s] = std::exp(row[s] - row[best]);
      zq += dv[q * cap + s] * e[q * cap + s];
      za += e[q * cap + s];
    }
    z[q] = zq + kWarpEps;
    z_all[q] = za + kWarpEps;
    for (std::size_t s = 0; s < n; ++s) w[q * cap + s] = dv[q * cap + s] * e[q * cap + s] / z[q];
  }
  return make_op(std::move(w), {c, d}, [nq, cap, argmax, z_all, e = std::move(e)](Node& self) {
    Tensor* gc = input_grad(self, 0);
    Tensor* gd = input_grad(self, 1);
    const Tensor& w = self.value;
    const Tensor& g = self.grad;
    for (std::size_t q = 0; q < nq; ++q) {
      const std::size_t o = q * cap;
      double gw = 0.0, mass = 0.0;
      for (std::size_t s = 0; s < cap; ++s) {
        gw += g[o + s] * w[o + s];
        mass += w[o + s];
      }
      if (gc) {
        for (std::size_t s = 0; s < cap; ++s) (*gc)[o + s] += w[o + s] * (g[o + s] - gw);
        // m moves with the arg-max slot; only the eps term sees it.
        (*gc)[o + argmax[q]] -= gw * (1.0 - mass);
      }
      if (gd) {
        for (std::size_t s = 0; s < cap; ++s) (*gd)[o + s] += e[o + s] * (g[o + s] - gw) / z_all[q];
      }
    }
  });
}

inline Var warp_matrix(const SparseAttentionMap& m) { return warp_matrix(m.correlation, m.gate, m.candidates); }

// Warped image on the map's query grid: each pixel is the W-weighted sum of
// reference pixels at its candidate positions. `ref` is already at the map's
// reference resolution.
inline Var warp_reference(const Var& w, const Var& ref, const SparseAttentionMap& m) {
  if (ref.shape().size() != 3 || grid_of(ref.shape()).size() != m.ref_dims.size()) {
    throw ShapeError("warp_reference: reference " + shape_str(ref.shape()) + " does not match the map's reference grid");
  }
  const std::size_t channels = ref.shape()[0];
  Var out = sparse_aggregate(w, reshape(ref, {channels, m.candidates.n_ref()}), m.candidates);
  return reshape(out, {channels, m.query_dims.h, m.query_dims.w});
}

struct MatchingLoss {
  Var total;
  std::vector<Var> per_scale;  // index 0 is the finest scale; 0 where no block matches
};

// Sum over every block with an attention map of MSE(warp(I_ref), I_tgt), both
// resized to that block's grid.
inline MatchingLoss matching_loss(const ModelOutput& out, const Tensor& i_ref, const Tensor& i_tgt) {
  if (i_tgt.empty()) throw ConfigError("matching_loss: ground-truth target image is required");
  if (i_ref.shape() != i_tgt.shape()) {
    throw ShapeError("matching_loss: reference " + shape_str(i_ref.shape()) + " vs target " + shape_str(i_tgt.shape()));
  }
  MatchingLoss ml;
  std::vector<Var> all;
  for (const auto& scale_blocks : out.blocks) {
    std::vector<Var> terms;
    Tensor ref_r, tgt_r;
    for (const auto& b : scale_blocks) {
      if (!b.attn) continue;
      const SparseAttentionMap& m = *b.attn;
      if (ref_r.empty()) {
        ref_r = bilinear_resize(i_ref, m.ref_dims.h, m.ref_dims.w);
        tgt_r = bilinear_resize(i_tgt, m.query_dims.h, m.query_dims.w);
      }
      Var warped = warp_reference(warp_matrix(m), Var::constant(ref_r), m);
      terms.push_back(mse(warped, Var::constant(tgt_r)));
    }
    ml.per_scale.push_back(terms.empty() ? Var::constant(Tensor({1})) : add_all(terms));
    all.push_back(ml.per_scale.back());
  }
  ml.total = add_all(all);
  return ml;
}

// Frozen conv pyramid: tap 1 at full resolution, each later tap after a
// stride-2 conv. Weights come from a fixed seed and never train.
struct FeatureExtractor {
  static constexpr std::uint64_t kDefaultSeed = 0x5eedf00dULL;
  static constexpr std::array<std::size_t, 4> kWidths{16, 32, 48, 64};

  std::array<Conv, 4> stages;

  static FeatureExtractor create(std::size_t image_channels = 3, std::uint64_t seed = kDefaultSeed) {
    ParameterStore store;
    Rng rng(seed);
    auto pb = ParamBuilder::create(store, rng);
    FeatureExtractor fx;
    std::size_t in = image_channels;
    for (std::size_t i = 0; i < 4; ++i) {
      // Uniform fan-in init with gain sqrt(6) keeps activation scale through relu.
      fx.stages[i] = make_conv(pb, "phi" + std::to_string(i + 1),
                               {.in = in, .out = kWidths[i], .kernel = 3, .stride = i == 0 ? 1u : 2u,
                                .weight_gain = std::sqrt(6.0), .bias_fill = 0.0});
      in = kWidths[i];
    }
    for (auto& st : fx.stages) {
      st.weight = Var::constant(st.weight.value());
      st.bias = Var::constant(st.bias.value());
    }
    return fx;
  }

  std::array<Var, 4> taps(const Var& image) const {
    std::array<Var, 4> t;
    Var x = image;
    for (std::size_t i = 0; i < 4; ++i) t[i] = x = relu(stages[i](x));
    return t;
  }
};

// Anything that maps an image to four tap features; the default wraps a
// FeatureExtractor, external callers can inject other features.
using TapFunction = std::function<std::array<Var, 4>(const Var&)>;

inline TapFunction taps_of(const FeatureExtractor& fx) {
  return [&fx](const Var& image) { return fx.taps(image); };
}

// Three-layer conv patch discriminator over concat(S_tgt, image); outputs logits.
struct PatchDiscriminator {
  Conv c1, c2, c3;

  static PatchDiscriminator build(const ParamBuilder& pb, std::size_t in_channels) {
    ParamBuilder b = pb.scope("disc");
    return {make_conv(b, "conv1", {.in = in_channels, .out = 16, .kernel = 4, .stride = 2, .pad = 1}),
            make_conv(b, "conv2", {.in = 16, .out = 32, .kernel = 4, .stride = 2, .pad = 1}),
            make_conv(b, "conv3", {.in = 32, .out = 1, .kernel = 3})};
  }

  Var operator()(const Var& s_tgt, const Var& image) const {
    const std::array<Var, 2> parts{s_tgt, image};
    Var h = leaky_relu(c1(concat_channels(parts)), kLeakySlope);
    h = leaky_relu(c2(h), kLeakySlope);
    return c3(h);
  }
};

// Non-saturating generator term: mean softplus(-D(fake)) = -mean log sigmoid(D(fake)).
inline Var generator_adversarial_loss(const Var& fake_logits) { return mean(softplus(scale(fake_logits, -1.0))); }

// Discriminator objective: -log sigmoid(D(real)) - log(1 - sigmoid(D(fake))).
inline Var discriminator_loss(const Var& real_logits, const Var& fake_logits) {
  return add(mean(softplus(scale(real_logits, -1.0))), mean(softplus(fake_logits)));
}

struct TaskLoss {
  Var total;
  Var pixel;
  std::array<Var, 4> perceptual;  // unweighted per-tap MSE
  std::optional<Var> adversarial;
};

inline TaskLoss supervised_task_loss(const Var& out, const Tensor& i_tgt, const Var& s_tgt, const TapFunction& taps,
                                     const std::vector<double>& lambda_perceptual, double lambda_adv = 0.0,
                                     const PatchDiscriminator* disc = nullptr) {
  if (lambda_perceptual.size() != 4) throw ConfigError("supervised_task_loss: lambda_perceptual needs 4 entries");
  if (lambda_adv != 0.0 && !disc) throw ConfigError("supervised_task_loss: lambda_adv set without a discriminator");
  TaskLoss tl;
  const Var target = Var::constant(i_tgt);
  tl.pixel = mse(out, target);
  std::vector<Var> terms{tl.pixel};
  const auto fo = taps(out);
  const auto ft = taps(target);
  for (std::size_t i = 0; i < 4; ++i) {
    tl.perceptual[i] = mse(fo[i], Var::constant(ft[i].value()));
    if (lambda_perceptual[i] != 0.0) terms.push_back(scale(tl.perceptual[i], lambda_perceptual[i]));
  }
  if (lambda_adv != 0.0) {
    tl.adversarial = generator_adversarial_loss((*disc)(s_tgt, out));
    terms.push_back(scale(*tl.adversarial, lambda_adv));
  }
  tl.total = add_all(terms);
  return tl;
}

struct StyleLoss {
  Var total;
  Var content;
  Var style;
};

inline Var squared_distance(const Var& a, const Var& b) {
  Var d = sub(a, b);
  return sum(mul(d, d));
}

// l_c = MSE(phi_4(I_cs), phi_4(I_c)); l_s = sum over taps of the squared
// distances between per-channel means and standard deviations.
inline StyleLoss style_task_loss(const Var& i_cs, const Tensor& i_c, const Tensor& i_s, const TapFunction& taps,
                                 double lambda_s) {
  StyleLoss sl;
  const auto fcs = taps(i_cs);
  const auto fc = taps(Var::constant(i_c));
  const auto fs = taps(Var::constant(i_s));
  sl.content = mse(fcs[3], Var::constant(fc[3].value()));
  std::vector<Var> terms;
  for (std::size_t i = 0; i < 4; ++i) {
    const Var ref = Var::constant(fs[i].value());
    terms.push_back(squared_distance(channel_mean(fcs[i]), channel_mean(ref)));
    terms.push_back(squared_distance(channel_std(fcs[i]), channel_std(ref)));
  }
  sl.style = add_all(terms);
  sl.total = add(sl.content, scale(sl.style, lambda_s));
  return sl;
}

struct LossReport {
  double total = 0.0;
  double task = 0.0;
  double matching = 0.0;
  std::vector<double> matching_per_scale;  // finest first
  std::optional<double> pixel;
  std::optional<std::array<double, 4>> perceptual;
  std::optional<double> adversarial;

  // One log line; the caller adds the step index. Doubles print in shortest
  // round-trip form, so equal values give equal bytes.
  nlohmann::ordered_json to_json(std::uint64_t step) const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["total"] = total;
    j["task"] = task;
    j["matching"] = matching;
    j["matching_per_scale"] = matching_per_scale;
    if (pixel) j["pixel"] = *pixel;
    if (perceptual) j["perceptual"] = *perceptual;
    if (adversarial) j["adversarial"] = *adversarial;
    return j;
  }
};

struct Objective {
  Var total;
  LossReport report;
};

// L = L_t + lambda_m * L_m. The report's total is read off the graph value,
// which is computed as task + lambda_m * matching in one rounding each.
inline Objective total_loss(const Var& task, const std::optional<MatchingLoss>& matching, double lambda_m) {
  Objective o;
  o.report.task = task.value()[0];
  if (matching) {
    o.total = add(task, scale(matching->total, lambda_m));
    o.report.matching = matching->total.value()[0];
    for (const auto& t : matching->per_scale) o.report.matching_per_scale.push_back(t.value()[0]);
  } else {
    o.total = task;
  }
  o.report.total = o.total.value()[0];
  return o;
}

}  // namespace dynast
