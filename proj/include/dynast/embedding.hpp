#pragma once

// Multi-scale patch embedding and positional embeddings.
//
// Scale i (0 = finest) sees the input through non-overlapping 2^i x 2^i
// patches. Features at scale i mix the patch embeddings of every scale,
// resized to scale i, through a two-convolution MLP (X for the target
// branch, Y for the reference branch).

#include <string>
#include <vector>

#include "dynast/config.hpp"
#include "dynast/numerics.hpp"

namespace dynast {

inline constexpr double kLeakySlope = 0.2;

// conv3x3 -> leaky_relu -> conv3x3
struct Mlp2 {
  Conv first;
  Conv second;
  Var operator()(const Var& x) const { return second(leaky_relu(first(x), kLeakySlope)); }
};

inline Mlp2 make_mlp2(const ParamBuilder& pb, const std::string& name, std::size_t in, std::size_t out) {
  ParamBuilder b = pb.scope(name);
  return {make_conv(b, "conv1", {.in = in, .out = out, .kernel = 3}),
          make_conv(b, "conv2", {.in = out, .out = out, .kernel = 3})};
}

struct EmbeddingWeights {
  std::vector<Conv> patch_tgt;  // E_tgt per scale j
  std::vector<Conv> patch_ref;  // E_ref per scale j
  std::vector<Mlp2> mix_tgt;    // X per scale i
  std::vector<Mlp2> mix_ref;    // Y per scale i
  Var pos_coarsest;             // [P, H_{M-1}, W_{M-1}]
  std::vector<Conv> pos_up;     // per scale i < M-1
};

inline int first_embedding_scale(const ModelConfig& cfg) { return cfg.literal_scale_range ? 1 : 0; }

inline EmbeddingWeights build_embedding_weights(const ModelConfig& cfg, const ParamBuilder& root) {
  ParamBuilder pb = root.scope("embed");
  EmbeddingWeights w;
  const auto M = static_cast<std::size_t>(cfg.scales);
  const auto E = static_cast<std::size_t>(cfg.embed_channels);
  const auto S = static_cast<std::size_t>(cfg.semantic_channels);
  const auto R = static_cast<std::size_t>(cfg.ref_channels());
  for (std::size_t j = 0; j < M; ++j) {
    const auto p = static_cast<std::size_t>(cfg.patch_side(static_cast<int>(j)));
    const std::string sj = std::to_string(j);
    w.patch_tgt.push_back(make_conv(pb, "tgt" + sj, {.in = S, .out = E, .kernel = p, .stride = p, .pad = 0}));
    w.patch_ref.push_back(make_conv(pb, "ref" + sj, {.in = R, .out = E, .kernel = p, .stride = p, .pad = 0}));
  }
  const std::size_t mixed = E * (M - static_cast<std::size_t>(first_embedding_scale(cfg)));
  for (std::size_t i = 0; i < M; ++i) {
    const auto C = static_cast<std::size_t>(cfg.width(static_cast<int>(i)));
    w.mix_tgt.push_back(make_mlp2(pb, "x" + std::to_string(i), mixed, C));
    w.mix_ref.push_back(make_mlp2(pb, "y" + std::to_string(i), mixed, C));
  }
  const auto P = static_cast<std::size_t>(cfg.pos_channels);
  const auto coarse = static_cast<std::size_t>(cfg.res(cfg.scales - 1));
  w.pos_coarsest = pb.tensor("pos", {P, coarse, coarse}, Init::fan_in(), 1);
  for (std::size_t i = 0; i + 1 < M; ++i) {
    w.pos_up.push_back(make_conv(pb, "pos_up" + std::to_string(i), {.in = P, .out = P, .kernel = 3}));
  }
  return w;
}

struct MultiScaleFeatures {
  std::vector<Var> tgt;  // [C_i, H_i, W_i]
  std::vector<Var> ref;  // [C_i, H_i, W_i]
  std::vector<Var> pos;  // [P, H_i, W_i]
};

// Non-overlapping patch_side x patch_side patches, flattened channel-major and
// mapped linearly: a convolution with kernel = stride = patch_side.
inline Var patch_embed(const Var& image, int patch_side, const Conv& weights, int scale = -1) {
  if (image.shape().size() != 3) throw ShapeError("patch_embed: expected [C,H,W], got " + shape_str(image.shape()));
  const auto p = static_cast<std::size_t>(patch_side);
  if (patch_side < 1 || image.shape()[1] % p != 0 || image.shape()[2] % p != 0) {
    throw ShapeError("patch_embed" + (scale >= 0 ? " at scale " + std::to_string(scale) : std::string()) +
                     ": image " + shape_str(image.shape()) + " not divisible by patch side " +
                     std::to_string(patch_side));
  }
  if (weights.weight.shape()[2] != p) {
    throw ShapeError("patch_embed: weight " + shape_str(weights.weight.shape()) + " does not match patch side " +
                     std::to_string(patch_side));
  }
  return conv2d(image, weights.weight, weights.bias, p, 0);
}

// pos_{M-1} is learned; pos_i = leaky_relu(conv3x3(upsample2x(pos_{i+1}))).
inline std::vector<Var> build_position_embeddings(const ModelConfig& cfg, const EmbeddingWeights& w) {
  const auto M = static_cast<std::size_t>(cfg.scales);
  std::vector<Var> pos(M);
  pos[M - 1] = w.pos_coarsest;
  for (int i = cfg.scales - 2; i >= 0; --i) {
    const auto r = static_cast<std::size_t>(cfg.res(i));
    Var up = bilinear_resize(pos[static_cast<std::size_t>(i) + 1], r, r);
    pos[static_cast<std::size_t>(i)] = leaky_relu(w.pos_up[static_cast<std::size_t>(i)](up), kLeakySlope);
  }
  return pos;
}

inline Var attach_position(const Var& features, const Var& pos) {
  const Shape& f = features.shape();
  const Shape& p = pos.shape();
  if (f.size() != 3 || p.size() != 3 || f[1] != p[1] || f[2] != p[2]) {
    throw ShapeError("attach_position: spatial mismatch " + shape_str(f) + " vs " + shape_str(p));
  }
  return concat_channels({features, pos});
}

inline MultiScaleFeatures embed_multiscale(const Var& s_tgt, const Var& s_ref, const Var& i_ref,
                                           const ModelConfig& cfg, const EmbeddingWeights& w) {
  const auto finest = static_cast<std::size_t>(cfg.finest_resolution());
  for (const Var* v : {&s_tgt, &s_ref, &i_ref}) {
    const Shape& s = v->shape();
    if (s.size() != 3 || s[1] != finest || s[2] != finest) {
      throw ShapeError("embed_multiscale: input " + shape_str(s) + " is not at the finest resolution " +
                       std::to_string(finest));
    }
  }
  if (s_tgt.shape()[0] != static_cast<std::size_t>(cfg.semantic_channels) ||
      s_ref.shape()[0] != static_cast<std::size_t>(cfg.semantic_channels) ||
      i_ref.shape()[0] != static_cast<std::size_t>(cfg.image_channels)) {
    throw ShapeError("embed_multiscale: channel counts " + shape_str(s_tgt.shape()) + ", " +
                     shape_str(s_ref.shape()) + ", " + shape_str(i_ref.shape()) + " do not match the config");
  }
  const Var ref_input = concat_channels({s_ref, i_ref});
  const int first = first_embedding_scale(cfg);
  std::vector<Var> e_tgt, e_ref;
  for (int j = first; j < cfg.scales; ++j) {
    e_tgt.push_back(patch_embed(s_tgt, cfg.patch_side(j), w.patch_tgt[static_cast<std::size_t>(j)], j));
    e_ref.push_back(patch_embed(ref_input, cfg.patch_side(j), w.patch_ref[static_cast<std::size_t>(j)], j));
  }
  MultiScaleFeatures out;
  for (int i = 0; i < cfg.scales; ++i) {
    const auto r = static_cast<std::size_t>(cfg.res(i));
    std::vector<Var> parts_tgt, parts_ref;
    for (std::size_t n = 0; n < e_tgt.size(); ++n) {
      parts_tgt.push_back(bilinear_resize(e_tgt[n], r, r));
      parts_ref.push_back(bilinear_resize(e_ref[n], r, r));
    }
    const Var mixed_tgt = parts_tgt.size() == 1 ? parts_tgt[0] : concat_channels(std::span<const Var>(parts_tgt));
    const Var mixed_ref = parts_ref.size() == 1 ? parts_ref[0] : concat_channels(std::span<const Var>(parts_ref));
    out.tgt.push_back(w.mix_tgt[static_cast<std::size_t>(i)](mixed_tgt));
    out.ref.push_back(w.mix_ref[static_cast<std::size_t>(i)](mixed_ref));
  }
  out.pos = build_position_embeddings(cfg, w);
  return out;
}

}  // namespace dynast
