#pragma once

// Dense Attn / DynaST blocks and the multi-scale model.
//
// Scale M-1 runs dense blocks; every finer scale runs one inter-scale block
// (candidates inherited from the coarser scale's final block) followed by
// inner-scale blocks (candidates propagated from the previous block). Scales
// above max_matching_resolution skip attention and keep only the SPADE branch.

#include <optional>
#include <string>
#include <vector>

#include "dynast/attention.hpp"
#include "dynast/config.hpp"
#include "dynast/embedding.hpp"
#include "dynast/numerics.hpp"
#include "dynast/pruning.hpp"

namespace dynast {

// gamma / beta nets: conv3x3 -> relu -> conv1x1 on the resized semantic map.
struct SpadeParams {
  Conv gamma1, gamma2;
  Conv beta1, beta2;
};

inline SpadeParams make_spade(const ParamBuilder& pb, const std::string& name, std::size_t semantic, std::size_t hidden,
                              std::size_t channels) {
  ParamBuilder b = pb.scope(name);
  return {make_conv(b, "gamma1", {.in = semantic, .out = hidden, .kernel = 3}),
          make_conv(b, "gamma2", {.in = hidden, .out = channels}),
          make_conv(b, "beta1", {.in = semantic, .out = hidden, .kernel = 3}),
          make_conv(b, "beta2", {.in = hidden, .out = channels})};
}

// IN(F) * (1 + gamma(S)) + beta(S)
inline Var spade_modulate(const Var& f, const Var& s, const SpadeParams& sp) {
  if (grid_of(f.shape()) != grid_of(s.shape())) {
    throw ShapeError("spade_modulate: semantic map " + shape_str(s.shape()) + " does not match " + shape_str(f.shape()));
  }
  Var gamma = sp.gamma2(relu(sp.gamma1(s)));
  Var beta = sp.beta2(relu(sp.beta1(s)));
  return add(mul(instance_norm(f), add_scalar(gamma, 1.0)), beta);
}

// LN((1 - sum A~) * SP(F_prev, S) + sum A~ eta(F_ref) + F_prev). Without a map the
// attention term vanishes and SPADE carries the whole output.
inline Var aggregate_features(const Var& f_prev, const Var& f_ref, const SparseAttentionMap* attn, const Var& s,
                              const Conv* eta, const SpadeParams& sp, const LayerNorm& norm) {
  Var sp_out = spade_modulate(f_prev, s, sp);
  Var f_out = sp_out;
  if (attn) {
    const GridDims g = grid_of(f_prev.shape());
    const std::size_t C = f_prev.shape()[0];
    Var mass = reshape(row_sum(attn->pruned), {1, g.h, g.w});
    Var gate = add_scalar(scale(mass, -1.0), 1.0);
    Var values = (*eta)(f_ref);
    Var agg = sparse_aggregate(attn->pruned, reshape(values, {values.shape()[0], attn->candidates.n_ref()}), attn->candidates);
    f_out = add(mul_spatial(sp_out, gate), reshape(agg, {C, g.h, g.w}));
  }
  return norm(add(f_out, f_prev));
}

struct FfnParams {
  Conv conv1, conv2;
  LayerNorm norm;
};

// LN(F + conv3(relu(conv3(F))))
inline Var ffn_residual(const Var& f, const FfnParams& p) { return p.norm(add(f, p.conv2(relu(p.conv1(f))))); }

enum class BlockKind { dense, inter, inner, spade_only };

inline const char* block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::dense: return "dense";
    case BlockKind::inter: return "inter";
    case BlockKind::inner: return "inner";
    case BlockKind::spade_only: return "spade";
  }
  return "?";
}

struct BlockWeights {
  BlockKind kind = BlockKind::dense;
  std::optional<AttentionProjections> attn;
  std::optional<Conv> eta;
  std::optional<PruneHead> prune;
  SpadeParams spade;
  LayerNorm norm;
  FfnParams ffn;
};

struct ScaleWeights {
  std::vector<BlockWeights> blocks;
  std::optional<Conv> handoff;  // coarser final features -> this width, absent at the coarsest scale
};

struct DecoderWeights {
  Conv conv1, conv2;
};

struct ModelWeights {
  EmbeddingWeights embed;
  std::vector<ScaleWeights> scales;  // index = scale
  DecoderWeights decoder;
};

inline BlockKind block_kind(const ModelConfig& cfg, int scale, int block) {
  if (!cfg.matches_at(scale)) return BlockKind::spade_only;
  if (scale == cfg.scales - 1) return BlockKind::dense;
  return block == 0 || cfg.replace_inner_with_inter ? BlockKind::inter : BlockKind::inner;
}

inline ModelWeights build_model_weights(const ModelConfig& cfg, const ParamBuilder& root) {
  cfg.validate();
  ModelWeights w;
  w.embed = build_embedding_weights(cfg, root);
  const auto P = static_cast<std::size_t>(cfg.pos_channels);
  const auto S = static_cast<std::size_t>(cfg.semantic_channels);
  const auto hidden = static_cast<std::size_t>(cfg.spade_hidden);
  w.scales.resize(static_cast<std::size_t>(cfg.scales));
  for (int i = cfg.scales - 1; i >= 0; --i) {
    const ParamBuilder sb = root.scope("scale" + std::to_string(i));
    const auto C = static_cast<std::size_t>(cfg.width(i));
    ScaleWeights& sw = w.scales[static_cast<std::size_t>(i)];
    if (i < cfg.scales - 1) {
      sw.handoff = make_conv(sb, "handoff", {.in = static_cast<std::size_t>(cfg.width(i + 1)), .out = C});
    }
    std::optional<PruneHead> shared;
    for (int j = 0; j < cfg.blocks_at(i); ++j) {
      const ParamBuilder bb = sb.scope("block" + std::to_string(j));
      BlockWeights bw;
      bw.kind = block_kind(cfg, i, j);
      if (bw.kind != BlockKind::spade_only) {
        const double g = cfg.effective_attn_gain();
        bw.attn = AttentionProjections{
            make_conv(bb, "alpha", {.in = C + P, .out = C, .weight_gain = g, .bias_fill = 0.0}),
            make_conv(bb, "beta", {.in = C + P, .out = C, .weight_gain = g, .bias_fill = 0.0})};
        bw.eta = make_conv(bb, "eta", {.in = C, .out = C});
        const bool gated = bw.kind != BlockKind::dense || cfg.prune_dense_blocks;
        if (gated && !cfg.disable_pruning) {
          if (cfg.share_prune_heads) {
            if (!shared) shared = make_prune_head(sb, "prune", C, C, C, cfg.prune_bias_init);
            bw.prune = shared;
          } else {
            bw.prune = make_prune_head(bb, "prune", C, C, C, cfg.prune_bias_init);
          }
        }
      }
      bw.spade = make_spade(bb, "spade", S, hidden, C);
      bw.norm = make_layer_norm(bb, "norm", C);
      bw.ffn = FfnParams{make_conv(bb, "ffn1", {.in = C, .out = C, .kernel = 3}),
                         make_conv(bb, "ffn2", {.in = C, .out = C, .kernel = 3}), make_layer_norm(bb, "ffn_norm", C)};
      sw.blocks.push_back(std::move(bw));
    }
  }
  std::size_t concat = 0;
  for (int i = 0; i < cfg.scales; ++i) concat += static_cast<std::size_t>(cfg.width(i));
  const ParamBuilder db = root.scope("decoder");
  w.decoder = DecoderWeights{
      make_conv(db, "conv1", {.in = concat, .out = static_cast<std::size_t>(cfg.decoder_channels), .kernel = 3}),
      make_conv(db, "conv2",
                {.in = static_cast<std::size_t>(cfg.decoder_channels), .out = static_cast<std::size_t>(cfg.image_channels), .kernel = 3})};
  return w;
}

struct BlockOutput {
  Var features;                            // F^i_{tgt,j}
  std::optional<SparseAttentionMap> attn;  // absent for SPADE-only blocks
  BlockKind kind = BlockKind::dense;
};

// Discrete choices of one forward pass (candidate sets and gate decisions),
// replayable so finite differences see a fixed sparsity pattern.
struct BlockTrace {
  CandidateSet candidates;
  Tensor decisions;
};

using ForwardTrace = std::vector<std::vector<BlockTrace>>;  // [scale][block]

struct BlockContext {
  const ModelConfig& cfg;
  const Var& f_ref;   // plain reference features at this scale
  const Var& pos;     // positional embedding at this scale
  const Var& s_tgt;   // target semantic map resized to this scale
  const BlockTrace* replay = nullptr;
};

namespace detail {

inline BlockOutput finish_block(const Var& f_prev, std::optional<SparseAttentionMap> attn, const BlockContext& ctx,
                                const BlockWeights& w) {
  if (attn && w.prune) {
    prune_map(*attn, f_prev, ctx.f_ref, *w.prune, ctx.replay ? &ctx.replay->decisions : nullptr);
  }
  Var agg = aggregate_features(f_prev, ctx.f_ref, attn ? &*attn : nullptr, ctx.s_tgt, w.eta ? &*w.eta : nullptr,
                               w.spade, w.norm);
  return {ffn_residual(agg, w.ffn), std::move(attn), w.kind};
}

}  // namespace detail

inline BlockOutput dense_block_forward(const Var& f_prev, const BlockContext& ctx, const BlockWeights& w) {
  auto m = dense_attention(attach_position(f_prev, ctx.pos), attach_position(ctx.f_ref, ctx.pos), *w.attn, ctx.cfg.tau);
  return detail::finish_block(f_prev, std::move(m), ctx, w);
}

// `prev` is the coarser scale's final map for inter blocks, the previous block's map for inner ones.
inline BlockOutput dynast_block_forward(const Var& f_prev, const BlockContext& ctx, const BlockWeights& w,
                                        const SparseAttentionMap& prev) {
  const GridDims g = grid_of(f_prev.shape());
  const auto k = static_cast<std::size_t>(ctx.cfg.k);
  CandidateSet cs;
  if (ctx.replay) {
    cs = ctx.replay->candidates;
  } else if (w.kind == BlockKind::inter) {
    cs = inherit_candidates_interscale(prev, k, g, ctx.cfg.topk_from_pruned);
  } else {
    cs = propagate_candidates_innerscale(prev, k, ctx.cfg.topk_from_pruned);
  }
  auto m = sparse_attention(attach_position(f_prev, ctx.pos), attach_position(ctx.f_ref, ctx.pos), std::move(cs),
                            *w.attn, ctx.cfg.tau);
  return detail::finish_block(f_prev, std::move(m), ctx, w);
}

inline BlockOutput spade_block_forward(const Var& f_prev, const BlockContext& ctx, const BlockWeights& w) {
  return detail::finish_block(f_prev, std::nullopt, ctx, w);
}

// Upsample every scale's final features to the finest grid, concatenate,
// conv3 -> leaky_relu -> conv3 -> tanh, then map [-1, 1] to [0, 1].
inline Var decode(const std::vector<Var>& finals, const ModelConfig& cfg, const DecoderWeights& w) {
  const auto r = static_cast<std::size_t>(cfg.finest_resolution());
  std::vector<Var> parts;
  for (const Var& f : finals) parts.push_back(bilinear_resize(f, r, r));
  Var x = parts.size() == 1 ? parts[0] : concat_channels(std::span<const Var>(parts));
  Var y = tanh(w.conv2(leaky_relu(w.conv1(x), kLeakySlope)));
  return scale(add_scalar(y, 1.0), 0.5);
}

struct ModelOutput {
  Var image;                                     // [image_channels, H, W] in [0, 1]
  std::vector<std::vector<BlockOutput>> blocks;  // [scale][block]
  MultiScaleFeatures features;
};

inline void check_inputs(const Var& s_tgt, const Var& s_ref, const Var& i_ref, const ModelConfig& cfg) {
  cfg.validate();
  const auto r = static_cast<std::size_t>(cfg.finest_resolution());
  const Shape sem{static_cast<std::size_t>(cfg.semantic_channels), r, r};
  const Shape img{static_cast<std::size_t>(cfg.image_channels), r, r};
  if (s_tgt.shape() != sem || s_ref.shape() != sem || i_ref.shape() != img) {
    throw ShapeError("model_forward: inputs " + shape_str(s_tgt.shape()) + ", " + shape_str(s_ref.shape()) + ", " +
                     shape_str(i_ref.shape()) + " do not match " + shape_str(sem) + " / " + shape_str(img));
  }
}

inline ModelOutput model_forward(const Var& s_tgt, const Var& s_ref, const Var& i_ref, const ModelConfig& cfg,
                                 const ModelWeights& w, const ForwardTrace* replay = nullptr,
                                 ForwardTrace* record = nullptr) {
  check_inputs(s_tgt, s_ref, i_ref, cfg);
  const auto M = static_cast<std::size_t>(cfg.scales);
  if (replay && replay->size() != M) throw ConfigError("model_forward: replay trace has the wrong number of scales");
  ModelOutput out;
  out.features = embed_multiscale(s_tgt, s_ref, i_ref, cfg, w.embed);
  out.blocks.resize(M);
  if (record) record->assign(M, {});
  for (int i = cfg.scales - 1; i >= 0; --i) {
    const auto si = static_cast<std::size_t>(i);
    const auto r = static_cast<std::size_t>(cfg.res(i));
    const Var s_i = bilinear_resize(s_tgt, r, r);
    const ScaleWeights& sw = w.scales[si];
    Var f = out.features.tgt[si];
    if (sw.handoff) f = add(f, (*sw.handoff)(bilinear_resize(out.blocks[si + 1].back().features, r, r)));
    if (replay && (*replay)[si].size() != sw.blocks.size()) {
      throw ConfigError("model_forward: replay trace has the wrong number of blocks at scale " + std::to_string(i));
    }
    for (std::size_t j = 0; j < sw.blocks.size(); ++j) {
      const BlockWeights& bw = sw.blocks[j];
      BlockContext ctx{cfg, out.features.ref[si], out.features.pos[si], s_i, replay ? &(*replay)[si][j] : nullptr};
      BlockOutput b;
      switch (bw.kind) {
        case BlockKind::dense: b = dense_block_forward(f, ctx, bw); break;
        case BlockKind::spade_only: b = spade_block_forward(f, ctx, bw); break;
        case BlockKind::inter: b = dynast_block_forward(f, ctx, bw, *out.blocks[si + 1].back().attn); break;
        case BlockKind::inner: b = dynast_block_forward(f, ctx, bw, *out.blocks[si].back().attn); break;
      }
      if (record) {
        (*record)[si].push_back(b.attn ? BlockTrace{b.attn->candidates, b.attn->decisions} : BlockTrace{});
      }
      f = b.features;
      out.blocks[si].push_back(std::move(b));
    }
  }
  std::vector<Var> finals;
  for (const auto& blocks : out.blocks) finals.push_back(blocks.back().features);
  out.image = decode(finals, cfg, w.decoder);
  return out;
}

// Parameters plus the bound weight structure.
struct Model {
  ModelConfig cfg;
  ParameterStore store;
  ModelWeights weights;

  static Model create(const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    m.cfg = cfg;
    Rng rng(seed);
    m.weights = build_model_weights(cfg, ParamBuilder::create(m.store, rng));
    return m;
  }

  // Rebinds weights to an existing store (e.g. loaded from a checkpoint).
  static Model bind(const ModelConfig& cfg, ParameterStore store) {
    Model m;
    m.cfg = cfg;
    m.store = std::move(store);
    m.weights = build_model_weights(cfg, ParamBuilder::bind(m.store));
    return m;
  }

  Model clone() const { return bind(cfg, store.clone()); }

  ModelOutput forward(const Var& s_tgt, const Var& s_ref, const Var& i_ref, const ForwardTrace* replay = nullptr,
                      ForwardTrace* record = nullptr) const {
    return model_forward(s_tgt, s_ref, i_ref, cfg, weights, replay, record);
  }
};

}  // namespace dynast
