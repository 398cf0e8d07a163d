#include <gtest/gtest.h>

#include "dynast/config.hpp"
#include "dynast/embedding.hpp"
#include "test_util.hpp"

namespace dynast {
namespace {

using testing::random_tensor;

TEST(Config, DeskDefaults) {
  const ModelConfig c = ModelConfig::desk();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.res(0), 32);
  EXPECT_EQ(c.res(2), 8);
  EXPECT_EQ(c.width(0), 32);
  EXPECT_EQ(c.width(2), 64);
  EXPECT_EQ(c.blocks_at(2), 2);
  EXPECT_EQ(c.blocks_at(0), 2);
}

TEST(Config, PaperDefaultsAreStorable) {
  const ModelConfig c = ModelConfig::paper();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.scales, 4);
  EXPECT_EQ(c.res(3), 32);
  EXPECT_EQ(c.res(0), 256);
  EXPECT_EQ(c.width(3), 512);
  EXPECT_EQ(c.width(0), 64);
  EXPECT_EQ(c.k, 4);
  EXPECT_DOUBLE_EQ(c.tau, 100.0);
  EXPECT_DOUBLE_EQ(c.lambda_m, 100.0);
  EXPECT_DOUBLE_EQ(c.lambda_adv, 10.0);
  EXPECT_DOUBLE_EQ(c.lambda_s, 3.0);
}

TEST(Config, ParseAndRoundTrip) {
  Config c = parse_config("k = 2  # fewer\ndisable_pruning = true\nresolutions = 4, 8\nchannels = 8,6\nscales=2\n");
  EXPECT_EQ(c.model.k, 2);
  EXPECT_TRUE(c.model.disable_pruning);
  EXPECT_EQ(c.model.res(0), 8);
  Config again = parse_config(config_to_text(c));
  EXPECT_EQ(config_to_text(again), config_to_text(c));
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("k\n"), ConfigError);
  EXPECT_THROW(parse_config("k = two\n"), ConfigError);
  EXPECT_THROW(parse_config("resolutions = 8, 24, 32\n"), ConfigError);
  EXPECT_THROW(parse_config("scales = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("batch = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("max_matching_resolution = 4\n"), ConfigError);
}

TEST(PatchEmbed, IdentityWeightGivesRasterPatch) {
  Tensor w({4, 1, 2, 2});
  for (std::size_t o = 0; o < 4; ++o) w[o * 4 + o] = 1.0;
  Conv conv{Var::constant(w), Var::constant(Tensor({4})), 2, 0};
  Var img = Var::constant(Tensor({1, 2, 2}, {0.1, 0.2, 0.3, 0.4}));
  Var out = patch_embed(img, 2, conv);
  ASSERT_EQ(out.shape(), (Shape{4, 1, 1}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.value()[i], 0.1 * static_cast<double>(i + 1));
}

TEST(PatchEmbed, ZeroWeights) {
  Conv conv{Var::constant(Tensor({3, 2, 2, 2})), Var::constant(Tensor({3})), 2, 0};
  Rng rng(1);
  Var out = patch_embed(Var::constant(random_tensor({2, 4, 4}, rng)), 2, conv);
  for (double v : out.value().span()) EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, AveragingRowGivesPatchMeans) {
  Conv conv{Var::constant(Tensor({1, 1, 2, 2}, 0.25)), Var::constant(Tensor({1})), 2, 0};
  Tensor ramp({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  Var out = patch_embed(Var::constant(ramp), 2, conv);
  // block means of 0..15 laid out 4x4
  EXPECT_DOUBLE_EQ(out.value()[0], 2.5);
  EXPECT_DOUBLE_EQ(out.value()[1], 4.5);
  EXPECT_DOUBLE_EQ(out.value()[2], 10.5);
  EXPECT_DOUBLE_EQ(out.value()[3], 12.5);
}

TEST(PatchEmbed, IndivisibleNamesScale) {
  Conv conv{Var::constant(Tensor({1, 1, 4, 4})), Var::constant(Tensor({1})), 4, 0};
  try {
    patch_embed(Var::constant(Tensor({1, 6, 6})), 4, conv, 2);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("scale 2"), std::string::npos);
  }
}

struct Built {
  ParameterStore store;
  EmbeddingWeights w;
};

Built build(const ModelConfig& cfg, std::uint64_t seed = 0) {
  Built b;
  Rng rng(seed);
  b.w = build_embedding_weights(cfg, ParamBuilder::create(b.store, rng));
  return b;
}

struct Inputs {
  Var s_tgt, s_ref, i_ref;
};

Inputs random_inputs(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const auto r = static_cast<std::size_t>(cfg.finest_resolution());
  return {Var::constant(random_tensor({1, r, r}, rng, 0, 1)), Var::constant(random_tensor({1, r, r}, rng, 0, 1)),
          Var::constant(random_tensor({3, r, r}, rng, 0, 1))};
}

TEST(EmbedMultiscale, DeskShapes) {
  const ModelConfig cfg = ModelConfig::desk();
  Built b = build(cfg);
  Inputs in = random_inputs(cfg, 3);
  MultiScaleFeatures f = embed_multiscale(in.s_tgt, in.s_ref, in.i_ref, cfg, b.w);
  ASSERT_EQ(f.tgt.size(), 3u);
  EXPECT_EQ(f.tgt[2].shape(), (Shape{64, 8, 8}));
  EXPECT_EQ(f.tgt[1].shape(), (Shape{48, 16, 16}));
  EXPECT_EQ(f.tgt[0].shape(), (Shape{32, 32, 32}));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(f.ref[static_cast<std::size_t>(i)].shape(), f.tgt[static_cast<std::size_t>(i)].shape());
  EXPECT_EQ(f.pos[2].shape(), (Shape{16, 8, 8}));
  EXPECT_EQ(f.pos[1].shape(), (Shape{16, 16, 16}));
  EXPECT_EQ(f.pos[0].shape(), (Shape{16, 32, 32}));
  EXPECT_EQ(attach_position(f.tgt[1], f.pos[1]).shape(), (Shape{64, 16, 16}));
}

TEST(EmbedMultiscale, SingleScaleIsMlpOfPatchEmbedding) {
  ModelConfig cfg;
  cfg.scales = 1;
  cfg.resolutions = {4};
  cfg.channels = {5};
  cfg.validate();
  Built b = build(cfg);
  Inputs in = random_inputs(cfg, 4);
  MultiScaleFeatures f = embed_multiscale(in.s_tgt, in.s_ref, in.i_ref, cfg, b.w);
  Var direct = b.w.mix_tgt[0](patch_embed(in.s_tgt, 1, b.w.patch_tgt[0]));
  EXPECT_EQ(f.tgt[0].value(), direct.value());
  ASSERT_EQ(f.pos.size(), 1u);
  EXPECT_EQ(f.pos[0].value(), b.store.get("embed.pos").value());
}

TEST(EmbedMultiscale, ZeroInputsAndBiasesGiveZeroFeatures) {
  const ModelConfig cfg = ModelConfig::tiny();
  Built b = build(cfg);
  for (const auto& p : b.store) {
    if (p.name.ends_with(".bias")) p.var.mutable_value().fill(0.0);
  }
  const auto r = static_cast<std::size_t>(cfg.finest_resolution());
  Var z1 = Var::constant(Tensor({1, r, r})), z3 = Var::constant(Tensor({3, r, r}));
  MultiScaleFeatures f = embed_multiscale(z1, z1, z3, cfg, b.w);
  for (const auto& v : f.tgt) EXPECT_EQ(max_abs(v.value()), 0.0);
  for (const auto& v : f.ref) EXPECT_EQ(max_abs(v.value()), 0.0);
}

TEST(EmbedMultiscale, RejectsWrongResolution) {
  const ModelConfig cfg = ModelConfig::tiny();
  Built b = build(cfg);
  Var bad = Var::constant(Tensor({1, 6, 6}));
  Var ok3 = Var::constant(Tensor({3, 8, 8}));
  EXPECT_THROW(embed_multiscale(bad, bad, ok3, cfg, b.w), ShapeError);
}

TEST(EmbedMultiscale, LiteralRangeDropsFinestEmbedding) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.literal_scale_range = true;
  Built b = build(cfg);
  EXPECT_EQ(b.store.get("embed.x0.conv1.weight").shape()[1], static_cast<std::size_t>(cfg.embed_channels));
  Inputs in = random_inputs(cfg, 5);
  MultiScaleFeatures f = embed_multiscale(in.s_tgt, in.s_ref, in.i_ref, cfg, b.w);
  EXPECT_EQ(f.tgt[0].shape(), (Shape{6, 8, 8}));
}

TEST(PositionEmbedding, ZeroConvGivesConstantMaps) {
  const ModelConfig cfg = ModelConfig::tiny();
  Built b = build(cfg);
  b.store.get("embed.pos_up0.weight").mutable_value().fill(0.0);
  b.store.get("embed.pos_up0.bias").mutable_value() = Tensor({3}, {0.5, -1.0, 0.0});
  auto pos = build_position_embeddings(cfg, b.w);
  ASSERT_EQ(pos.size(), 2u);
  EXPECT_EQ(pos[0].shape(), (Shape{3, 8, 8}));
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_DOUBLE_EQ(pos[0].value()[i], 0.5);
    EXPECT_DOUBLE_EQ(pos[0].value()[64 + i], -0.2);
    EXPECT_DOUBLE_EQ(pos[0].value()[128 + i], 0.0);
  }
}

TEST(AttachPosition, ConcatenatesChannels) {
  Var f = Var::constant(Tensor({2, 1, 1}, {1.0, 2.0}));
  Var p = Var::constant(Tensor({1, 1, 1}, {3.0}));
  EXPECT_EQ(attach_position(f, p).value(), Tensor({3, 1, 1}, {1.0, 2.0, 3.0}));
  EXPECT_THROW(attach_position(f, Var::constant(Tensor({1, 2, 1}))), ShapeError);
}

TEST(EmbedMultiscale, Reproducible) {
  const ModelConfig cfg = ModelConfig::tiny();
  Built a = build(cfg, 7), b = build(cfg, 7);
  Inputs in = random_inputs(cfg, 8);
  auto fa = embed_multiscale(in.s_tgt, in.s_ref, in.i_ref, cfg, a.w);
  auto fb = embed_multiscale(in.s_tgt, in.s_ref, in.i_ref, cfg, b.w);
  for (std::size_t i = 0; i < fa.tgt.size(); ++i) {
    EXPECT_EQ(fa.tgt[i].value(), fb.tgt[i].value());
    EXPECT_EQ(fa.ref[i].value(), fb.ref[i].value());
  }
}

TEST(EmbedMultiscale, EveryParameterReceivesGradient) {
  const ModelConfig cfg = ModelConfig::tiny();
  Built b = build(cfg);
  Inputs in = random_inputs(cfg, 9);
  auto f = embed_multiscale(in.s_tgt, in.s_ref, in.i_ref, cfg, b.w);
  std::vector<Var> terms;
  for (std::size_t i = 0; i < f.tgt.size(); ++i) {
    terms.push_back(testing::probe(f.tgt[i], 10 + i));
    terms.push_back(testing::probe(f.ref[i], 20 + i));
    terms.push_back(testing::probe(f.pos[i], 30 + i));
  }
  backward(add_all(terms));
  for (const auto& p : b.store) {
    ASSERT_TRUE(p.var.has_grad()) << p.name;
    EXPECT_GT(max_abs(p.var.grad()), 0.0) << p.name;
  }
}

TEST(EmbedMultiscale, GradientsMatchFiniteDifferences) {
  const ModelConfig cfg = ModelConfig::tiny();
  Built b = build(cfg);
  Inputs in = random_inputs(cfg, 11);
  std::vector<std::pair<std::string, Var>> leaves;
  for (const auto& p : b.store) leaves.emplace_back(p.name, p.var);
  testing::expect_gradients_match(leaves, [&] {
    auto f = embed_multiscale(in.s_tgt, in.s_ref, in.i_ref, cfg, b.w);
    return add(add(testing::probe(f.tgt[0], 1), testing::probe(f.ref[1], 2)), testing::probe(f.pos[0], 3));
  });
}

}  // namespace
}  // namespace dynast
