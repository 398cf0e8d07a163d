#include <gtest/gtest.h>

#include <cmath>

#include "dynast/losses.hpp"
#include "test_util.hpp"

namespace dynast {
namespace {

using testing::expect_gradients_match;
using testing::probe;
using testing::random_tensor;

CandidateSet random_candidates(std::size_t nq, std::size_t cap, std::size_t nr, Rng& rng) {
  CandidateSet cs(nq, cap, nr);
  for (std::size_t q = 0; q < nq; ++q) {
    const std::size_t want = 1 + rng.below(std::min(cap, nr));
    while (cs.count(q) < want) cs.push(q, rng.below(nr));
  }
  return cs;
}

// Dense [1, n] map over a 1 x n reference grid.
SparseAttentionMap row_map(const Tensor& c, const Tensor& d) {
  SparseAttentionMap m;
  const std::size_t n = c.size();
  m.candidates = CandidateSet::full(1, n);
  m.query_dims = {1, 1};
  m.ref_dims = {1, n};
  m.correlation = Var::constant(c.reshaped({1, n}));
  m.gate = Var::constant(d.reshaped({1, n}));
  return m;
}

TEST(WarpMatrix, UniformWhenScoresEqual) {
  Var w = warp_matrix(row_map(Tensor({4}), Tensor({4}, 1.0)));
  for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(w.value()[s], 1.0 / (4.0 + kWarpEps));
}

TEST(WarpMatrix, FullyPrunedRowIsZero) {
  Rng rng(1);
  Var c = Var::leaf(random_tensor({1, 5}, rng));
  Var w = warp_matrix(c, Var::constant(Tensor({1, 5})), CandidateSet::full(1, 5));
  EXPECT_EQ(max_abs(w.value()), 0.0);
  backward(probe(w));
  EXPECT_TRUE(c.grad().all_finite());
  EXPECT_EQ(max_abs(c.grad()), 0.0);
}

TEST(WarpMatrix, AllOnesMatchesSoftmax) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Var c = Var::constant(random_tensor({6, 7}, rng, -30.0, 30.0));
    Var w = warp_matrix(c, Var::constant(Tensor({6, 7}, 1.0)), CandidateSet::full(6, 7));
    const Tensor sm = softmax_rows(c).probs.value();
    for (std::size_t i = 0; i < sm.size(); ++i) {
      // eps / partition <= 1e-8 relative, plus a few ulps of rounding
      EXPECT_LE(std::abs(w.value()[i] - sm[i]), (1e-8 + 1e-15) * sm[i]);
    }
  }
}

TEST(WarpMatrix, RowsAreSubStochastic) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    CandidateSet cs = random_candidates(5, 6, 9, rng);
    Tensor c = random_tensor({5, 6}, rng, -50.0, 50.0);
    Tensor d({5, 6});
    for (std::size_t q = 0; q < 5; ++q)
      for (std::size_t s = 0; s < cs.count(q); ++s) d[q * 6 + s] = rng.below(3) ? 1.0 : 0.0;
    Var w = warp_matrix(Var::constant(c), Var::constant(d), cs);
    for (std::size_t q = 0; q < 5; ++q) {
      double sum = 0.0;
      for (std::size_t s = 0; s < 6; ++s) {
        const double v = w.value()[q * 6 + s];
        EXPECT_GE(v, 0.0);
        if (s >= cs.count(q) || d[q * 6 + s] == 0.0) EXPECT_EQ(v, 0.0);
        sum += v;
      }
      EXPECT_LT(sum, 1.0);
    }
  }
}

TEST(WarpMatrix, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  CandidateSet cs = random_candidates(4, 5, 7, rng);
  Tensor dv({4, 5}), ones({4, 5});
  for (std::size_t q = 0; q < 4; ++q) {
    for (std::size_t s = 0; s < cs.count(q); ++s) {
      dv[q * 5 + s] = rng.uniform(0.5, 1.5);
      ones[q * 5 + s] = 1.0;
    }
  }
  Var c = Var::leaf(random_tensor({4, 5}, rng, -2.0, 2.0));
  Var d = Var::leaf(dv);
  const Tensor base = warp_matrix(c, d, cs).value();
  expect_gradients_match({{"C", c}}, [&] { return testing::centered_probe(warp_matrix(c, d, cs), base); }, 1e-4, 1e-3);
  // The gate surrogate is the true derivative when every valid slot is kept.
  // A single-slot query has dW/dD = eps / (D + eps)^2 ~ 1e-8; the wider step
  // keeps its difference quotient above cancellation noise.
  Var full = Var::leaf(ones);
  const Tensor base1 = warp_matrix(c, full, cs).value();
  expect_gradients_match({{"D", full}}, [&] { return testing::centered_probe(warp_matrix(c, full, cs), base1); }, 1e-4,
                         1e-3);
}

// Partially and fully gated rows: dL/dD_s = A_s (g_s - sum_t g_t W_t), with A
// the unpruned softmax, so the value stays bounded however little mass is kept.
TEST(WarpMatrix, GateSurrogateIsBounded) {
  const CandidateSet cs = CandidateSet::full(2, 3);
  Var c = Var::constant(Tensor({2, 3}, {0.0, -5.0, -1.0, 0.5, 0.0, -0.5}));
  Var d = Var::leaf(Tensor({2, 3}, {0.0, 1.0, 0.0, 0.0, 0.0, 0.0}));
  const Tensor g({2, 3}, {0.3, -0.2, 0.7, -1.0, 0.4, 0.25});
  Var w = warp_matrix(c, d, cs);
  backward(sum(mul(w, Var::constant(g))));
  for (std::size_t q = 0; q < 2; ++q) {
    double za = 0.0, gw = 0.0;
    for (std::size_t s = 0; s < 3; ++s) {
      za += std::exp(c.value()[q * 3 + s] - c.value()[q * 3]);
      gw += g[q * 3 + s] * w.value()[q * 3 + s];
    }
    for (std::size_t s = 0; s < 3; ++s) {
      const double a = std::exp(c.value()[q * 3 + s] - c.value()[q * 3]) / (za + kWarpEps);
      EXPECT_NEAR(d.grad()[q * 3 + s], a * (g[q * 3 + s] - gw), 1e-12) << q << "," << s;
      EXPECT_LE(std::abs(d.grad()[q * 3 + s]), 2.0);
    }
  }
  // The kept slot of row 0 sits 5 below the row max: W there is ~1, and the
  // exact derivative for the pruned max slot would be ~e^5.
  EXPECT_NEAR(w.value()[1], 1.0, 1e-5);
  // A fully gated row still pushes its helpful slots open.
  EXPECT_LT(d.grad()[3], 0.0);
}

// With a tiny partition the eps term matters; the arg-max correction keeps the
// gradient exact.
TEST(WarpMatrix, GradientExactWhenEpsDominates) {
  Var c = Var::leaf(Tensor({1, 3}, {0.0, -1.0, -2.0}));
  Var d = Var::leaf(Tensor({1, 3}, {1e-8, 2e-8, 1e-8}));
  expect_gradients_match({{"C", c}}, [&] { return probe(warp_matrix(c, d, CandidateSet::full(1, 3))); }, 1e-4, 1e-6);
}

TEST(WarpReference, IdentityWarpReproducesReference) {
  Rng rng(5);
  const Tensor ref = random_tensor({3, 2, 3}, rng, 0, 1);
  SparseAttentionMap m;
  m.query_dims = m.ref_dims = {2, 3};
  m.candidates = CandidateSet(6, 1, 6);
  for (Index q = 0; q < 6; ++q) m.candidates.push(q, q);
  Var out = warp_reference(Var::constant(Tensor({6, 1}, 1.0)), Var::constant(ref), m);
  EXPECT_EQ(out.value(), ref);
}

TEST(WarpReference, ZeroRowGivesBlackAndUniformRowGivesMean) {
  const Tensor ref({1, 2, 2}, {0.1, 0.2, 0.3, 0.8});
  SparseAttentionMap m;
  m.query_dims = {1, 2};
  m.ref_dims = {2, 2};
  m.candidates = CandidateSet::full(2, 4);
  Tensor w({2, 4});
  for (std::size_t s = 0; s < 4; ++s) w[4 + s] = 0.25;
  Var out = warp_reference(Var::constant(w), Var::constant(ref), m);
  EXPECT_EQ(out.value()[0], 0.0);
  EXPECT_NEAR(out.value()[1], 0.35, 1e-15);
}

TEST(WarpReference, StaysInsideUnitRange) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    SparseAttentionMap m;
    m.query_dims = {3, 3};
    m.ref_dims = {3, 3};
    m.candidates = random_candidates(9, 4, 9, rng);
    m.correlation = Var::constant(random_tensor({9, 4}, rng, -5, 5));
    Tensor d({9, 4});
    for (std::size_t q = 0; q < 9; ++q)
      for (std::size_t s = 0; s < m.candidates.count(q); ++s) d[q * 4 + s] = rng.below(2);
    m.gate = Var::constant(d);
    Var out = warp_reference(warp_matrix(m), Var::constant(random_tensor({3, 3, 3}, rng, 0, 1)), m);
    for (double v : out.value().span()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

struct TinyRun {
  ModelConfig cfg = ModelConfig::tiny();
  Model model = Model::create(cfg, 3);
  Tensor s_tgt, s_ref, i_ref, i_tgt;

  explicit TinyRun(std::uint64_t seed) {
    Rng rng(seed);
    const auto r = static_cast<std::size_t>(cfg.finest_resolution());
    s_tgt = random_tensor({1, r, r}, rng, 0, 1);
    s_ref = random_tensor({1, r, r}, rng, 0, 1);
    i_ref = random_tensor({3, r, r}, rng, 0, 1);
    i_tgt = random_tensor({3, r, r}, rng, 0, 1);
  }

  ModelOutput forward(const ForwardTrace* replay = nullptr, ForwardTrace* record = nullptr) {
    return model.forward(Var::constant(s_tgt), Var::constant(s_ref), Var::constant(i_ref), replay, record);
  }
};

std::size_t matching_blocks(const ModelOutput& out) {
  std::size_t n = 0;
  for (const auto& sb : out.blocks)
    for (const auto& b : sb) n += b.attn.has_value();
  return n;
}

TEST(MatchingLoss, FullyPrunedBlocksCostOnePerBlock) {
  TinyRun run(7);
  ModelOutput out = run.forward();
  for (auto& sb : out.blocks)
    for (auto& b : sb)
      if (b.attn) b.attn->gate = Var::constant(Tensor(b.attn->correlation.shape()));
  const MatchingLoss ml = matching_loss(out, run.i_ref, Tensor(run.i_tgt.shape(), 1.0));
  EXPECT_EQ(ml.total.value()[0], static_cast<double>(matching_blocks(out)));
  EXPECT_EQ(ml.per_scale.size(), static_cast<std::size_t>(run.cfg.scales));
}

TEST(MatchingLoss, IdentityWarpsAreFree) {
  TinyRun run(8);
  ModelOutput out = run.forward();
  for (auto& sb : out.blocks) {
    for (auto& b : sb) {
      if (!b.attn) continue;
      SparseAttentionMap& m = *b.attn;
      const std::size_t n = m.queries();
      m.candidates = CandidateSet(n, 1, n);
      for (Index q = 0; q < n; ++q) m.candidates.push(q, q);
      m.correlation = Var::constant(Tensor({n, 1}));
      m.gate = Var::constant(Tensor({n, 1}, 1.0));
    }
  }
  EXPECT_LT(matching_loss(out, run.i_ref, run.i_ref).total.value()[0], 1e-15);
}

TEST(MatchingLoss, RequiresGroundTruth) {
  TinyRun run(9);
  EXPECT_THROW(matching_loss(run.forward(), run.i_ref, Tensor()), ConfigError);
}

TEST(MatchingLoss, SkipsSpadeOnlyScales) {
  TinyRun run(10);
  run.cfg.max_matching_resolution = 4;
  run.model = Model::create(run.cfg, 3);
  ModelOutput out = run.forward();
  const MatchingLoss ml = matching_loss(out, run.i_ref, run.i_tgt);
  EXPECT_EQ(ml.per_scale[0].value()[0], 0.0);
  EXPECT_GT(ml.per_scale[1].value()[0], 0.0);
}

TEST(MatchingLoss, GradientsMatchWithFrozenDecisions) {
  TinyRun run(11);
  ForwardTrace trace;
  run.forward(nullptr, &trace);
  std::vector<std::pair<std::string, Var>> leaves;
  for (const auto& p : run.model.store) {
    if (p.name.ends_with("alpha.weight") || p.name.ends_with("beta.weight") || p.name.starts_with("embed.x")) {
      leaves.emplace_back(p.name, p.var);
    }
  }
  expect_gradients_match(leaves, [&] { return matching_loss(run.forward(&trace), run.i_ref, run.i_tgt).total; });
}

// dL/dP must equal sigmoid'(P) * dL/dD for every gated block.
TEST(MatchingLoss, PruneHeadsFollowTheSurrogate) {
  TinyRun run(12);
  ModelOutput out = run.forward();
  backward(matching_loss(out, run.i_ref, run.i_tgt).total);
  std::size_t gated = 0;
  for (const auto& sb : out.blocks) {
    for (const auto& b : sb) {
      if (!b.attn || !b.attn->prune_logits) continue;
      ++gated;
      const Tensor want = prune_backward(b.attn->prune_logits.value(), b.attn->gate.grad());
      EXPECT_LE(max_abs_diff(b.attn->prune_logits.grad(), want), 1e-14);
    }
  }
  EXPECT_GT(gated, 0u);
  double omega = 0.0, phi = 0.0;
  for (const auto& p : run.model.store) {
    if (!p.var.has_grad()) continue;
    if (p.name.find("prune.omega") != std::string::npos) omega += max_abs(p.var.grad());
    if (p.name.find("prune.phi") != std::string::npos) phi += max_abs(p.var.grad());
  }
  EXPECT_GT(omega, 0.0);
  EXPECT_GT(phi, 0.0);
}

TEST(FeatureExtractor, DeterministicFrozenPyramid) {
  const FeatureExtractor a = FeatureExtractor::create(), b = FeatureExtractor::create();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.stages[i].weight.value(), b.stages[i].weight.value());
    EXPECT_FALSE(a.stages[i].weight.requires_grad());
  }
  Rng rng(13);
  const auto t = a.taps(Var::constant(random_tensor({3, 32, 32}, rng, 0, 1)));
  EXPECT_EQ(t[0].shape(), (Shape{16, 32, 32}));
  EXPECT_EQ(t[1].shape(), (Shape{32, 16, 16}));
  EXPECT_EQ(t[2].shape(), (Shape{48, 8, 8}));
  EXPECT_EQ(t[3].shape(), (Shape{64, 4, 4}));
  EXPECT_NE(FeatureExtractor::create(3, 1).stages[0].weight.value(), a.stages[0].weight.value());
}

TEST(SupervisedLoss, FixedPointsAndPlainMse) {
  Rng rng(14);
  const FeatureExtractor fx = FeatureExtractor::create();
  const Tensor target = random_tensor({3, 8, 8}, rng, 0, 1);
  const Var s = Var::constant(random_tensor({1, 8, 8}, rng, 0, 1));
  const std::vector<double> lambdas{0.25, 0.125, 0.0625, 0.03125};
  EXPECT_EQ(supervised_task_loss(Var::constant(target), target, s, taps_of(fx), lambdas).total.value()[0], 0.0);

  Var out = Var::constant(random_tensor({3, 8, 8}, rng, 0, 1));
  TaskLoss plain = supervised_task_loss(out, target, s, taps_of(fx), {0, 0, 0, 0});
  EXPECT_EQ(plain.total.value()[0], mse(out, Var::constant(target)).value()[0]);
  TaskLoss full = supervised_task_loss(out, target, s, taps_of(fx), lambdas);
  for (const auto& p : full.perceptual) EXPECT_GT(p.value()[0], 0.0);
  EXPECT_GT(full.total.value()[0], plain.total.value()[0]);
}

TEST(SupervisedLoss, ExternalTapsAreUsed) {
  Rng rng(15);
  const Tensor target = random_tensor({3, 4, 4}, rng, 0, 1);
  // Taps equal to the image itself: each perceptual term is the pixel MSE.
  TapFunction identity = [](const Var& x) { return std::array<Var, 4>{x, x, x, x}; };
  Var out = Var::constant(random_tensor({3, 4, 4}, rng, 0, 1));
  TaskLoss tl = supervised_task_loss(out, target, Var::constant(Tensor({1, 4, 4})), identity, {1, 1, 1, 1});
  EXPECT_NEAR(tl.total.value()[0], 5.0 * tl.pixel.value()[0], 1e-15);
}

TEST(SupervisedLoss, GradientsMatchFiniteDifferences) {
  Rng rng(16);
  const FeatureExtractor fx = FeatureExtractor::create();
  ParameterStore store;
  const PatchDiscriminator disc = PatchDiscriminator::build(ParamBuilder::create(store, rng), 4);
  const Tensor target = random_tensor({3, 8, 8}, rng, 0, 1);
  const Var s = Var::constant(random_tensor({1, 8, 8}, rng, 0, 1));
  Var out = Var::leaf(random_tensor({3, 8, 8}, rng, 0, 1));
  expect_gradients_match({{"image", out}}, [&] {
    return supervised_task_loss(out, target, s, taps_of(fx), {0.25, 0.125, 0.0625, 0.03125}, 10.0, &disc).total;
  });
}

TEST(Adversarial, NonSaturatingForms) {
  const Var logits = Var::constant(Tensor({1, 1, 2}, {0.0, 0.0}));
  EXPECT_NEAR(generator_adversarial_loss(logits).value()[0], std::log(2.0), 1e-15);
  EXPECT_NEAR(discriminator_loss(logits, logits).value()[0], 2.0 * std::log(2.0), 1e-15);
  const Var confident = Var::constant(Tensor({1, 1, 1}, {40.0}));
  EXPECT_LT(generator_adversarial_loss(confident).value()[0], 1e-17);
  Rng rng(17);
  ParameterStore store;
  const PatchDiscriminator disc = PatchDiscriminator::build(ParamBuilder::create(store, rng), 4);
  Var d = disc(Var::constant(random_tensor({1, 32, 32}, rng)), Var::constant(random_tensor({3, 32, 32}, rng)));
  EXPECT_EQ(d.shape(), (Shape{1, 8, 8}));
  EXPECT_EQ(store.size(), 6u);
}

TEST(StyleLoss, FixedPoints) {
  Rng rng(18);
  const FeatureExtractor fx = FeatureExtractor::create();
  const Tensor c = random_tensor({3, 16, 16}, rng, 0, 1), s = random_tensor({3, 16, 16}, rng, 0, 1);
  EXPECT_EQ(style_task_loss(Var::constant(c), c, c, taps_of(fx), 3.0).total.value()[0], 0.0);
  StyleLoss same_style = style_task_loss(Var::constant(s), c, s, taps_of(fx), 3.0);
  EXPECT_EQ(same_style.style.value()[0], 0.0);
  EXPECT_EQ(same_style.total.value()[0], same_style.content.value()[0]);
  EXPECT_GT(same_style.content.value()[0], 0.0);
}

TEST(StyleLoss, ConstantChannelStatistics) {
  Var x = Var::constant(Tensor({2, 3, 3}, 0.7));
  EXPECT_NEAR(channel_mean(x).value()[1], 0.7, 1e-15);
  EXPECT_EQ(channel_std(x).value()[1], 0.0);
}

TEST(StyleLoss, GradientsMatchFiniteDifferences) {
  Rng rng(19);
  const FeatureExtractor fx = FeatureExtractor::create();
  const Tensor c = random_tensor({3, 16, 16}, rng, 0, 1), s = random_tensor({3, 16, 16}, rng, 0, 1);
  Var cs = Var::leaf(random_tensor({3, 16, 16}, rng, 0, 1));
  expect_gradients_match({{"I_cs", cs}}, [&] { return style_task_loss(cs, c, s, taps_of(fx), 3.0).total; });
}

TEST(TotalLoss, Combination) {
  const Var task = Var::constant(Tensor({1}, {1.0}));
  MatchingLoss ml{Var::constant(Tensor({1}, {2.0})), {Var::constant(Tensor({1}, {2.0}))}};
  EXPECT_EQ(total_loss(task, ml, 100.0).report.total, 201.0);
  EXPECT_EQ(total_loss(task, ml, 0.0).report.total, 1.0);
  EXPECT_EQ(total_loss(task, std::nullopt, 100.0).report.total, 1.0);
  Rng rng(20);
  for (int i = 0; i < 100; ++i) {
    const double t = rng.uniform(0, 3), m = rng.uniform(0, 3), lm = rng.uniform(0, 200);
    MatchingLoss mi{Var::constant(Tensor({1}, {m})), {}};
    const LossReport r = total_loss(Var::constant(Tensor({1}, {t})), mi, lm).report;
    EXPECT_EQ(r.total, r.task + lm * r.matching);
  }
}

TEST(LossReport, JsonLine) {
  LossReport r;
  r.total = 201.0;
  r.task = 1.0;
  r.matching = 2.0;
  r.matching_per_scale = {1.5, 0.5};
  r.pixel = 0.1;
  EXPECT_EQ(r.to_json(3).dump(),
            R"({"step":3,"total":201.0,"task":1.0,"matching":2.0,"matching_per_scale":[1.5,0.5],"pixel":0.1})");
}

}  // namespace
}  // namespace dynast
