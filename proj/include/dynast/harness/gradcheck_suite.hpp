#pragma once

// Registered finite-difference checks, grouped by scope:
//   op     every differentiable primitive on small random inputs
//   block  each block / stage of the tiny model with its own parameters
//   model  every parameter of the tiny model, prune decisions frozen
// The hard prune gate has no useful finite difference; its row checks that the
// straight-through surrogate is what reaches the prune logits.

#include <chrono>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dynast/losses.hpp"

namespace dynast {

enum class GradScope { op, block, model };

inline GradScope parse_grad_scope(const std::string& s) {
  if (s == "op") return GradScope::op;
  if (s == "block") return GradScope::block;
  if (s == "model") return GradScope::model;
  throw ConfigError("gradcheck: scope must be op, block or model, got '" + s + "'");
}

struct GradRow {
  std::string path;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double step = 1e-5;
  std::string note;

  bool passed(double tol = kGradCheckTolerance) const { return max_rel_error <= tol; }
};

struct GradSuiteResult {
  std::vector<GradRow> rows;
  double seconds = 0.0;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& r : rows) m = std::max(m, r.max_rel_error);
    return m;
  }
  bool passed(double tol = kGradCheckTolerance) const {
    return std::all_of(rows.begin(), rows.end(), [tol](const GradRow& r) { return r.passed(tol); });
  }
};

namespace gradsuite {

using Leaves = std::vector<std::pair<std::string, Var>>;

inline Tensor random(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), uninit);
  for (auto& v : t.span()) v = rng.uniform(lo, hi);
  return t;
}

// Weighted sum of (out - base) with fixed weights in [0.5, 1.5]. Centring on
// the unperturbed output keeps round-off in the differences small.
inline Var probe(const Var& out, const Tensor& base, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(sub(out, Var::constant(base)), Var::constant(random(out.shape(), rng, 0.5, 1.5))));
}

class Runner {
 public:
  explicit Runner(std::vector<GradRow>& rows) : rows_(rows) {}

  // `out` builds the checked output; every leaf gets one row `prefix/leaf`.
  void check(const std::string& prefix, const Leaves& leaves, const std::function<Var()>& out, double step = 1e-5,
             const std::string& note = "") {
    const Tensor base = out().value();
    const auto reports = check_gradients(leaves, [&] { return probe(out(), base); }, step);
    for (const auto& r : reports) {
      rows_.push_back({prefix.empty() ? r.name : prefix + "/" + r.name, r.elements, r.max_rel_error, step, note});
    }
  }

  // For leaves whose true gradient is exactly 0: the reference is that exact
  // value, and the finite difference (pure round-off) is only reported.
  void check_zero(const std::string& prefix, const Leaves& leaves, const std::function<Var()>& out,
                  const std::string& reason) {
    const Tensor base = out().value();
    for (const auto& [name, v] : leaves) v.zero_grad();
    backward(probe(out(), base));
    for (const auto& [name, leaf] : leaves) {
      const Tensor analytic = leaf.has_grad() ? leaf.grad() : Tensor(leaf.shape());
      Var target = leaf;
      const Tensor numeric = finite_difference_grad(
          [&](const Tensor& value) {
            Tensor saved = target.value();
            target.mutable_value() = value;
            const double f = probe(out(), base).item();
            target.mutable_value() = std::move(saved);
            return f;
          },
          leaf.value(), kZeroStep);
      const auto r = compare_gradients(name, analytic, Tensor(leaf.shape()));
      std::ostringstream note;
      note << reason << "; compared to exact 0, |fd| <= " << std::scientific << std::setprecision(1) << max_abs(numeric);
      rows_.push_back({prefix.empty() ? r.name : prefix + "/" + r.name, r.elements, r.max_rel_error, 0.0, note.str()});
    }
  }

  static constexpr double kZeroStep = 1e-3;

 private:
  std::vector<GradRow>& rows_;
};

inline CandidateSet random_candidates(std::size_t nq, std::size_t nr, std::size_t cap, Rng& rng) {
  CandidateSet cs(nq, cap, nr);
  for (std::size_t q = 0; q < nq; ++q) {
    const std::size_t want = 1 + rng.below(cap);
    while (cs.count(q) < want) cs.push(q, rng.below(nr));
  }
  return cs;
}

inline void ops(std::vector<GradRow>& rows) {
  Runner run(rows);
  Rng rng(2024);
  const Var x = Var::leaf(random({2, 3, 4}, rng)), y = Var::leaf(random({2, 3, 4}, rng));
  const Leaves xy{{"x", x}, {"y", y}}, xo{{"x", x}};
  run.check("add", xy, [&] { return add(x, y); });
  run.check("sub", xy, [&] { return sub(x, y); });
  run.check("mul", xy, [&] { return mul(x, y); });
  run.check("scale", xo, [&] { return scale(x, -1.7); });
  run.check("add_scalar", xo, [&] { return add_scalar(x, 0.3); });
  run.check("relu", xo, [&] { return relu(x); });
  run.check("leaky_relu", xo, [&] { return leaky_relu(x, 0.2); });
  run.check("sigmoid", xo, [&] { return sigmoid(x); });
  run.check("tanh", xo, [&] { return tanh(x); });
  run.check("softplus", xo, [&] { return softplus(x); });
  run.check("sum", xo, [&] { return sum(x); });
  run.check("mean", xo, [&] { return mean(x); });
  run.check("mse", xy, [&] { return mse(x, y); });
  run.check("reshape", xo, [&] { return reshape(x, {6, 4}); });
  run.check("concat_channels", xy, [&] { return concat_channels({x, y}); });
  run.check("channel_mean", xo, [&] { return channel_mean(x); });
  run.check("channel_std", xo, [&] { return channel_std(x); });
  run.check("instance_norm", xo, [&] { return instance_norm(x); });

  const Var m1 = Var::leaf(random({1, 3, 4}, rng));
  run.check("mul_spatial", {{"x", x}, {"mask", m1}}, [&] { return mul_spatial(x, m1); });

  const Var g = Var::leaf(random({2}, rng, 0.5, 1.5)), b = Var::leaf(random({2}, rng));
  run.check("layer_norm", {{"x", x}, {"gain", g}, {"bias", b}}, [&] { return layer_norm(x, g, b); });

  const Var a = Var::leaf(random({3, 4}, rng)), c = Var::leaf(random({4, 5}, rng));
  run.check("matmul", {{"a", a}, {"b", c}}, [&] { return matmul(a, c); });
  run.check("transpose2d", {{"a", a}}, [&] { return transpose2d(a); });
  run.check("row_sum", {{"a", a}}, [&] { return row_sum(a); });

  const Var img = Var::leaf(random({2, 5, 5}, rng));
  const Var w3 = Var::leaf(random({3, 2, 3, 3}, rng)), b3 = Var::leaf(random({3}, rng));
  run.check("conv2d[k3,s1,p1]", {{"x", img}, {"weight", w3}, {"bias", b3}}, [&] { return conv2d(img, w3, b3, 1, 1); });
  const Var w4 = Var::leaf(random({3, 2, 4, 4}, rng));
  run.check("conv2d[k4,s2,p1]", {{"x", img}, {"weight", w4}, {"bias", b3}}, [&] { return conv2d(img, w4, b3, 2, 1); });
  run.check("bilinear_resize[up]", {{"x", img}}, [&] { return bilinear_resize(img, 8, 7); });
  run.check("bilinear_resize[down]", {{"x", img}}, [&] { return bilinear_resize(img, 3, 2); });

  const Var logits = Var::leaf(random({4, 5}, rng, -2.0, 2.0));
  std::vector<std::uint8_t> mask(20, 1);
  mask[3] = mask[7] = mask[8] = 0;
  run.check("softmax_rows[masked]", {{"logits", logits}}, [&] { return softmax_rows(logits, mask).probs; });

  const std::size_t d = 3, nq = 6, nr = 5, cap = 3;
  const CandidateSet cs = random_candidates(nq, nr, cap, rng);
  const Var q = Var::leaf(random({d, nq}, rng)), k = Var::leaf(random({d, nr}, rng));
  run.check("gather_dot", {{"q", q}, {"k", k}}, [&] { return gather_dot(q, k, cs, 0.7); });
  const Var wts = Var::leaf(random({nq, cap}, rng)), v = Var::leaf(random({2, nr}, rng));
  run.check("sparse_aggregate", {{"w", wts}, {"v", v}}, [&] { return sparse_aggregate(wts, v, cs); });

  // C against soft gate values; D at the all-kept point, the only place its
  // surrogate is the true derivative. Step 1e-3 because the gate gradients
  // are tiny next to the row sums.
  const Var corr = Var::leaf(random({nq, cap}, rng, -2.0, 2.0));
  Tensor gate_t = random({nq, cap}, rng, 0.2, 1.0), kept_t({nq, cap});
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t s = cs.count(i); s < cap; ++s) gate_t[i * cap + s] = 0.0;
    for (std::size_t s = 0; s < cs.count(i); ++s) kept_t[i * cap + s] = 1.0;
  }
  const Var gate = Var::constant(gate_t), kept = Var::leaf(kept_t);
  run.check("warp_matrix", {{"c", corr}}, [&] { return warp_matrix(corr, gate, cs); }, 1e-3);
  run.check("warp_matrix", {{"d_all_kept", kept}}, [&] { return warp_matrix(corr, kept, cs); }, 1e-3);

  // Surrogate consistency: dL/dP must be exactly prune_backward(P, dL/dD).
  const Var p = Var::leaf(random({nq, cap}, rng, -0.2, 0.2));
  const Var up = Var::constant(random({nq, cap}, rng));
  Var dg = straight_through_gate(p);
  backward(sum(mul(dg, up)));
  const Tensor expect = prune_backward(p.value(), up.value());
  const auto rep = compare_gradients("p", p.grad(), expect);
  rows.push_back({"straight_through_gate/p", rep.elements, rep.max_rel_error, 0.0, "surrogate consistency, exact"});
}

// Tiny model plus a fixed input and a recorded trace for replay.
struct TinySetup {
  Model model;
  Var s_tgt, s_ref, i_ref;
  Tensor i_tgt;
  ForwardTrace trace;

  static TinySetup make() {
    const ModelConfig cfg = ModelConfig::tiny();
    TinySetup t{Model::create(cfg, 6), {}, {}, {}, {}, {}};
    Rng rng(12);
    const auto r = static_cast<std::size_t>(cfg.finest_resolution());
    t.s_tgt = Var::constant(random({1, r, r}, rng, 0.0, 1.0));
    t.s_ref = Var::constant(random({1, r, r}, rng, 0.0, 1.0));
    t.i_ref = Var::constant(random({3, r, r}, rng, 0.0, 1.0));
    t.i_tgt = random({3, r, r}, rng, 0.0, 1.0);
    t.model.forward(t.s_tgt, t.s_ref, t.i_ref, nullptr, &t.trace);
    return t;
  }

  ModelOutput forward() const { return model.forward(s_tgt, s_ref, i_ref, &trace); }

  Leaves params_with_prefix(const std::string& prefix) const {
    Leaves out;
    for (const auto& p : model.store) {
      if (p.name.starts_with(prefix)) out.emplace_back(p.name, p.var);
    }
    return out;
  }
};

// The key projection's bias adds one constant to every score of a query row,
// which the softmax removes, so its true gradient is exactly 0.
inline bool key_bias(const std::string& name) { return name.ends_with(".beta.bias"); }

inline void split_check(Runner& run, const std::string& prefix, const Leaves& leaves, const std::function<Var()>& out) {
  Leaves regular, biases;
  for (const auto& l : leaves) (key_bias(l.first) ? biases : regular).push_back(l);
  if (!regular.empty()) run.check(prefix, regular, out);
  if (!biases.empty()) run.check_zero(prefix, biases, out, "softmax shift invariance");
}

inline void blocks(std::vector<GradRow>& rows) {
  Runner run(rows);
  const TinySetup t = TinySetup::make();
  const ModelConfig& cfg = t.model.cfg;
  for (int i = 0; i < cfg.scales; ++i) {
    for (int j = 0; j < cfg.blocks_at(i); ++j) {
      const std::string name = "scale" + std::to_string(i) + ".block" + std::to_string(j);
      split_check(run, "", t.params_with_prefix(name + "."), [&, i, j] {
        return t.forward().blocks[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].features;
      });
    }
    if (i < cfg.scales - 1) {
      run.check("", t.params_with_prefix("scale" + std::to_string(i) + ".handoff"), [&, i] {
        return t.forward().blocks[static_cast<std::size_t>(i)][0].features;
      });
    }
  }
  run.check("", t.params_with_prefix("embed."), [&] {
    const auto f = t.forward().features;
    std::vector<Var> all;
    for (const auto& v : f.tgt) all.push_back(sum(mul(v, v)));
    for (const auto& v : f.ref) all.push_back(sum(mul(v, v)));
    for (const auto& v : f.pos) all.push_back(sum(mul(v, v)));
    return add_all(all);
  });
  run.check("", t.params_with_prefix("decoder."), [&] { return t.forward().image; });

  Rng rng(31);
  const auto r = static_cast<std::size_t>(cfg.finest_resolution());
  const FeatureExtractor fx = FeatureExtractor::create();
  const Var image = Var::leaf(random({3, r, r}, rng, 0.0, 1.0));
  run.check("extractor", {{"image", image}}, [&] {
    const auto taps = fx.taps(image);
    return add_all(std::vector<Var>{sum(taps[0]), sum(taps[1]), sum(taps[2]), sum(taps[3])});
  });

  ParameterStore ds;
  Rng drng(5);
  const PatchDiscriminator disc = PatchDiscriminator::build(ParamBuilder::create(ds, drng), 4);
  Leaves dl{{"image", image}};
  for (const auto& p : ds) dl.emplace_back(p.name, p.var);
  run.check("discriminator", dl, [&] { return disc(t.s_tgt, image); });

  // The matching loss supervises the score projections and the embeddings behind them.
  Leaves scoring = t.params_with_prefix("embed.");
  for (const auto& p : t.model.store) {
    if (p.name.find(".alpha.") != std::string::npos || p.name.find(".beta.") != std::string::npos) {
      scoring.emplace_back(p.name, p.var);
    }
  }
  split_check(run, "matching_loss", scoring, [&] { return matching_loss(t.forward(), t.i_ref.value(), t.i_tgt).total; });
}

inline void model(std::vector<GradRow>& rows) {
  Runner run(rows);
  const TinySetup t = TinySetup::make();
  Leaves all;
  for (const auto& p : t.model.store) all.emplace_back(p.name, p.var);
  split_check(run, "", all, [&] { return t.forward().image; });
}

}  // namespace gradsuite

inline GradSuiteResult gradcheck_suite(GradScope scope) {
  GradSuiteResult r;
  const auto t0 = std::chrono::steady_clock::now();
  switch (scope) {
    case GradScope::op: gradsuite::ops(r.rows); break;
    case GradScope::block: gradsuite::blocks(r.rows); break;
    case GradScope::model: gradsuite::model(r.rows); break;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string format_grad_table(const GradSuiteResult& r, double tol = kGradCheckTolerance) {
  std::size_t width = 4;
  for (const auto& row : r.rows) width = std::max(width, row.path.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "path" << "  " << std::setw(8) << "elements"
     << "  " << std::setw(12) << "max_rel_err" << "  status\n";
  for (const auto& row : r.rows) {
    os << std::left << std::setw(static_cast<int>(width)) << row.path << "  " << std::setw(8) << row.elements << "  "
       << std::setw(12) << std::scientific << std::setprecision(3) << row.max_rel_error << std::defaultfloat << "  "
       << (row.passed(tol) ? "ok" : "FAIL");
    if (!row.note.empty()) os << "  (" << row.note << ")";
    os << '\n';
  }
  os << r.rows.size() << " paths, max relative error " << std::scientific << std::setprecision(3) << r.max_rel_error()
     << std::defaultfloat << ", " << std::fixed << std::setprecision(1) << r.seconds << " s\n";
  return os.str();
}

}  // namespace dynast
