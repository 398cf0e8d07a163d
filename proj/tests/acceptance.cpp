// Acceptance suite: one PASS/FAIL line per criterion A1..A7.
// Tolerances and thresholds are pinned below; the A4 gates were calibrated
// once on the seed-0 run and frozen.
//
//   dynast_acceptance --dynast PATH/TO/dynast [--work DIR] [--only A1,A5]
//
// Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dynast/harness.hpp"

namespace {

using namespace dynast;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// A1
constexpr double kA1Tol = 1e-4;
constexpr double kA1Seconds = 60.0;
// A2
constexpr int kA2Instances = 50;
constexpr double kA2Tol = 1e-6;
// A3
constexpr int kA3Trials = 1000;
constexpr double kA3RowTol = 1e-6;
// A4
constexpr std::size_t kA4Samples = 8, kA4Res = 32;
constexpr std::size_t kA4IdentitySteps = 500, kA4TranslationSteps = 1500;
constexpr double kA4MatchingDrop = 0.90;
constexpr double kA4MaxL1 = 0.10;
constexpr double kA4MinArgmaxHit = 0.70;
constexpr double kA4Seconds = 15.0 * 60.0;
// At the default 1e-3 the coarsest dense logits blow up around step 300 on translation.
constexpr double kA4TranslationLr = 3e-4;
// A5
constexpr std::size_t kA5K = 4, kA5Trials = 5;
constexpr double kA5DenseSlope = 1.8, kA5SparseSlope = 1.2;
// A6
constexpr int kA6OursXMaxRes = 16;
// A7
constexpr std::size_t kA7Steps = 3;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

int worker_threads() {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  return static_cast<int>(std::min<unsigned>(hw, 4));
}

Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.span()) v = rng.uniform(lo, hi);
  return t;
}

AttentionProjections random_projections(std::size_t in, std::size_t d, Rng& rng) {
  return {Conv{Var::constant(uniform({d, in, 1, 1}, rng, -1, 1)), Var::constant(uniform({d}, rng, -1, 1)), 1, 0},
          Conv{Var::constant(uniform({d, in, 1, 1}, rng, -1, 1)), Var::constant(uniform({d}, rng, -1, 1)), 1, 0}};
}

// ---- A1

Verdict a1() {
  const GradSuiteResult r = gradcheck_suite(GradScope::model);
  const bool ok = r.passed(kA1Tol) && r.seconds <= kA1Seconds;
  return {ok, "max_rel_error " + fmt(r.max_rel_error()) + " (<= " + fmt(kA1Tol) + ") over " + std::to_string(r.rows.size()) +
                  " parameters in " + fmt(r.seconds, 3) + " s (<= " + fmt(kA1Seconds) + ")"};
}

// ---- A2

Verdict a2() {
  Rng rng(2002);
  double worst = 0.0;
  for (int i = 0; i < kA2Instances; ++i) {
    std::size_t h, w;
    do {
      h = 1 + rng.below(8);
      w = 1 + rng.below(8);
    } while (h * w > 64 || h * w < 2);
    const std::size_t c = 1 + rng.below(32), d = 1 + rng.below(32);
    const double tau = rng.uniform(0.5, 100.0);
    const auto proj = random_projections(c, d, rng);
    const Var tgt = Var::constant(uniform({c, h, w}, rng, -1, 1));
    const Var ref = Var::constant(uniform({c, w, h}, rng, -1, 1));
    const auto dense = dense_attention(tgt, ref, proj, tau);
    const auto sparse = sparse_attention(tgt, ref, CandidateSet::full(h * w, h * w), proj, tau);
    worst = std::max({worst, max_abs_diff(dense.weights.value(), sparse.weights.value()),
                      max_abs_diff(dense.pruned.value(), sparse.pruned.value())});
  }
  return {worst <= kA2Tol, "max |A_sparse - A_dense| " + fmt(worst) + " (<= " + fmt(kA2Tol) + ") over " +
                               std::to_string(kA2Instances) + " instances"};
}

// ---- A3

struct Violations {
  std::size_t row_sum = 0, pruned_range = 0, inter = 0, inner = 0, warp = 0, pixels = 0, surrogate = 0;
  std::size_t total() const { return row_sum + pruned_range + inter + inner + warp + pixels + surrogate; }
};

bool valid_set(const CandidateSet& cs, std::size_t cap) {
  for (std::size_t q = 0; q < cs.queries(); ++q) {
    const auto of = cs.of(q);
    if (of.empty() || of.size() > cap) return false;
    std::set<Index> seen;
    for (Index r : of) {
      if (r >= cs.n_ref() || !seen.insert(r).second) return false;
    }
  }
  return true;
}

TopK random_topk(std::size_t queries, std::size_t n_ref, std::size_t k, Rng& rng) {
  TopK t;
  t.k = k;
  t.idx.assign(queries * k, 0);
  t.count.assign(queries, 0);
  for (std::size_t q = 0; q < queries; ++q) {
    const std::size_t want = 1 + rng.below(std::min(k, n_ref));
    std::set<Index> s;
    while (s.size() < want) s.insert(static_cast<Index>(rng.below(n_ref)));
    for (Index m : s) t.idx[q * k + t.count[q]++] = m;
  }
  return t;
}

void a3_trial(Rng& rng, Violations& v) {
  const std::size_t k = 1 + rng.below(6);
  const GridDims coarse{1 + rng.below(4), 1 + rng.below(4)}, coarse_ref{1 + rng.below(4), 1 + rng.below(4)};
  const GridDims fine{2 * coarse.h, 2 * coarse.w}, fine_ref{2 * coarse_ref.h, 2 * coarse_ref.w};

  const CandidateSet inter =
      inherit_candidates_interscale(random_topk(coarse.size(), coarse_ref.size(), k, rng), coarse, coarse_ref, fine);
  v.inter += !valid_set(inter, 4 * k);
  const CandidateSet inner = propagate_candidates_innerscale(random_topk(fine.size(), fine_ref.size(), k, rng), fine, fine_ref);
  v.inner += !valid_set(inner, 5 * k);

  // Attention on one of the two sets, then a random prune head.
  const std::size_t c = 1 + rng.below(6), d = 1 + rng.below(6);
  const Var tgt = Var::constant(uniform({c, fine.h, fine.w}, rng, -1, 1));
  const Var ref = Var::constant(uniform({c, fine_ref.h, fine_ref.w}, rng, -1, 1));
  auto m = sparse_attention(tgt, ref, rng.below(2) ? inter : inner, random_projections(c, d, rng), rng.uniform(1.0, 100.0));
  const std::size_t cap = m.capacity();
  for (std::size_t q = 0; q < m.queries(); ++q) {
    double s = 0.0;
    for (std::size_t j = 0; j < cap; ++j) s += m.weights.value()[q * cap + j];
    v.row_sum += std::abs(s - 1.0) > kA3RowTol;
  }

  ParameterStore store;
  Rng init(rng.next());
  const PruneHead head = make_prune_head(ParamBuilder::create(store, init), "prune", c, c, d, rng.uniform(-1.0, 1.0));
  prune_map(m, tgt, ref, head);
  for (std::size_t q = 0; q < m.queries(); ++q) {
    double s = 0.0;
    for (std::size_t j = 0; j < cap; ++j) s += m.pruned.value()[q * cap + j];
    v.pruned_range += s < 0.0 || s > 1.0 + kA3RowTol;
  }

  const Var w = warp_matrix(m);
  for (std::size_t q = 0; q < m.queries(); ++q) {
    double s = 0.0;
    bool neg = false;
    for (std::size_t j = 0; j < cap; ++j) {
      s += w.value()[q * cap + j];
      neg |= w.value()[q * cap + j] < 0.0;
    }
    v.warp += neg || s > 1.0;
  }
  const Var img = Var::constant(uniform({3, fine_ref.h, fine_ref.w}, rng, 0.0, 1.0));
  for (double p : warp_reference(w, img, m).value().span()) v.pixels += p < 0.0 || p > 1.0;

  // Straight-through at P = 0: sigmoid'(0) = 1/4 exactly.
  const Var p = Var::leaf(Tensor({1}, 0.0));
  backward(straight_through_gate(p));
  v.surrogate += p.grad()[0] != 0.25;
}

Verdict a3() {
  Rng rng(3003);
  Violations v;
  for (int t = 0; t < kA3Trials; ++t) a3_trial(rng, v);
  std::ostringstream os;
  os << kA3Trials << " trials; violations: row_sum " << v.row_sum << ", pruned_range " << v.pruned_range
     << ", inter<=4k " << v.inter << ", inner<=5k " << v.inner << ", W_substochastic " << v.warp << ", pixels "
     << v.pixels << ", surrogate " << v.surrogate;
  return {v.total() == 0, os.str()};
}

// ---- A4 / A6

struct ToyRun {
  EvalReport before, after;
  double seconds = 0.0;
};

ToyRun toy_run(const Transform& t, std::size_t steps, int max_matching_res = 0, double lr = 0.0) {
  const auto t0 = Clock::now();
  Config cfg;
  cfg.train.seed = 0;
  cfg.train.threads = worker_threads();
  cfg.model.max_matching_resolution = max_matching_res;
  if (lr > 0.0) cfg.train.lr = lr;
  auto data = gen_toy_dataset(kA4Samples, kA4Res, t, 0);
  Trainer trainer(cfg, data);
  ToyRun r;
  r.before = evaluate(trainer.model(), data);
  for (std::size_t i = 0; i < steps; ++i) trainer.step();
  r.after = evaluate(trainer.model(), data);
  r.seconds = seconds_since(t0);
  return r;
}

Verdict a4(const ToyRun& id, const ToyRun& tr) {
  const double drop = 1.0 - id.after.finest_matching / id.before.finest_matching;
  const double hit = tr.after.argmax_hit.value_or(0.0);
  const double secs = id.seconds + tr.seconds;
  const bool ok = drop >= kA4MatchingDrop && id.after.l1 <= kA4MaxL1 && hit >= kA4MinArgmaxHit && secs <= kA4Seconds;
  std::ostringstream os;
  os << "identity: finest matching " << fmt(id.before.finest_matching) << " -> " << fmt(id.after.finest_matching)
     << " (drop " << fmt(100 * drop, 3) << "% >= " << 100 * kA4MatchingDrop << "%), L1 " << fmt(id.after.l1) << " (<= "
     << kA4MaxL1 << "); translation: argmax hit " << fmt(100 * hit, 3) << "% (>= " << 100 * kA4MinArgmaxHit
     << "%, lr " << kA4TranslationLr << "); runtime " << fmt(secs, 4) << " s (<= " << kA4Seconds << ") on " << worker_threads() << " thread(s)";
  return {ok, os.str()};
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Verdict a6(const ToyRun& full, const ToyRun& oursx) {
  ModelConfig mc;
  mc.disable_pruning = true;
  const Model model = Model::create(mc, 0);
  std::size_t maps = 0, equal = 0;
  for (const auto& s : gen_toy_dataset(2, kA4Res, Transform::identity(), 5)) {
    const ModelOutput out = model.forward(Var::constant(s.s_tgt), Var::constant(s.s_ref), Var::constant(s.i_ref));
    for (const auto& scale : out.blocks) {
      for (const auto& b : scale) {
        if (!b.attn) continue;
        ++maps;
        equal += bitwise_equal(b.attn->pruned.value(), b.attn->weights.value());
      }
    }
  }
  const bool ok = maps > 0 && equal == maps && oursx.after.l1 > full.after.l1;
  std::ostringstream os;
  os << "disable_pruning: " << equal << "/" << maps << " maps with A~ == A bitwise; max_matching_resolution "
     << kA6OursXMaxRes << ": L1 " << fmt(oursx.after.l1) << " > full " << fmt(full.after.l1) << " after "
     << kA4IdentitySteps << " steps";
  return {ok, os.str()};
}

// ---- A5

Verdict a5() {
  const BenchReport r = bench_attention({256, 1024, 4096}, kA5K, kA5Trials);
  const bool ok = r.macs_exact() && r.within_bounds() && r.slope_dense >= kA5DenseSlope && r.slope_sparse <= kA5SparseSlope;
  std::ostringstream os;
  os << "dense MACs exact " << (r.macs_exact() ? "yes" : "no") << "; slope dense " << fmt(r.slope_dense) << " (>= "
     << kA5DenseSlope << "), sparse " << fmt(r.slope_sparse) << " (<= " << kA5SparseSlope << "); peak slots";
  for (const auto& row : r.rows) os << ' ' << row.sparse_peak_slots << "/" << row.slot_bound;
  return {ok, os.str()};
}

// ---- A7

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null").c_str());
  return rc;
}

Verdict a7(const std::string& cli, const fs::path& work) {
  if (cli.empty()) return {false, "no --dynast binary given"};
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string q = "\"", data = (work / "data").string();
  if (run(q + cli + q + " gen --n 4 --res 32 --seed 0 --out " + q + data + q) != 0) return {false, "dynast gen failed"};
  std::vector<std::string> logs, ckpts;
  for (const char* name : {"run_a", "run_b"}) {
    const fs::path out = work / name;
    if (run(q + cli + q + " train --data " + q + data + q + " --steps " + std::to_string(kA7Steps) + " --out " + q +
            out.string() + q) != 0) {
      return {false, std::string("dynast train failed for ") + name};
    }
    logs.push_back(read_bytes(out / "train.log"));
    ckpts.push_back(read_bytes(out / "checkpoint.ckpt"));
  }
  const bool log_eq = !logs[0].empty() && logs[0] == logs[1];
  const bool ck_eq = !ckpts[0].empty() && ckpts[0] == ckpts[1];
  return {log_eq && ck_eq, "train.log " + std::string(log_eq ? "identical" : "differs") + " (" +
                               std::to_string(logs[0].size()) + " bytes), checkpoint " + (ck_eq ? "identical" : "differs") +
                               " (" + std::to_string(ckpts[0].size()) + " bytes) over " + std::to_string(kA7Steps) + " steps"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria A1..A7"};
  std::string cli, only;
  fs::path work = fs::temp_directory_path() / "dynast_acceptance";
  app.add_option("--dynast", cli, "Path to the dynast CLI (A7)");
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--only", only, "Comma-separated subset, e.g. A1,A5");
  CLI11_PARSE(app, argc, argv);

  const auto selected = [&](const std::string& id) {
    if (only.empty()) return true;
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');) {
      if (tok == id) return true;
    }
    return false;
  };

  bool all = true;
  const auto report = [&](const std::string& id, const auto& fn) {
    if (!selected(id)) return;
    Verdict v;
    const auto t0 = Clock::now();
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all &= v.pass;
    std::cout << id << ' ' << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << "  [" << fmt(seconds_since(t0), 3)
              << " s]" << std::endl;
  };

  report("A1", a1);
  report("A2", a2);
  report("A3", a3);

  std::optional<ToyRun> full;
  if (selected("A4") || selected("A6")) {
    try {
      full = toy_run(Transform::identity(), kA4IdentitySteps);
    } catch (const std::exception& e) {
      std::cerr << "identity run failed: " << e.what() << '\n';
    }
  }
  report("A4", [&] {
    if (!full) return Verdict{false, "identity run failed"};
    return a4(*full, toy_run(Transform::translation(4, 0), kA4TranslationSteps, 0, kA4TranslationLr));
  });
  report("A5", a5);
  report("A6", [&] {
    if (!full) return Verdict{false, "identity run failed"};
    return a6(*full, toy_run(Transform::identity(), kA4IdentitySteps, kA6OursXMaxRes));
  });
  report("A7", [&] { return a7(cli, work / "a7"); });
  return all ? 0 : 1;
}
