// dynast: toy data, training, gradient checks, benchmarks, warp dumps, metrics.
// Exit codes: 0 success, 1 validation failure, 2 numeric abort.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dynast/harness.hpp"

namespace {

using namespace dynast;

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitNumeric = 2;

// DIR or DIR:INDEX
std::pair<std::string, std::size_t> split_sample(const std::string& spec) {
  const auto colon = spec.rfind(':');
  if (colon == std::string::npos) return {spec, 0};
  return {spec.substr(0, colon), std::stoul(spec.substr(colon + 1))};
}

int cmd_gen(std::size_t n, std::size_t res, const std::string& transform, std::uint64_t seed, const std::string& out) {
  const auto data = gen_toy_dataset(n, res, Transform::parse(transform), seed);
  save_toy_dataset(out, data);
  std::cout << "wrote " << n << " samples (" << res << "x" << res << ", " << transform << ") to " << out << '\n';
  return kExitOk;
}

int cmd_train(const std::string& config, const std::string& data_dir, std::size_t steps, const std::string& out,
              const std::string& resume, std::size_t save_every, int threads) {
  auto data = load_toy_dataset(data_dir);
  Trainer trainer = [&] {
    if (!resume.empty()) return Trainer::resume(resume, std::move(data));
    Config cfg = config.empty() ? Config{} : load_config(config);
    if (threads > 0) cfg.train.threads = threads;
    return Trainer(cfg, std::move(data));
  }();
  const auto records = trainer.run(steps, out, save_every);
  if (!records.empty()) std::cout << records.back().log_line() << '\n';
  const EvalReport e = evaluate(trainer.model(), load_toy_dataset(data_dir));
  std::cout << "eval l1 " << e.l1 << " psnr " << e.psnr << " ssim " << e.ssim << " finest_matching "
            << e.finest_matching;
  if (e.argmax_hit) std::cout << " argmax_hit " << *e.argmax_hit;
  std::cout << '\n';
  return kExitOk;
}

int cmd_gradcheck(const std::string& scope, double tol) {
  const GradSuiteResult r = gradcheck_suite(parse_grad_scope(scope));
  std::cout << format_grad_table(r, tol);
  return r.passed(tol) ? kExitOk : kExitInvalid;
}

int cmd_bench(const std::vector<std::size_t>& sizes, std::size_t k, std::size_t trials, const std::string& report) {
  const BenchReport r = bench_attention(sizes, k, trials);
  const std::string text = r.to_json().dump(2);
  if (!report.empty()) {
    std::ofstream os(report);
    if (!os) throw FormatError("cannot write " + report);
    os << text << '\n';
  }
  std::cout << text << '\n';
  return r.macs_exact() && r.within_bounds() ? kExitOk : kExitInvalid;
}

int cmd_warp_viz(const std::string& ckpt, const std::string& sample, const std::string& out) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const auto [dir, index] = split_sample(sample);
  const auto data = load_toy_dataset(dir);
  if (index >= data.size()) {
    throw ConfigError("warp-viz: sample " + std::to_string(index) + " outside a dataset of " + std::to_string(data.size()));
  }
  for (const auto& f : warp_viz(ck.model, data[index], out)) std::cout << f << '\n';
  return kExitOk;
}

int cmd_metrics(const std::string& a, const std::string& b) {
  const ImageMetrics m = image_metrics(read_pnm(a), read_pnm(b));
  std::cout << "l1 " << m.l1 << "\npsnr " << m.psnr << "\nssim " << m.ssim << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DynaST toy harness"};
  app.require_subcommand(1);

  std::size_t n = 8, res = 32, steps = 1, k = 4, trials = 5, save_every = 0;
  std::uint64_t seed = 0;
  int threads = 0;
  double tol = kGradCheckTolerance;
  std::string transform = "identity", out, config, data, resume, scope = "model", report, ckpt, sample, a, b;
  std::vector<std::size_t> sizes{256, 1024, 4096};

  auto* gen = app.add_subcommand("gen", "Generate a toy dataset");
  gen->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--res", res, "Image side")->check(CLI::Range(2, 4096));
  gen->add_option("--transform", transform, "identity | translation:DX,DY | permutation:BLOCK | scale[:FACTOR]");
  gen->add_option("--seed", seed, "Dataset seed");
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train on a toy dataset");
  train->add_option("--config", config, "key = value config file (defaults when omitted)");
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--steps", steps, "Optimizer steps to run")->required();
  train->add_option("--out", out, "Output directory for train.log, timing.log, checkpoint.ckpt")->required();
  train->add_option("--resume", resume, "Continue from this checkpoint");
  train->add_option("--save-every", save_every, "Also checkpoint every N steps");
  train->add_option("--threads", threads, "Worker threads (overrides the config)")->check(CLI::PositiveNumber);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_option("--scope", scope, "op | block | model");
  grad->add_option("--tol", tol, "Maximum relative error");

  auto* bench = app.add_subcommand("bench", "Dense vs sparse attention cost");
  bench->add_option("--sizes", sizes, "Token counts")->delimiter(',');
  bench->add_option("--k", k, "Top-k")->check(CLI::PositiveNumber);
  bench->add_option("--trials", trials, "Timed repetitions (best is kept)")->check(CLI::PositiveNumber);
  bench->add_option("--report", report, "Write the JSON report here");

  auto* viz = app.add_subcommand("warp-viz", "Write per-block warped exemplars");
  viz->add_option("--ckpt", ckpt, "Checkpoint")->required();
  viz->add_option("--sample", sample, "DATASET_DIR[:INDEX]")->required();
  viz->add_option("--out", out, "Output directory")->required();

  auto* met = app.add_subcommand("metrics", "L1 / PSNR / SSIM between two images");
  met->add_option("--a", a, "First PPM/PGM")->required();
  met->add_option("--b", b, "Second PPM/PGM")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*gen) return cmd_gen(n, res, transform, seed, out);
    if (*train) return cmd_train(config, data, steps, out, resume, save_every, threads);
    if (*grad) return cmd_gradcheck(scope, tol);
    if (*bench) return cmd_bench(sizes, k, trials, report);
    if (*viz) return cmd_warp_viz(ckpt, sample, out);
    if (*met) return cmd_metrics(a, b);
  } catch (const NumericAbort& e) {
    std::cerr << "numeric abort at step " << e.step() << ": non-finite " << e.component() << '\n';
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  }
  return kExitInvalid;
}
