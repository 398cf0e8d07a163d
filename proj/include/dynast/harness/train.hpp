#pragma once

// Toy training loop. Step t (0-based) uses samples (t*B + b) mod n for
// b = 0..B-1. Every sample's gradient is computed on its own graph and the
// per-sample gradients are summed in sample order, so results do not depend
// on the thread count. Gradients and logged values are batch means.

#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "dynast/checkpoint.hpp"
#include "dynast/harness/metrics.hpp"
#include "dynast/harness/toy_data.hpp"
#include "dynast/losses.hpp"
#include "dynast/optim.hpp"

namespace dynast {

// A loss component or gradient went NaN/Inf.
class NumericAbort : public NumericError {
 public:
  NumericAbort(std::uint64_t step, std::string component)
      : NumericError("non-finite " + component + " at step " + std::to_string(step)),
        step_(step),
        component_(std::move(component)) {}
  std::uint64_t step() const { return step_; }
  const std::string& component() const { return component_; }

 private:
  std::uint64_t step_;
  std::string component_;
};

struct StepRecord {
  std::uint64_t step = 0;  // 1-based
  LossReport report;
  std::optional<double> discriminator;
  double ms = 0.0;

  std::string log_line() const {
    auto j = report.to_json(step);
    if (discriminator) j["discriminator"] = *discriminator;
    return j.dump();
  }
};

struct EvalReport {
  double l1 = 0.0, psnr = 0.0, ssim = 0.0;
  double finest_matching = 0.0;      // mean finest-scale matching term
  std::optional<double> argmax_hit;  // fraction of finest queries whose argmax is the true match
};

namespace detail {

inline const char* kDiscMagic = "DYNAST-DISC v1";

struct SampleInputs {
  Var s_tgt, s_ref, i_ref;
  Tensor i_tgt;  // supervised target, or the content image in style mode
  Tensor i_style;
};

inline SampleInputs sample_inputs(const ModelConfig& cfg, const ToySample& s) {
  if (cfg.task == Task::style) {
    // Content image as the layout input, style image as the exemplar.
    return {Var::constant(s.i_tgt), Var::constant(s.i_ref), Var::constant(s.i_ref), s.i_tgt, s.i_ref};
  }
  return {Var::constant(s.s_tgt), Var::constant(s.s_ref), Var::constant(s.i_ref), s.i_tgt, {}};
}

inline bool matching_enabled(const ModelConfig& cfg) { return cfg.task == Task::supervised || cfg.style_matching; }

inline void add_into(std::vector<Tensor>& acc, const std::vector<Tensor>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].empty()) continue;
    if (acc[i].empty()) {
      acc[i] = g[i];
    } else {
      for (std::size_t e = 0; e < g[i].size(); ++e) acc[i][e] += g[i][e];
    }
  }
}

inline std::vector<Tensor> take_grads(ParameterStore& store) {
  std::vector<Tensor> g;
  g.reserve(store.size());
  for (const auto& p : store) g.push_back(p.var.grad());
  store.zero_grad();
  return g;
}

}  // namespace detail

class Trainer {
 public:
  Trainer(const Config& cfg, std::vector<ToySample> data)
      : cfg_(cfg), data_(std::move(data)), model_(Model::create(cfg.model, cfg.train.seed)), opt_(cfg.train, model_.store) {
    init();
  }

  // Continues from a checkpoint written by `save`; the discriminator state is
  // read from the sidecar next to it when the config uses one.
  static Trainer resume(const std::string& ckpt_path, std::vector<ToySample> data) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    return Trainer(std::move(ck), std::move(data), ckpt_path);
  }

  const Config& config() const { return cfg_; }
  const Model& model() const { return model_; }
  std::uint64_t steps_done() const { return opt_.state().step; }

  StepRecord step() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t t = steps_done();
    const std::size_t B = static_cast<std::size_t>(cfg_.train.batch);
    std::vector<std::size_t> batch(B);
    for (std::size_t b = 0; b < B; ++b) batch[b] = static_cast<std::size_t>((t * B + b) % data_.size());

    std::vector<SampleResult> results(B);
    run_parallel(B, [&](Worker& w, std::size_t b) { results[b] = sample_pass(w, data_[batch[b]], t + 1); });

    StepRecord rec;
    rec.step = t + 1;
    std::vector<Tensor> grads(model_.store.size());
    for (const auto& r : results) detail::add_into(grads, r.grads);
    check_grads(model_.store, grads, rec.step);
    rec.report = mean_report(results);

    if (disc_) {
      std::vector<double> dl(B);
      std::vector<std::vector<Tensor>> dg(B);
      run_parallel(B, [&](Worker& w, std::size_t b) {
        std::tie(dl[b], dg[b]) = disc_pass(w, data_[batch[b]], results[b].fake, rec.step);
      });
      std::vector<Tensor> dsum(disc_->store.size());
      double d = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        detail::add_into(dsum, dg[b]);
        d += dl[b];
      }
      check_grads(disc_->store, dsum, rec.step);
      rec.discriminator = d / static_cast<double>(B);
      disc_->opt.step(disc_->store, dsum);
    }
    opt_.step(model_.store, grads);
    rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  void save(const std::string& path) const {
    save_checkpoint(path, cfg_, model_.store, &opt_.state());
    if (disc_) save_disc(path + ".disc");
  }

  // Runs `steps` steps, appending one JSON line per step to out_dir/train.log
  // and its wall time to out_dir/timing.log, then writes out_dir/checkpoint.ckpt.
  // Wall times live in their own file so train.log is bit-reproducible.
  std::vector<StepRecord> run(std::size_t steps, const std::string& out_dir, std::size_t save_every = 0) {
    std::filesystem::create_directories(out_dir);
    const auto mode = steps_done() == 0 ? std::ios::trunc : std::ios::app;
    std::ofstream log(std::filesystem::path(out_dir) / "train.log", std::ios::out | mode);
    std::ofstream timing(std::filesystem::path(out_dir) / "timing.log", std::ios::out | mode);
    if (!log || !timing) throw FormatError("cannot write logs in " + out_dir);
    const std::string ckpt = (std::filesystem::path(out_dir) / "checkpoint.ckpt").string();
    std::vector<StepRecord> records;
    for (std::size_t i = 0; i < steps; ++i) {
      records.push_back(step());
      log << records.back().log_line() << '\n' << std::flush;
      timing << "{\"step\":" << records.back().step << ",\"ms\":" << records.back().ms << "}\n";
      if (save_every && (i + 1) % save_every == 0) save(ckpt);
    }
    save(ckpt);
    return records;
  }

 private:
  struct Disc {
    ParameterStore store;
    PatchDiscriminator net;
    Adam opt;
  };

  struct Worker {
    std::optional<Model> model;  // per-thread copy; worker 0 uses the trainer's own
    std::optional<ParameterStore> disc_store;
    std::optional<PatchDiscriminator> disc;
  };

  struct SampleResult {
    LossReport report;
    std::vector<Tensor> grads;
    Tensor fake;
  };

  Trainer(Checkpoint ck, std::vector<ToySample> data, const std::string& ckpt_path)
      : cfg_(ck.config),
        data_(std::move(data)),
        model_(std::move(ck.model)),
        opt_(ck.optimizer ? Adam(ck.config.train, std::move(*ck.optimizer)) : Adam(ck.config.train, model_.store)) {
    init();
    if (disc_) load_disc(ckpt_path + ".disc");
  }

  void init() {
    if (data_.empty()) throw ConfigError("train: dataset is empty");
    const auto r = static_cast<std::size_t>(cfg_.model.finest_resolution());
    for (const auto& s : data_) {
      if (s.resolution() != r) {
        throw ConfigError("train: dataset resolution " + std::to_string(s.resolution()) +
                          " does not match the model's finest resolution " + std::to_string(r));
      }
    }
    if (cfg_.model.task == Task::style && cfg_.model.semantic_channels != cfg_.model.image_channels) {
      throw ConfigError("train: style mode feeds the content image as the layout input; set semantic_channels = " +
                        std::to_string(cfg_.model.image_channels));
    }
    if (cfg_.model.task == Task::supervised && cfg_.model.semantic_channels != 1) {
      throw ConfigError("train: toy semantic maps have one channel; set semantic_channels = 1");
    }
    fx_ = FeatureExtractor::create(static_cast<std::size_t>(cfg_.model.image_channels));
    if (cfg_.model.lambda_adv != 0.0 && cfg_.model.task == Task::supervised) {
      Rng rng(cfg_.train.seed ^ 0xd15c0ULL);
      ParameterStore store;
      const auto in = static_cast<std::size_t>(cfg_.model.semantic_channels + cfg_.model.image_channels);
      PatchDiscriminator net = PatchDiscriminator::build(ParamBuilder::create(store, rng), in);
      Adam opt(cfg_.train, store);
      disc_.emplace(Disc{std::move(store), net, std::move(opt)});
    }
    workers_.resize(static_cast<std::size_t>(std::min(cfg_.train.threads, cfg_.train.batch)));
  }

  Model& model_of(Worker& w) { return w.model ? *w.model : model_; }

  // Refreshes per-thread copies from the trainer's parameters.
  void sync_workers() {
    for (std::size_t i = 1; i < workers_.size(); ++i) {
      Worker& w = workers_[i];
      if (!w.model) w.model = model_.clone();
      for (std::size_t p = 0; p < model_.store.size(); ++p) {
        w.model->store.params()[p].var.mutable_value() = model_.store.params()[p].var.value();
      }
      if (disc_) {
        if (!w.disc_store) {
          w.disc_store = disc_->store.clone();
          w.disc = PatchDiscriminator::build(ParamBuilder::bind(*w.disc_store),
                                             disc_->net.c1.weight.shape()[1]);
        }
        for (std::size_t p = 0; p < disc_->store.size(); ++p) {
          w.disc_store->params()[p].var.mutable_value() = disc_->store.params()[p].var.value();
        }
      }
    }
  }

  template <typename F>
  void run_parallel(std::size_t n, F&& f) {
    sync_workers();
    const std::size_t W = workers_.size();
    std::vector<std::exception_ptr> errors(n);
    auto body = [&](std::size_t wi) {
      for (std::size_t b = wi; b < n; b += W) {
        try {
          f(workers_[wi], b);
        } catch (...) {
          errors[b] = std::current_exception();
        }
      }
    };
    {
      std::vector<std::jthread> threads;
      for (std::size_t wi = 1; wi < W; ++wi) threads.emplace_back(body, wi);
      body(0);
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  ParameterStore& disc_store_of(Worker& w) { return w.disc_store ? *w.disc_store : disc_->store; }
  const PatchDiscriminator& disc_of(const Worker& w) const { return w.disc ? *w.disc : disc_->net; }

  SampleResult sample_pass(Worker& w, const ToySample& s, std::uint64_t step) {
    Model& m = model_of(w);
    const ModelConfig& mc = cfg_.model;
    const auto in = detail::sample_inputs(mc, s);
    ModelOutput out = m.forward(in.s_tgt, in.s_ref, in.i_ref);
    std::optional<MatchingLoss> ml;
    if (detail::matching_enabled(mc)) ml = matching_loss(out, s.i_ref, s.i_tgt);
    SampleResult r;
    Var task;
    std::optional<TaskLoss> tl;
    if (mc.task == Task::style) {
      task = style_task_loss(out.image, in.i_tgt, in.i_style, taps_of(fx_), mc.lambda_s).total;
    } else {
      tl = supervised_task_loss(out.image, in.i_tgt, in.s_tgt, taps_of(fx_), mc.lambda_perceptual, mc.lambda_adv,
                                disc_ ? &disc_of(w) : nullptr);
      task = tl->total;
    }
    Objective obj = total_loss(task, ml, mc.lambda_m);
    r.report = obj.report;
    if (tl) {
      r.report.pixel = tl->pixel.item();
      std::array<double, 4> pc{};
      for (std::size_t i = 0; i < 4; ++i) pc[i] = tl->perceptual[i].item();
      r.report.perceptual = pc;
      if (tl->adversarial) r.report.adversarial = tl->adversarial->item();
    }
    check_report(r.report, step);
    backward(obj.total, Tensor({1}, 1.0 / static_cast<double>(cfg_.train.batch)));
    r.grads = detail::take_grads(m.store);
    if (disc_) disc_store_of(w).zero_grad();
    r.fake = out.image.value();
    return r;
  }

  std::pair<double, std::vector<Tensor>> disc_pass(Worker& w, const ToySample& s, const Tensor& fake,
                                                   std::uint64_t step) {
    const PatchDiscriminator& net = disc_of(w);
    const Var s_tgt = Var::constant(s.s_tgt);
    Var loss = discriminator_loss(net(s_tgt, Var::constant(s.i_tgt)), net(s_tgt, Var::constant(fake)));
    if (!std::isfinite(loss.item())) throw NumericAbort(step, "discriminator loss");
    backward(loss, Tensor({1}, 1.0 / static_cast<double>(cfg_.train.batch)));
    return {loss.item(), detail::take_grads(disc_store_of(w))};
  }

  static void check_report(const LossReport& r, std::uint64_t step) {
    auto need = [step](double v, const std::string& what) {
      if (!std::isfinite(v)) throw NumericAbort(step, what);
    };
    for (std::size_t i = 0; i < r.matching_per_scale.size(); ++i) {
      need(r.matching_per_scale[i], "matching loss (scale " + std::to_string(i) + ")");
    }
    if (r.pixel) need(*r.pixel, "pixel loss");
    if (r.perceptual) {
      for (std::size_t i = 0; i < 4; ++i) need((*r.perceptual)[i], "perceptual loss (tap " + std::to_string(i + 1) + ")");
    }
    if (r.adversarial) need(*r.adversarial, "adversarial loss");
    need(r.task, "task loss");
    need(r.matching, "matching loss");
    need(r.total, "total loss");
  }

  static void check_grads(const ParameterStore& store, const std::vector<Tensor>& grads, std::uint64_t step) {
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i].empty() && !grads[i].all_finite()) throw NumericAbort(step, "gradient of " + store.params()[i].name);
    }
  }

  LossReport mean_report(const std::vector<SampleResult>& rs) const {
    const double inv = 1.0 / static_cast<double>(rs.size());
    LossReport m = rs[0].report;
    auto avg = [&](auto get) {
      double s = 0.0;
      for (const auto& r : rs) s += get(r.report);
      return s * inv;
    };
    m.total = avg([](const LossReport& r) { return r.total; });
    m.task = avg([](const LossReport& r) { return r.task; });
    m.matching = avg([](const LossReport& r) { return r.matching; });
    for (std::size_t i = 0; i < m.matching_per_scale.size(); ++i) {
      m.matching_per_scale[i] = avg([i](const LossReport& r) { return r.matching_per_scale[i]; });
    }
    if (m.pixel) m.pixel = avg([](const LossReport& r) { return *r.pixel; });
    if (m.perceptual) {
      for (std::size_t i = 0; i < 4; ++i) (*m.perceptual)[i] = avg([i](const LossReport& r) { return (*r.perceptual)[i]; });
    }
    if (m.adversarial) m.adversarial = avg([](const LossReport& r) { return *r.adversarial; });
    return m;
  }

  void save_disc(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << detail::kDiscMagic << '\n' << disc_->store.size() << ' ' << disc_->opt.state().step << '\n';
    for (std::size_t i = 0; i < disc_->store.size(); ++i) {
      os << disc_->store.params()[i].name << '\n';
      write_dtnsr(os, disc_->store.params()[i].var.value());
      write_dtnsr(os, disc_->opt.state().m[i]);
      write_dtnsr(os, disc_->opt.state().v[i]);
    }
    if (!os) throw FormatError("failed writing " + path);
  }

  void load_disc(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint uses a discriminator but " + path + " is missing");
    std::string magic;
    std::getline(is, magic);
    std::size_t count = 0;
    AdamState st;
    if (magic != detail::kDiscMagic || !(is >> count >> st.step) || count != disc_->store.size()) {
      throw FormatError(path + ": not a matching discriminator state");
    }
    is.ignore(1);
    for (std::size_t i = 0; i < count; ++i) {
      std::string name;
      std::getline(is, name);
      const Parameter& p = disc_->store.params()[i];
      if (name != p.name) throw FormatError(path + ": expected parameter " + p.name + ", found " + name);
      Tensor value = read_dtnsr<double>(is);
      st.m.push_back(read_dtnsr<double>(is));
      st.v.push_back(read_dtnsr<double>(is));
      if (value.shape() != p.var.shape() || st.m.back().shape() != p.var.shape() || st.v.back().shape() != p.var.shape()) {
        throw FormatError(path + ": shape mismatch for " + p.name);
      }
      p.var.mutable_value() = std::move(value);
    }
    disc_->opt = Adam(cfg_.train, std::move(st));
  }

  Config cfg_;
  std::vector<ToySample> data_;
  Model model_;
  Adam opt_;
  FeatureExtractor fx_;
  std::optional<Disc> disc_;
  std::vector<Worker> workers_;
};

// Reference-free evaluation of a model on a dataset (supervised mode).
inline EvalReport evaluate(const Model& model, const std::vector<ToySample>& data) {
  if (data.empty()) throw ConfigError("evaluate: dataset is empty");
  EvalReport e;
  std::size_t hits = 0, queries = 0;
  bool have_attn = false;
  for (const auto& s : data) {
    const auto in = detail::sample_inputs(model.cfg, s);
    ModelOutput out = model.forward(in.s_tgt, in.s_ref, in.i_ref);
    const ImageMetrics im = image_metrics(out.image.value(), s.i_tgt);
    e.l1 += im.l1;
    e.psnr += im.psnr;
    e.ssim += im.ssim;
    e.finest_matching += matching_loss(out, s.i_ref, s.i_tgt).per_scale[0].item();
    const auto& finest = out.blocks[0].back();
    if (!finest.attn || finest.attn->query_dims.size() != s.resolution() * s.resolution()) continue;
    have_attn = true;
    const SparseAttentionMap& m = *finest.attn;
    const Tensor& a = m.weights.value();
    for (std::size_t q = 0; q < m.queries(); ++q) {
      const auto cand = m.candidates.of(q);
      std::size_t best = 0;
      for (std::size_t sl = 1; sl < cand.size(); ++sl) {
        const double v = a[q * m.capacity() + sl], bv = a[q * m.capacity() + best];
        if (v > bv || (v == bv && cand[sl] < cand[best])) best = sl;
      }
      hits += cand[best] == s.ground_truth(q);
      ++queries;
    }
  }
  const double n = static_cast<double>(data.size());
  e.l1 /= n;
  e.psnr /= n;
  e.ssim /= n;
  e.finest_matching /= n;
  if (have_attn) e.argmax_hit = static_cast<double>(hits) / static_cast<double>(queries);
  return e;
}

}  // namespace dynast
