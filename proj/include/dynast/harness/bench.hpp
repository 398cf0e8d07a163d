#pragma once

// Dense vs sparse attention cost at growing token counts, single precision.
// The dense path scores every (query, reference) pair and normalises; the
// sparse path is one inter-scale block followed by one inner-scale block at the
// same grid: inherit 4k candidates from a coarse top-k, score, normalise,
// select top-k, propagate 5k candidates, score, normalise. The coarse top-k is
// fixed input and built outside the timed region.

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynast/attention.hpp"

namespace dynast {

struct BenchRow {
  std::size_t n = 0;
  double dense_ms = 0.0, sparse_ms = 0.0;  // best of the trials
  std::uint64_t dense_macs = 0, dense_macs_closed_form = 0;
  std::uint64_t sparse_macs = 0, sparse_inter_macs = 0, sparse_inner_macs = 0;
  std::uint64_t inter_mac_bound = 0, inner_mac_bound = 0;  // N*4k*(d+1), N*5k*(d+1)
  std::size_t sparse_peak_slots = 0, slot_bound = 0;        // slot_bound = N*5k
};

struct BenchReport {
  std::size_t k = 0, d = 0, trials = 0;
  std::vector<BenchRow> rows;
  double slope_dense = 0.0, slope_sparse = 0.0;

  bool macs_exact() const {
    for (const auto& r : rows) {
      if (r.dense_macs != r.dense_macs_closed_form) return false;
    }
    return true;
  }
  bool within_bounds() const {
    for (const auto& r : rows) {
      if (r.sparse_inter_macs > r.inter_mac_bound || r.sparse_inner_macs > r.inner_mac_bound) return false;
      if (r.sparse_peak_slots > r.slot_bound) return false;
    }
    return true;
  }
  bool monotone() const {
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].dense_macs < rows[i - 1].dense_macs || rows[i].sparse_macs < rows[i - 1].sparse_macs) return false;
    }
    return true;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["k"] = k;
    j["d"] = d;
    j["trials"] = trials;
    auto& arr = j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      arr.push_back({{"n", r.n},
                     {"dense_ms", r.dense_ms},
                     {"sparse_ms", r.sparse_ms},
                     {"dense_macs", r.dense_macs},
                     {"dense_macs_closed_form", r.dense_macs_closed_form},
                     {"sparse_macs", r.sparse_macs},
                     {"sparse_inter_macs", r.sparse_inter_macs},
                     {"sparse_inner_macs", r.sparse_inner_macs},
                     {"inter_mac_bound", r.inter_mac_bound},
                     {"inner_mac_bound", r.inner_mac_bound},
                     {"sparse_peak_slots", r.sparse_peak_slots},
                     {"slot_bound", r.slot_bound}});
    }
    j["slope_dense"] = slope_dense;
    j["slope_sparse"] = slope_sparse;
    return j;
  }
};

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("loglog_slope: need at least two points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

namespace detail {

inline std::vector<float> random_rows(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<float> v(n * d);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

template <typename F>
double best_ms(std::size_t trials, F&& f) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < trials; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

}  // namespace detail

// Token counts must be squares of even numbers (the grid has a coarse parent).
inline BenchReport bench_attention(const std::vector<std::size_t>& sizes, std::size_t k, std::size_t trials,
                                   std::size_t d = 32, std::uint64_t seed = 0) {
  if (k == 0 || trials == 0 || sizes.size() < 2) throw ConfigError("bench: need k >= 1, trials >= 1 and two sizes");
  BenchReport rep{k, d, trials, {}, 0.0, 0.0};
  const float tau = 1.0f / std::sqrt(static_cast<float>(d));
  for (std::size_t n : sizes) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n || side % 2 != 0 || side < 2) {
      throw ConfigError("bench: token count " + std::to_string(n) + " is not the square of an even number");
    }
    Rng rng(seed ^ n);
    const auto q = detail::random_rows(n, d, rng), kr = detail::random_rows(n, d, rng);
    BenchRow row;
    row.n = n;

    std::vector<float> scores(n * n);
    attention_stats().reset();
    kernels::dense_scores(q.data(), kr.data(), n, n, d, tau, scores.data());
    kernels::softmax_slots(scores.data(), n, n);
    row.dense_macs = attention_stats().score_macs;
    row.dense_macs_closed_form = static_cast<std::uint64_t>(n) * n * (d + 1);
    row.dense_ms = detail::best_ms(trials, [&] {
      kernels::dense_scores(q.data(), kr.data(), n, n, d, tau, scores.data());
      kernels::softmax_slots(scores.data(), n, n);
    });
    scores = {};

    const GridDims fine{side, side}, coarse{side / 2, side / 2};
    TopK parent;
    parent.k = k;
    parent.idx.assign(coarse.size() * k, 0);
    parent.count.assign(coarse.size(), 0);
    for (std::size_t c = 0; c < coarse.size(); ++c) {
      const std::size_t want = std::min(k, coarse.size());
      while (parent.count[c] < want) {
        const auto m = static_cast<Index>(rng.below(coarse.size()));
        const auto row_of = parent.of(c);
        if (std::find(row_of.begin(), row_of.end(), m) != row_of.end()) continue;
        parent.idx[c * k + parent.count[c]++] = m;
      }
    }
    auto sparse_path = [&](bool count) {
      CandidateSet inter = inherit_candidates_interscale(parent, coarse, coarse, fine);
      std::vector<float> s1(inter.queries() * inter.capacity());
      const auto m0 = attention_stats().score_macs;
      kernels::gather_scores(q.data(), kr.data(), d, inter, tau, s1.data());
      const auto m1 = attention_stats().score_macs;
      kernels::softmax_slots(s1.data(), n, inter.capacity(), &inter);
      CandidateSet inner = propagate_candidates_innerscale(topk_rows(s1.data(), inter, k), fine, fine);
      std::vector<float> s2(inner.queries() * inner.capacity());
      kernels::gather_scores(q.data(), kr.data(), d, inner, tau, s2.data());
      kernels::softmax_slots(s2.data(), n, inner.capacity(), &inner);
      if (count) {
        row.sparse_inter_macs = m1 - m0;
        row.sparse_inner_macs = attention_stats().score_macs - m1;
      }
    };
    attention_stats().reset();
    sparse_path(true);
    row.sparse_macs = row.sparse_inter_macs + row.sparse_inner_macs;
    row.sparse_peak_slots = attention_stats().peak_candidate_slots;
    row.inter_mac_bound = static_cast<std::uint64_t>(n) * 4 * k * (d + 1);
    row.inner_mac_bound = static_cast<std::uint64_t>(n) * 5 * k * (d + 1);
    row.slot_bound = n * 5 * k;
    row.sparse_ms = detail::best_ms(trials, [&] { sparse_path(false); });
    rep.rows.push_back(row);
  }
  std::vector<double> ns, dt, st;
  for (const auto& r : rep.rows) {
    ns.push_back(static_cast<double>(r.n));
    dt.push_back(r.dense_ms);
    st.push_back(r.sparse_ms);
  }
  rep.slope_dense = loglog_slope(ns, dt);
  rep.slope_sparse = loglog_slope(ns, st);
  return rep;
}

}  // namespace dynast
