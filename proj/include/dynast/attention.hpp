#pragma once

// Dense attention at the coarsest scale and candidate-restricted attention
// elsewhere. Candidate sets are padded rectangular index arrays (queries x
// capacity) with a per-query count; every per-slot quantity (correlation,
// weights, decisions) uses the same [queries, capacity] layout. Padded slots
// hold zeros.
//
// The raw kernels are templated on the scalar so the benchmark can run them in
// single precision; the Var wrappers are double only.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynast/numerics.hpp"

namespace dynast {

using Index = std::uint32_t;

struct GridDims {
  std::size_t h = 0, w = 0;
  std::size_t size() const { return h * w; }
  bool operator==(const GridDims&) const = default;
};

inline GridDims grid_of(const Shape& s) {
  if (s.size() != 3) throw ShapeError("expected [C,H,W], got " + shape_str(s));
  return {s[1], s[2]};
}

// Work counters, per thread. score_macs counts (d + 1) per scored (query,
// reference) pair: d for the dot product, one for the temperature scale.
struct AttentionStats {
  std::uint64_t score_macs = 0;
  std::size_t peak_candidate_slots = 0;
  void reset() { *this = {}; }
};

inline AttentionStats& attention_stats() {
  thread_local AttentionStats stats;
  return stats;
}

class CandidateSet {
 public:
  CandidateSet() = default;
  CandidateSet(std::size_t queries, std::size_t capacity, std::size_t n_ref)
      : queries_(queries), capacity_(capacity), n_ref_(n_ref), idx_(queries * capacity, 0), count_(queries, 0) {
    if (capacity == 0 || n_ref == 0) throw ShapeError("CandidateSet: capacity and reference count must be positive");
    auto& st = attention_stats();
    st.peak_candidate_slots = std::max(st.peak_candidate_slots, idx_.size());
  }

  // Every reference position, in order, for every query.
  static CandidateSet full(std::size_t queries, std::size_t n_ref) {
    CandidateSet c(queries, n_ref, n_ref);
    for (std::size_t q = 0; q < queries; ++q) {
      for (std::size_t r = 0; r < n_ref; ++r) c.idx_[q * n_ref + r] = static_cast<Index>(r);
      c.count_[q] = static_cast<Index>(n_ref);
    }
    c.full_ = true;
    return c;
  }

  // Appends unless already present (first occurrence wins). Returns whether it was added.
  bool push(std::size_t q, std::size_t ref) {
    if (q >= queries_ || ref >= n_ref_) {
      throw std::out_of_range("CandidateSet::push: query " + std::to_string(q) + " ref " + std::to_string(ref) +
                              " outside " + std::to_string(queries_) + " x " + std::to_string(n_ref_));
    }
    Index* row = &idx_[q * capacity_];
    const Index n = count_[q];
    for (Index s = 0; s < n; ++s) {
      if (row[s] == ref) return false;
    }
    if (n == capacity_) throw std::length_error("CandidateSet::push: query " + std::to_string(q) + " is full");
    row[n] = static_cast<Index>(ref);
    ++count_[q];
    return true;
  }

  std::size_t queries() const { return queries_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t n_ref() const { return n_ref_; }
  bool is_full() const { return full_; }
  std::size_t count(std::size_t q) const { return count_[q]; }
  std::span<const Index> of(std::size_t q) const { return {&idx_[q * capacity_], count_[q]}; }
  Index at(std::size_t q, std::size_t slot) const { return idx_[q * capacity_ + slot]; }
  const std::vector<Index>& storage() const { return idx_; }

  std::size_t total() const {
    std::size_t t = 0;
    for (Index c : count_) t += c;
    return t;
  }

  std::size_t max_count() const {
    Index m = 0;
    for (Index c : count_) m = std::max(m, c);
    return m;
  }

  // 1 on valid slots; empty when every slot is valid (no masking needed).
  std::vector<std::uint8_t> slot_mask() const {
    if (total() == queries_ * capacity_) return {};
    std::vector<std::uint8_t> m(queries_ * capacity_, 0);
    for (std::size_t q = 0; q < queries_; ++q) std::fill_n(&m[q * capacity_], count_[q], std::uint8_t{1});
    return m;
  }

 private:
  std::size_t queries_ = 0, capacity_ = 0, n_ref_ = 0;
  std::vector<Index> idx_;
  std::vector<Index> count_;
  bool full_ = false;
};

struct SparseAttentionMap {
  CandidateSet candidates;
  GridDims query_dims, ref_dims;
  Var correlation;   // C [Nq, cap], temperature-scaled, before softmax
  Var weights;       // A [Nq, cap]
  Var prune_logits;  // P [Nq, cap]; empty when the block has no prune head
  Tensor decisions;  // D [Nq, cap], 0/1, padded slots 0
  Var gate;          // D as a graph value; carries the straight-through path when pruned
  Var pruned;        // D * A

  std::size_t queries() const { return candidates.queries(); }
  std::size_t capacity() const { return candidates.capacity(); }
};

namespace kernels {

// out[q, s] = scale * <q_rows[q], k_rows[cand(q, s)]>, rows are d-vectors.
template <typename T>
void gather_scores(const T* q_rows, const T* k_rows, std::size_t d, const CandidateSet& cs, T scale, T* out) {
  const std::size_t cap = cs.capacity();
  for (std::size_t q = 0; q < cs.queries(); ++q) {
    const T* qv = q_rows + q * d;
    T* o = out + q * cap;
    const auto cand = cs.of(q);
    for (std::size_t s = 0; s < cand.size(); ++s) {
      const T* kv = k_rows + static_cast<std::size_t>(cand[s]) * d;
      T acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += qv[c] * kv[c];
      o[s] = scale * acc;
    }
    std::fill(o + cand.size(), o + cap, T(0));
  }
  attention_stats().score_macs += static_cast<std::uint64_t>(cs.total()) * (d + 1);
}

// out[nq, nr] = scale * Q K^T
template <typename T>
void dense_scores(const T* q_rows, const T* k_rows, std::size_t nq, std::size_t nr, std::size_t d, T scale, T* out) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> Q(q_rows, static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(d));
  Eigen::Map<const Mat> K(k_rows, static_cast<Eigen::Index>(nr), static_cast<Eigen::Index>(d));
  Eigen::Map<Mat> O(out, static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(nr));
  O.noalias() = Q * K.transpose();
  O *= scale;
  attention_stats().score_macs += static_cast<std::uint64_t>(nq) * nr * (d + 1);
}

// In-place stabilized softmax over the first counts[q] entries of each row.
template <typename T>
void softmax_slots(T* rows, std::size_t nq, std::size_t cap, const CandidateSet* cs = nullptr) {
  for (std::size_t q = 0; q < nq; ++q) {
    T* r = rows + q * cap;
    const std::size_t n = cs ? cs->count(q) : cap;
    T m = r[0];
    for (std::size_t s = 1; s < n; ++s) m = std::max(m, r[s]);
    T z = 0;
    for (std::size_t s = 0; s < n; ++s) z += (r[s] = std::exp(r[s] - m));
    for (std::size_t s = 0; s < n; ++s) r[s] /= z;
  }
}

}  // namespace kernels

// [d, N] -> [N, d] copy so gathered rows are contiguous.
inline Tensor rows_of(const Tensor& x) {
  const std::size_t d = x.dim(0), n = x.size() / d;
  Tensor t({n, d}, uninit);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t i = 0; i < n; ++i) t[i * d + c] = x[c * n + i];
  }
  return t;
}

// [N, d] rows accumulated back into a [d, N] buffer.
inline void add_columns(const Tensor& rows, std::size_t d, std::size_t n, Tensor& out) {
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t i = 0; i < n; ++i) out[c * n + i] += rows[i * d + c];
  }
}

// out[q, s] = scale * sum_c q[c, q] * k[c, cand(q, s)] for q [d, Nq], k [d, Nr].
inline Var gather_dot(const Var& q, const Var& k, const CandidateSet& cs, double scale) {
  if (q.shape().size() != 2 || k.shape().size() != 2 || q.shape()[0] != k.shape()[0]) {
    throw ShapeError("gather_dot: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  }
  const std::size_t d = q.shape()[0], nq = q.shape()[1], nr = k.shape()[1];
  if (cs.queries() != nq || cs.n_ref() != nr) {
    throw ShapeError("gather_dot: candidate set " + std::to_string(cs.queries()) + " x " + std::to_string(cs.n_ref()) +
                     " does not fit " + shape_str(q.shape()) + " / " + shape_str(k.shape()));
  }
  const std::size_t cap = cs.capacity();
  Tensor qr = rows_of(q.value()), kr = rows_of(k.value());
  Tensor out({nq, cap});
  kernels::gather_scores(qr.data(), kr.data(), d, cs, scale, out.data());
  return make_op(std::move(out), {q, k}, [cs, qr = std::move(qr), kr = std::move(kr), d, nq, nr, cap, scale](Node& self) {
    Tensor* gq = input_grad(self, 0);
    Tensor* gk = input_grad(self, 1);
    Tensor dq, dk;
    if (gq) dq = Tensor({nq, d});
    if (gk) dk = Tensor({nr, d});
    for (std::size_t i = 0; i < nq; ++i) {
      const auto cand = cs.of(i);
      const double* qi = qr.data() + i * d;
      for (std::size_t s = 0; s < cand.size(); ++s) {
        const double g = scale * self.grad[i * cap + s];
        if (g == 0.0) continue;
        const std::size_t r = cand[s];
        if (gq) {
          double* dst = dq.data() + i * d;
          const double* kv = kr.data() + r * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += g * kv[c];
        }
        if (gk) {
          double* dst = dk.data() + r * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += g * qi[c];
        }
      }
    }
    if (gq) add_columns(dq, d, nq, *gq);
    if (gk) add_columns(dk, d, nr, *gk);
  });
}

// out[c, q] = sum_s w[q, s] * v[c, cand(q, s)] for w [Nq, cap], v [C, Nr].
inline Var sparse_aggregate(const Var& w, const Var& v, const CandidateSet& cs) {
  if (w.shape() != Shape{cs.queries(), cs.capacity()} || v.shape().size() != 2 || v.shape()[1] != cs.n_ref()) {
    throw ShapeError("sparse_aggregate: weights " + shape_str(w.shape()) + ", values " + shape_str(v.shape()));
  }
  const std::size_t channels = v.shape()[0], nq = cs.queries(), nr = cs.n_ref(), cap = cs.capacity();
  const Tensor& wv = w.value();
  Tensor vr = rows_of(v.value());
  Tensor acc({nq, channels});
  for (std::size_t q = 0; q < nq; ++q) {
    const auto cand = cs.of(q);
    double* o = acc.data() + q * channels;
    for (std::size_t s = 0; s < cand.size(); ++s) {
      const double a = wv[q * cap + s];
      if (a == 0.0) continue;
      const double* src = vr.data() + static_cast<std::size_t>(cand[s]) * channels;
      for (std::size_t c = 0; c < channels; ++c) o[c] += a * src[c];
    }
  }
  Tensor out = rows_of(acc);
  return make_op(std::move(out), {w, v}, [cs, channels, nq, nr, cap, vr = std::move(vr)](Node& self) {
    Tensor* gw = input_grad(self, 0);
    Tensor* gv = input_grad(self, 1);
    const Tensor& wv = input_value(self, 0);
    const Tensor gr = rows_of(self.grad);
    Tensor dvr;
    if (gv) dvr = Tensor({nr, channels});
    for (std::size_t q = 0; q < nq; ++q) {
      const auto cand = cs.of(q);
      const double* g = gr.data() + q * channels;
      for (std::size_t s = 0; s < cand.size(); ++s) {
        const std::size_t r = cand[s];
        if (gw) {
          const double* src = vr.data() + r * channels;
          double dot = 0.0;
          for (std::size_t c = 0; c < channels; ++c) dot += g[c] * src[c];
          (*gw)[q * cap + s] += dot;
        }
        if (gv) {
          const double a = wv[q * cap + s];
          if (a == 0.0) continue;
          double* dst = dvr.data() + r * channels;
          for (std::size_t c = 0; c < channels; ++c) dst[c] += a * g[c];
        }
      }
    }
    if (gv) add_columns(dvr, channels, nr, *gv);
  });
}

// alpha / beta: 1x1 convolutions onto a shared score space.
struct AttentionProjections {
  Conv alpha;
  Conv beta;
};

namespace detail {

inline std::pair<Var, Var> project(const Var& tgt_pos, const Var& ref_pos, const AttentionProjections& p) {
  if (tgt_pos.shape().size() != 3 || ref_pos.shape().size() != 3 || tgt_pos.shape()[0] != ref_pos.shape()[0]) {
    throw ShapeError("attention: channel mismatch " + shape_str(tgt_pos.shape()) + " vs " + shape_str(ref_pos.shape()));
  }
  Var q = p.alpha(instance_norm(tgt_pos));
  Var k = p.beta(instance_norm(ref_pos));
  const std::size_t d = q.shape()[0];
  return {reshape(q, {d, q.size() / d}), reshape(k, {d, k.size() / d})};
}

inline void finish_map(SparseAttentionMap& m) {
  m.decisions = Tensor(m.correlation.shape());
  for (std::size_t q = 0; q < m.queries(); ++q) {
    std::fill_n(&m.decisions[q * m.capacity()], m.candidates.count(q), 1.0);
  }
  m.gate = Var::constant(m.decisions);
  m.pruned = m.weights;
}

}  // namespace detail

// A = softmax(tau * alpha(IN(F_tgt)) . beta(IN(F_ref))^T) over every reference position.
inline SparseAttentionMap dense_attention(const Var& tgt_pos, const Var& ref_pos, const AttentionProjections& p,
                                          double tau) {
  auto [q, k] = detail::project(tgt_pos, ref_pos, p);
  SparseAttentionMap m;
  m.query_dims = grid_of(tgt_pos.shape());
  m.ref_dims = grid_of(ref_pos.shape());
  m.candidates = CandidateSet::full(m.query_dims.size(), m.ref_dims.size());
  m.correlation = scale(matmul(transpose2d(q), k), tau);
  attention_stats().score_macs += static_cast<std::uint64_t>(m.query_dims.size()) * m.ref_dims.size() * (q.shape()[0] + 1);
  m.weights = softmax_rows(m.correlation).probs;
  detail::finish_map(m);
  return m;
}

// Same scores, gathered on candidate slots only; softmax over each query's valid slots.
inline SparseAttentionMap sparse_attention(const Var& tgt_pos, const Var& ref_pos, CandidateSet candidates,
                                           const AttentionProjections& p, double tau) {
  auto [q, k] = detail::project(tgt_pos, ref_pos, p);
  SparseAttentionMap m;
  m.query_dims = grid_of(tgt_pos.shape());
  m.ref_dims = grid_of(ref_pos.shape());
  for (std::size_t i = 0; i < candidates.queries(); ++i) {
    if (candidates.count(i) == 0) throw std::logic_error("sparse_attention: query " + std::to_string(i) + " has no candidates");
  }
  m.candidates = std::move(candidates);
  m.correlation = gather_dot(q, k, m.candidates, tau);
  const auto mask = m.candidates.slot_mask();
  m.weights = softmax_rows(m.correlation, mask).probs;
  detail::finish_map(m);
  return m;
}

struct TopK {
  std::size_t k = 0;
  std::vector<Index> idx;    // [Nq, k], padded
  std::vector<Index> count;  // per query, < k only when the query had fewer candidates
  bool short_list = false;

  std::size_t queries() const { return count.size(); }
  std::span<const Index> of(std::size_t q) const { return {&idx[q * k], count[q]}; }
};

// k largest values per query over its valid slots; ties go to the smaller reference index.
template <typename T>
TopK topk_rows(const T* values, const CandidateSet& cs, std::size_t k) {
  if (k == 0) throw ConfigError("topk: k must be >= 1");
  TopK t;
  t.k = k;
  t.idx.assign(cs.queries() * k, 0);
  t.count.assign(cs.queries(), 0);
  std::vector<std::pair<T, Index>> row;
  for (std::size_t q = 0; q < cs.queries(); ++q) {
    const auto cand = cs.of(q);
    const T* v = values + q * cs.capacity();
    row.clear();
    for (std::size_t s = 0; s < cand.size(); ++s) row.emplace_back(v[s], cand[s]);
    const std::size_t take = std::min(k, row.size());
    if (take < k) t.short_list = true;
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(take), row.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    for (std::size_t s = 0; s < take; ++s) t.idx[q * k + s] = row[s].second;
    t.count[q] = static_cast<Index>(take);
  }
  return t;
}

inline TopK topk_select(const SparseAttentionMap& m, std::size_t k, bool from_pruned = false) {
  return topk_rows((from_pruned ? m.pruned : m.weights).value().data(), m.candidates, k);
}

// Coarse (r, c) -> fine {(2r,2c), (2r,2c+1), (2r+1,2c), (2r+1,2c+1)}.
inline std::array<Index, 4> upscale_index(std::size_t coarse_index, GridDims coarse) {
  if (coarse_index >= coarse.size()) {
    throw std::out_of_range("upscale_index: " + std::to_string(coarse_index) + " outside a " + std::to_string(coarse.h) +
                            "x" + std::to_string(coarse.w) + " grid");
  }
  const std::size_t r = coarse_index / coarse.w, c = coarse_index % coarse.w, fw = 2 * coarse.w;
  const auto at = [fw](std::size_t rr, std::size_t cc) { return static_cast<Index>(rr * fw + cc); };
  return {at(2 * r, 2 * c), at(2 * r, 2 * c + 1), at(2 * r + 1, 2 * c), at(2 * r + 1, 2 * c + 1)};
}

// Each fine query takes its parent's top-k matches, each expanded to its four children.
inline CandidateSet inherit_candidates_interscale(const TopK& parent, GridDims coarse_q, GridDims coarse_ref,
                                                  GridDims fine_q) {
  if (fine_q.h != 2 * coarse_q.h || fine_q.w != 2 * coarse_q.w || parent.queries() != coarse_q.size()) {
    throw ShapeError("inherit_candidates_interscale: fine grid must be exactly twice the coarse grid");
  }
  const GridDims fine_ref{2 * coarse_ref.h, 2 * coarse_ref.w};
  CandidateSet cs(fine_q.size(), 4 * parent.k, fine_ref.size());
  for (std::size_t r = 0; r < fine_q.h; ++r) {
    for (std::size_t c = 0; c < fine_q.w; ++c) {
      const std::size_t q = r * fine_q.w + c;
      for (Index m : parent.of((r / 2) * coarse_q.w + c / 2)) {
        for (Index child : upscale_index(m, coarse_ref)) cs.push(q, child);
      }
    }
  }
  return cs;
}

inline CandidateSet inherit_candidates_interscale(const SparseAttentionMap& prev, std::size_t k, GridDims fine_q,
                                                  bool from_pruned = false) {
  return inherit_candidates_interscale(topk_select(prev, k, from_pruned), prev.query_dims, prev.ref_dims, fine_q);
}

// Neighbour order: self, up, down, left, right.
inline constexpr std::array<std::array<int, 2>, 5> kNeighbourOffsets{{{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}}};

// Neighbour n = p + o proposes each of its matches m shifted by p - n = -o.
inline CandidateSet propagate_candidates_innerscale(const TopK& prev, GridDims q_dims, GridDims ref_dims) {
  if (prev.queries() != q_dims.size()) throw ShapeError("propagate_candidates_innerscale: top-k does not match the grid");
  CandidateSet cs(q_dims.size(), 5 * prev.k, ref_dims.size());
  const auto H = static_cast<long>(q_dims.h), W = static_cast<long>(q_dims.w);
  const auto RH = static_cast<long>(ref_dims.h), RW = static_cast<long>(ref_dims.w);
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      const auto q = static_cast<std::size_t>(r * W + c);
      for (const auto& o : kNeighbourOffsets) {
        const long nr = r + o[0], nc = c + o[1];
        if (nr < 0 || nr >= H || nc < 0 || nc >= W) continue;
        for (Index m : prev.of(static_cast<std::size_t>(nr * W + nc))) {
          const long mr = static_cast<long>(m) / RW - o[0], mc = static_cast<long>(m) % RW - o[1];
          if (mr < 0 || mr >= RH || mc < 0 || mc >= RW) continue;
          cs.push(q, static_cast<std::size_t>(mr * RW + mc));
        }
      }
      if (cs.count(q) == 0) {
        throw std::logic_error("propagate_candidates_innerscale: query " + std::to_string(q) + " has no proposals");
      }
    }
  }
  return cs;
}

inline CandidateSet propagate_candidates_innerscale(const SparseAttentionMap& prev, std::size_t k,
                                                    bool from_pruned = false) {
  return propagate_candidates_innerscale(topk_select(prev, k, from_pruned), prev.query_dims, prev.ref_dims);
}

// D-masked attention scattered to a dense [Nq, Nr] matrix (for dumps and oracles).
inline Tensor scatter_dense(const SparseAttentionMap& m, const Tensor& per_slot) {
  Tensor out({m.queries(), m.candidates.n_ref()});
  for (std::size_t q = 0; q < m.queries(); ++q) {
    const auto cand = m.candidates.of(q);
    for (std::size_t s = 0; s < cand.size(); ++s) out[q * m.candidates.n_ref() + cand[s]] = per_slot[q * m.capacity() + s];
  }
  return out;
}

}  // namespace dynast
