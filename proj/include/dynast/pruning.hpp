#pragma once

// Learned keep/drop gates on attention links. The forward pass uses the hard
// decision D = [P > 0]; the backward pass substitutes the sigmoid derivative.

#include <string>

#include "dynast/attention.hpp"
#include "dynast/numerics.hpp"

namespace dynast {

// Omega on target features, Phi on reference features; each conv1x1 -> relu -> conv1x1.
struct PruneHead {
  Conv omega1, omega2;
  Conv phi1, phi2;

  Var omega(const Var& f) const { return omega2(relu(omega1(f))); }
  Var phi(const Var& f) const { return phi2(relu(phi1(f))); }
};

inline PruneHead make_prune_head(const ParamBuilder& pb, const std::string& name, std::size_t tgt_channels,
                                 std::size_t ref_channels, std::size_t match_dim, double final_bias) {
  ParamBuilder b = pb.scope(name);
  return {make_conv(b, "omega1", {.in = tgt_channels, .out = match_dim}),
          make_conv(b, "omega2", {.in = match_dim, .out = match_dim, .bias_fill = final_bias}),
          make_conv(b, "phi1", {.in = ref_channels, .out = match_dim}),
          make_conv(b, "phi2", {.in = match_dim, .out = match_dim, .bias_fill = final_bias})};
}

// P[q, s] = Omega(F_tgt)_q . Phi(F_ref)_cand(q, s), on candidate slots only.
inline Var prune_logits(const Var& f_tgt, const Var& f_ref, const CandidateSet& cs, const PruneHead& head) {
  Var o = head.omega(f_tgt);
  Var p = head.phi(f_ref);
  const std::size_t d = o.shape()[0];
  return gather_dot(reshape(o, {d, o.size() / d}), reshape(p, {d, p.size() / d}), cs, 1.0);
}

// Strict threshold: D = 1 iff P > 0.
inline Tensor prune_decision(const Tensor& p) {
  Tensor d(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) d[i] = p[i] > 0.0 ? 1.0 : 0.0;
  return d;
}

inline double sigmoid_derivative(double p) {
  const double s = sigmoid_value(p);
  return s * (1.0 - s);
}

// Surrogate gradient of the hard gate: upstream * sigmoid'(P).
inline Tensor prune_backward(const Tensor& p, const Tensor& upstream) {
  if (p.shape() != upstream.shape()) {
    throw ShapeError("prune_backward: " + shape_str(p.shape()) + " vs " + shape_str(upstream.shape()));
  }
  Tensor g(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = upstream[i] * sigmoid_derivative(p[i]);
  return g;
}

// Hard forward, sigmoid backward. `valid` (optional) zeroes padded slots.
inline Var straight_through_gate(const Var& p, std::span<const std::uint8_t> valid = {}) {
  Tensor d = prune_decision(p.value());
  if (!valid.empty()) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= valid[i];
  }
  return make_op(std::move(d), {p}, [](Node& self) {
    Tensor* gp = input_grad(self, 0);
    if (!gp) return;
    const Tensor g = prune_backward(input_value(self, 0), self.grad);
    for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
  });
}

// A~ = D * A
inline Var apply_prune(const Var& a, const Var& d) { return mul(a, d); }

// Gates a map in place. `frozen` replays a recorded decision tensor as a constant.
inline void prune_map(SparseAttentionMap& m, const Var& f_tgt, const Var& f_ref, const PruneHead& head,
                      const Tensor* frozen = nullptr) {
  m.prune_logits = prune_logits(f_tgt, f_ref, m.candidates, head);
  Var d;
  if (frozen) {
    if (frozen->shape() != m.weights.shape()) throw ShapeError("prune_map: replayed decisions do not fit the map");
    d = Var::constant(*frozen);
  } else {
    const auto mask = m.candidates.slot_mask();
    d = straight_through_gate(m.prune_logits, mask);
  }
  m.decisions = d.value();
  m.gate = d;
  m.pruned = apply_prune(m.weights, d);
}

}  // namespace dynast
