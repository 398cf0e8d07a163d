#pragma once

// Parameter declaration and the small layer bundles the model is built from.
// A ParamBuilder either creates parameters in a store (drawing initial values
// in declaration order) or binds to the same names in an existing store, so a
// single build function serves both initialization and lookup.

#include <cmath>
#include <optional>
#include <string>

#include "dynast/numerics/linalg.hpp"
#include "dynast/numerics/norm.hpp"
#include "dynast/numerics/rng.hpp"

namespace dynast {

struct Init {
  enum class Kind { uniform_fan_in, constant } kind = Kind::uniform_fan_in;
  double value = 1.0;  // gain for uniform_fan_in, fill for constant

  // uniform(-s, s), s = gain * sqrt(1 / fan_in)
  static Init fan_in(double gain = 1.0) { return {Kind::uniform_fan_in, gain}; }
  static Init constant(double v) { return {Kind::constant, v}; }
};

class ParamBuilder {
 public:
  static ParamBuilder create(ParameterStore& store, Rng& rng) { return ParamBuilder(&store, &store, &rng, ""); }
  static ParamBuilder bind(const ParameterStore& store) { return ParamBuilder(nullptr, &store, nullptr, ""); }

  ParamBuilder scope(const std::string& name) const {
    return ParamBuilder(mutable_store_, store_, rng_, path(name));
  }

  std::string path(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

  bool creating() const { return mutable_store_ != nullptr; }

  Var tensor(const std::string& name, Shape shape, Init init, std::size_t fan_in) const {
    const std::string full = path(name);
    if (!creating()) {
      Var v = store_->get(full);
      if (v.shape() != shape) {
        throw ConfigError("parameter '" + full + "' has shape " + shape_str(v.shape()) + ", expected " +
                          shape_str(shape));
      }
      return v;
    }
    Tensor t(shape);
    if (init.kind == Init::Kind::constant) {
      t.fill(init.value);
    } else {
      const double s = init.value * std::sqrt(1.0 / static_cast<double>(fan_in));
      for (auto& v : t.span()) v = rng_->uniform(-s, s);
    }
    return mutable_store_->add(full, std::move(t));
  }

 private:
  ParamBuilder(ParameterStore* ms, const ParameterStore* s, Rng* rng, std::string prefix)
      : mutable_store_(ms), store_(s), rng_(rng), prefix_(std::move(prefix)) {}

  ParameterStore* mutable_store_;
  const ParameterStore* store_;
  Rng* rng_;
  std::string prefix_;
};

struct Conv {
  Var weight;  // [out, in, k, k]
  Var bias;    // [out]
  std::size_t stride = 1;
  std::size_t pad = 0;

  Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, pad); }
  std::size_t out_channels() const { return weight.shape()[0]; }
};

struct ConvSpec {
  std::size_t in = 0, out = 0, kernel = 1, stride = 1;
  std::optional<std::size_t> pad;  // default: kernel / 2 ("same" for odd kernels at stride 1)
  double weight_gain = 1.0;
  std::optional<double> bias_fill;  // default: fan-in uniform
};

inline Conv make_conv(const ParamBuilder& pb, const std::string& name, const ConvSpec& spec) {
  ParamBuilder b = pb.scope(name);
  const std::size_t fan_in = spec.in * spec.kernel * spec.kernel;
  Conv c;
  c.weight = b.tensor("weight", {spec.out, spec.in, spec.kernel, spec.kernel}, Init::fan_in(spec.weight_gain), fan_in);
  c.bias = b.tensor("bias", {spec.out}, spec.bias_fill ? Init::constant(*spec.bias_fill) : Init::fan_in(), fan_in);
  c.stride = spec.stride;
  c.pad = spec.pad.value_or(spec.kernel / 2);
  return c;
}

struct LayerNorm {
  Var gain;
  Var bias;
  Var operator()(const Var& x) const { return layer_norm(x, gain, bias); }
};

inline LayerNorm make_layer_norm(const ParamBuilder& pb, const std::string& name, std::size_t channels) {
  ParamBuilder b = pb.scope(name);
  return {b.tensor("gain", {channels}, Init::constant(1.0), channels),
          b.tensor("bias", {channels}, Init::constant(0.0), channels)};
}

}  // namespace dynast
