#pragma once

// Checkpoint file:
//   DYNAST-CKPT v1
//   config <bytes>\n<config text>
//   params <count>
//   <name> <ndim> <d0> ... f64          (one manifest line per parameter)
//   <DTNSR record per parameter, manifest order>
//   optimizer <step>|none
//   <DTNSR m, DTNSR v per parameter, when present>

#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "dynast/blocks.hpp"
#include "dynast/config.hpp"
#include "dynast/optim.hpp"

namespace dynast {

struct Checkpoint {
  Config config;
  Model model;
  std::optional<AdamState> optimizer;
};

inline void save_checkpoint(const std::string& path, const Config& cfg, const ParameterStore& store,
                            const AdamState* opt = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  const std::string text = config_to_text(cfg);
  os << "DYNAST-CKPT v1\n" << "config " << text.size() << '\n' << text;
  os << "params " << store.size() << '\n';
  for (const auto& p : store) {
    os << p.name << ' ' << p.var.shape().size();
    for (auto d : p.var.shape()) os << ' ' << d;
    os << " f64\n";
  }
  for (const auto& p : store) write_dtnsr(os, p.var.value());
  if (opt) {
    os << "optimizer " << opt->step << '\n';
    for (std::size_t i = 0; i < store.size(); ++i) {
      write_dtnsr(os, opt->m[i]);
      write_dtnsr(os, opt->v[i]);
    }
  } else {
    os << "optimizer none\n";
  }
  if (!os) throw FormatError("failed writing " + path);
}

namespace detail {

inline std::string expect_line(std::istream& is, const std::string& what) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("checkpoint: missing " + what);
  return line;
}

}  // namespace detail

// Rebuilds the model described by the embedded config and requires the stored
// parameters to match it exactly: same names, same order, same shapes.
inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  if (detail::expect_line(is, "magic") != "DYNAST-CKPT v1") throw FormatError("checkpoint: bad magic in " + path);
  std::istringstream hdr(detail::expect_line(is, "config header"));
  std::string tag;
  std::size_t bytes = 0;
  if (!(hdr >> tag >> bytes) || tag != "config") throw FormatError("checkpoint: bad config header");
  std::string text(bytes, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(bytes))) throw FormatError("checkpoint: truncated config");
  const Config cfg = parse_config(text);

  std::istringstream ph(detail::expect_line(is, "params header"));
  std::size_t count = 0;
  if (!(ph >> tag >> count) || tag != "params") throw FormatError("checkpoint: bad params header");
  Model expected = Model::create(cfg.model, 0);
  if (count != expected.store.size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " parameters, model expects " +
                      std::to_string(expected.store.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ms(detail::expect_line(is, "manifest"));
    std::string name, dtype;
    std::size_t ndim = 0;
    ms >> name >> ndim;
    Shape shape(ndim);
    for (auto& d : shape) ms >> d;
    ms >> dtype;
    const Parameter& want = expected.store.params()[i];
    if (!ms || name != want.name || shape != want.var.shape() || dtype != "f64") {
      throw FormatError("checkpoint: manifest entry " + std::to_string(i) + " is '" + name + " " + shape_str(shape) +
                        "', model expects '" + want.name + " " + shape_str(want.var.shape()) + "'");
    }
  }
  ParameterStore store;
  for (const auto& p : expected.store) {
    Tensor t = read_dtnsr<double>(is);
    if (t.shape() != p.var.shape()) throw FormatError("checkpoint: payload shape mismatch for " + p.name);
    store.add(p.name, std::move(t));
  }
  Checkpoint ck{cfg, Model::bind(cfg.model, std::move(store)), std::nullopt};
  std::istringstream os_line(detail::expect_line(is, "optimizer header"));
  std::string step;
  if (!(os_line >> tag >> step) || tag != "optimizer") throw FormatError("checkpoint: bad optimizer header");
  if (step != "none") {
    AdamState st;
    st.step = std::stoull(step);
    for (const auto& p : ck.model.store) {
      st.m.push_back(read_dtnsr<double>(is));
      st.v.push_back(read_dtnsr<double>(is));
      if (st.m.back().shape() != p.var.shape() || st.v.back().shape() != p.var.shape()) {
        throw FormatError("checkpoint: optimizer state shape mismatch for " + p.name);
      }
    }
    ck.optimizer = std::move(st);
  }
  return ck;
}

}  // namespace dynast
