#pragma once

// DTNSR v1 tensor dump:
//   ASCII header line "DTNSR v1 <ndim> <d0> ... <dn-1> <f32|f64>\n"
//   followed by the row-major payload in little-endian byte order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>

#include "dynast/numerics/tensor.hpp"

namespace dynast {

namespace detail {

template <typename U>
U byteswap_value(U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <typename U>
void write_le(std::ostream& os, const U* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(U)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      U v = byteswap_value(p[i]);
      os.write(reinterpret_cast<const char*>(&v), sizeof(U));
    }
  }
}

template <typename U>
void read_le(std::istream& is, U* p, std::size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(U)));
  if (!is) throw FormatError("DTNSR: truncated payload");
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) p[i] = byteswap_value(p[i]);
  }
}

template <typename T>
constexpr const char* dtype_tag() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<T, double>, "DTNSR stores f32 or f64");
    return "f64";
  }
}

}  // namespace detail

struct DumpHeader {
  Shape shape;
  std::string dtype;
};

template <typename T>
void write_dtnsr(std::ostream& os, const BasicTensor<T>& t) {
  os << "DTNSR v1 " << t.ndim();
  for (auto d : t.shape()) os << ' ' << d;
  os << ' ' << detail::dtype_tag<T>() << '\n';
  detail::write_le(os, t.data(), t.size());
}

inline DumpHeader read_dtnsr_header(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("DTNSR: missing header");
  std::istringstream hs(line);
  std::string magic, version;
  std::size_t ndim = 0;
  hs >> magic >> version >> ndim;
  if (magic != "DTNSR" || version != "v1" || !hs) throw FormatError("DTNSR: bad header '" + line + "'");
  DumpHeader h;
  h.shape.resize(ndim);
  for (auto& d : h.shape) hs >> d;
  hs >> h.dtype;
  if (!hs || (h.dtype != "f32" && h.dtype != "f64")) {
    throw FormatError("DTNSR: bad header '" + line + "'");
  }
  std::string rest;
  if (hs >> rest) throw FormatError("DTNSR: trailing header fields in '" + line + "'");
  return h;
}

// Reads one record, converting the payload to T if the stored dtype differs.
template <typename T>
BasicTensor<T> read_dtnsr(std::istream& is) {
  DumpHeader h = read_dtnsr_header(is);
  BasicTensor<T> out(h.shape);
  if (h.dtype == "f64") {
    if constexpr (std::is_same_v<T, double>) {
      detail::read_le(is, out.data(), out.size());
    } else {
      std::vector<double> tmp(out.size());
      detail::read_le(is, tmp.data(), tmp.size());
      for (std::size_t i = 0; i < tmp.size(); ++i) out[i] = static_cast<T>(tmp[i]);
    }
  } else {
    if constexpr (std::is_same_v<T, float>) {
      detail::read_le(is, out.data(), out.size());
    } else {
      std::vector<float> tmp(out.size());
      detail::read_le(is, tmp.data(), tmp.size());
      for (std::size_t i = 0; i < tmp.size(); ++i) out[i] = static_cast<T>(tmp[i]);
    }
  }
  return out;
}

template <typename T>
void save_dtnsr(const std::string& path, const BasicTensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_dtnsr(os, t);
}

template <typename T>
BasicTensor<T> load_dtnsr(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_dtnsr<T>(is);
}

}  // namespace dynast
