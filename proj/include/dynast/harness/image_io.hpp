#pragma once

// Binary PPM (P6, 3 channels) and PGM (P5, 1 channel), maxval 255.
// Tensors are [C, H, W] in [0, 1]; writing rounds to the nearest 8-bit level.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dynast/numerics.hpp"

namespace dynast {

inline std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) throw NumericError("image: non-finite pixel value");
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Snap every value to the 8-bit level it would be written as.
inline Tensor quantize8(const Tensor& t) {
  Tensor out(t.shape(), uninit);
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = to_byte(t[i]) / 255.0;
  return out;
}

inline void write_pnm(const std::string& path, const Tensor& img) {
  if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
    throw ShapeError("write_pnm: expected [1|3, H, W], got " + shape_str(img.shape()));
  }
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<char> bytes(c * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) bytes[(y * w + x) * c + ch] = static_cast<char>(to_byte(img.at(ch, y, x)));
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << (c == 3 ? "P6" : "P5") << '\n' << w << ' ' << h << "\n255\n";
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("failed writing " + path);
}

namespace detail {

// Next header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

inline std::size_t pnm_number(std::istream& is, const std::string& path) {
  const std::string tok = pnm_token(is);
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError(path + ": bad header field '" + tok + "'");
  }
  return std::stoul(tok);
}

}  // namespace detail

inline Tensor read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  const std::string magic = detail::pnm_token(is);
  if (magic != "P6" && magic != "P5") throw FormatError(path + ": not a binary PPM/PGM (magic '" + magic + "')");
  const std::size_t c = magic == "P6" ? 3 : 1;
  const std::size_t w = detail::pnm_number(is, path), h = detail::pnm_number(is, path);
  const std::size_t maxval = detail::pnm_number(is, path);
  if (w == 0 || h == 0) throw FormatError(path + ": zero image extent");
  if (maxval != 255) throw FormatError(path + ": only maxval 255 is supported, got " + std::to_string(maxval));
  std::vector<unsigned char> bytes(c * h * w);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw FormatError(path + ": truncated pixel data");
  }
  Tensor img({c, h, w}, uninit);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) img.at(ch, y, x) = bytes[(y * w + x) * c + ch] / 255.0;
    }
  }
  return img;
}

}  // namespace dynast
