#pragma once

// Procedural exemplar/target pairs. Images live on a torus (every texture
// component is periodic), so translations wrap without seams and a translated
// image has exactly the translated edge map. Images are snapped to 8-bit levels
// before anything is derived from them, so a dataset written to disk and read
// back is identical to the one generated in memory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dynast/harness/image_io.hpp"
#include "dynast/numerics.hpp"

namespace dynast {

struct Transform {
  enum class Kind { identity, translation, permutation, scale };
  Kind kind = Kind::identity;
  int dx = 0, dy = 0;           // translation: tgt(r, c) = ref(r - dy, c - dx), wrapped
  int block = 8;                // permutation: side of the square blocks
  std::vector<int> perm;        // permutation: target block b shows reference block perm[b]
  double factor = 1.0;          // scale: zoom about the image centre, wrapped
  bool random_factor = false;   // scale: draw factor per sample in [0.5, 2]

  static Transform identity() { return {}; }
  static Transform translation(int dx, int dy) { return {.kind = Kind::translation, .dx = dx, .dy = dy}; }
  static Transform permutation(int block) { return {.kind = Kind::permutation, .block = block}; }
  static Transform scaled(double factor) { return {.kind = Kind::scale, .factor = factor}; }
  static Transform random_scale() { return {.kind = Kind::scale, .random_factor = true}; }

  // identity | translation:DX,DY | permutation:BLOCK | scale[:FACTOR]
  static Transform parse(const std::string& spec) {
    const auto colon = spec.find(':');
    const std::string name = spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    auto bad = [&] { return ConfigError("transform: cannot parse '" + spec + "'"); };
    try {
      if (name == "identity" && arg.empty()) return identity();
      if (name == "translation") {
        const auto comma = arg.find(',');
        if (comma == std::string::npos) throw bad();
        return translation(std::stoi(arg.substr(0, comma)), std::stoi(arg.substr(comma + 1)));
      }
      if (name == "permutation") return permutation(arg.empty() ? 8 : std::stoi(arg));
      if (name == "scale") {
        if (arg.empty()) return random_scale();
        const double f = std::stod(arg);
        if (!(f >= 0.5 && f <= 2.0)) throw ConfigError("transform: scale factor must be in [0.5, 2], got " + arg);
        return scaled(f);
      }
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const ConfigError*>(&e)) throw;
      throw bad();
    }
    throw bad();
  }

  // One-line form stored in the dataset manifest; parsed back by `from_record`.
  std::string record() const {
    std::ostringstream os;
    os.precision(17);
    switch (kind) {
      case Kind::identity: os << "identity"; break;
      case Kind::translation: os << "translation " << dx << ' ' << dy; break;
      case Kind::permutation:
        os << "permutation " << block << ' ' << perm.size();
        for (int p : perm) os << ' ' << p;
        break;
      case Kind::scale: os << "scale " << factor; break;
    }
    return os.str();
  }

  static Transform from_record(std::istream& is) {
    std::string name;
    is >> name;
    Transform t;
    if (name == "identity") {
    } else if (name == "translation") {
      t.kind = Kind::translation;
      is >> t.dx >> t.dy;
    } else if (name == "permutation") {
      t.kind = Kind::permutation;
      std::size_t n = 0;
      is >> t.block >> n;
      t.perm.resize(n);
      for (int& p : t.perm) is >> p;
    } else if (name == "scale") {
      t.kind = Kind::scale;
      is >> t.factor;
    } else {
      throw FormatError("dataset manifest: unknown transform '" + name + "'");
    }
    if (!is) throw FormatError("dataset manifest: truncated transform record");
    return t;
  }

  // Reference pixel whose content lands at target pixel (r, c) of a res x res image.
  std::pair<std::size_t, std::size_t> source(std::size_t r, std::size_t c, std::size_t res) const {
    const auto n = static_cast<long>(res);
    const auto wrap = [n](long v) { return static_cast<std::size_t>(((v % n) + n) % n); };
    switch (kind) {
      case Kind::identity: return {r, c};
      case Kind::translation: return {wrap(static_cast<long>(r) - dy), wrap(static_cast<long>(c) - dx)};
      case Kind::permutation: {
        const auto b = static_cast<std::size_t>(block), per_row = res / b;
        const auto src = static_cast<std::size_t>(perm[(r / b) * per_row + c / b]);
        return {(src / per_row) * b + r % b, (src % per_row) * b + c % b};
      }
      case Kind::scale: {
        const auto [y, x] = scale_source(r, c, res);
        return {wrap(std::lround(y)), wrap(std::lround(x))};
      }
    }
    return {r, c};
  }

  // Continuous source coordinate for the scale transform.
  std::pair<double, double> scale_source(std::size_t r, std::size_t c, std::size_t res) const {
    const double ctr = (static_cast<double>(res) - 1.0) / 2.0;
    return {ctr + (static_cast<double>(r) - ctr) / factor, ctr + (static_cast<double>(c) - ctr) / factor};
  }
};

struct ToySample {
  Tensor i_ref, s_ref, s_tgt, i_tgt;  // [3,R,R], [1,R,R], [1,R,R], [3,R,R]
  Transform transform;
  std::uint64_t seed = 0;

  std::size_t resolution() const { return i_ref.dim(1); }

  // Flat reference index matched by flat target index q.
  std::size_t ground_truth(std::size_t q) const {
    const std::size_t res = resolution();
    const auto [r, c] = transform.source(q / res, q % res, res);
    return r * res + c;
  }
};

namespace toy {

inline constexpr std::size_t kChannels = 3;

// Smooth periodic background plus soft coloured blobs of mixed sizes.
inline Tensor texture(std::size_t res, Rng& rng) {
  const double two_pi = 2.0 * std::numbers::pi, n = static_cast<double>(res);
  Tensor img({kChannels, res, res}, uninit);
  for (std::size_t ch = 0; ch < kChannels; ++ch) {
    const double fy = static_cast<double>(rng.below(3)), fx = static_cast<double>(1 + rng.below(2));
    const double phase = rng.uniform(0.0, two_pi), amp = rng.uniform(0.1, 0.3);
    for (std::size_t y = 0; y < res; ++y) {
      for (std::size_t x = 0; x < res; ++x) {
        img.at(ch, y, x) = 0.5 + amp * std::sin(two_pi * (fy * static_cast<double>(y) + fx * static_cast<double>(x)) / n + phase);
      }
    }
  }
  const std::size_t blobs = 10 + rng.below(6);
  for (std::size_t b = 0; b < blobs; ++b) {
    const double cy = rng.uniform(0.0, n), cx = rng.uniform(0.0, n);
    const double sigma = rng.uniform(1.0, n / 8.0);
    const double colour[kChannels] = {rng.uniform(), rng.uniform(), rng.uniform()};
    for (std::size_t y = 0; y < res; ++y) {
      for (std::size_t x = 0; x < res; ++x) {
        double ddy = std::abs(static_cast<double>(y) - cy), ddx = std::abs(static_cast<double>(x) - cx);
        ddy = std::min(ddy, n - ddy);
        ddx = std::min(ddx, n - ddx);
        const double a = std::exp(-(ddy * ddy + ddx * ddx) / (2.0 * sigma * sigma));
        for (std::size_t ch = 0; ch < kChannels; ++ch) {
          double& v = img.at(ch, y, x);
          v = (1.0 - a) * v + a * colour[ch];
        }
      }
    }
  }
  return quantize8(img);
}

// Periodic bilinear sample of channel ch at (y, x).
inline double sample_wrapped(const Tensor& img, std::size_t ch, double y, double x) {
  const auto n = static_cast<long>(img.dim(1));
  const auto wrap = [n](long v) { return static_cast<std::size_t>(((v % n) + n) % n); };
  const double fy = std::floor(y), fx = std::floor(x);
  const double ty = y - fy, tx = x - fx;
  const auto y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double a = img.at(ch, wrap(y0), wrap(x0)), b = img.at(ch, wrap(y0), wrap(x0 + 1));
  const double c = img.at(ch, wrap(y0 + 1), wrap(x0)), d = img.at(ch, wrap(y0 + 1), wrap(x0 + 1));
  return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
}

inline Tensor apply(const Transform& t, const Tensor& ref) {
  const std::size_t res = ref.dim(1);
  Tensor out(ref.shape(), uninit);
  for (std::size_t r = 0; r < res; ++r) {
    for (std::size_t c = 0; c < res; ++c) {
      if (t.kind == Transform::Kind::scale) {
        const auto [y, x] = t.scale_source(r, c, res);
        for (std::size_t ch = 0; ch < ref.dim(0); ++ch) out.at(ch, r, c) = sample_wrapped(ref, ch, y, x);
      } else {
        const auto [sr, sc] = t.source(r, c, res);
        for (std::size_t ch = 0; ch < ref.dim(0); ++ch) out.at(ch, r, c) = ref.at(ch, sr, sc);
      }
    }
  }
  return t.kind == Transform::Kind::scale ? quantize8(out) : out;
}

}  // namespace toy

// Channel-mean gradient magnitude (periodic central differences), 1 where it
// exceeds its own median and 0 elsewhere.
inline Tensor edge_map(const Tensor& img) {
  if (img.ndim() != 3) throw ShapeError("edge_map: expected [C,H,W], got " + shape_str(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor m({H, W});
  for (std::size_t ch = 0; ch < C; ++ch) {
    for (std::size_t i = 0; i < H * W; ++i) m[i] += img[ch * H * W + i];
  }
  for (auto& v : m.span()) v /= static_cast<double>(C);
  std::vector<double> mag(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double gx = 0.5 * (m[y * W + (x + 1) % W] - m[y * W + (x + W - 1) % W]);
      const double gy = 0.5 * (m[((y + 1) % H) * W + x] - m[((y + H - 1) % H) * W + x]);
      mag[y * W + x] = std::sqrt(gx * gx + gy * gy);
    }
  }
  std::vector<double> sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  Tensor s({1, H, W});
  for (std::size_t i = 0; i < n; ++i) s[i] = mag[i] > median ? 1.0 : 0.0;
  return s;
}

inline ToySample make_toy_sample(std::size_t res, Transform t, std::uint64_t seed) {
  if (res < 2) throw ConfigError("toy data: resolution must be >= 2");
  Rng rng(seed);
  ToySample s;
  s.seed = seed;
  if (t.kind == Transform::Kind::permutation) {
    if (t.block < 1 || res % static_cast<std::size_t>(t.block) != 0) {
      throw ConfigError("toy data: permutation block " + std::to_string(t.block) + " does not divide " +
                        std::to_string(res));
    }
    const std::size_t blocks = (res / static_cast<std::size_t>(t.block)) * (res / static_cast<std::size_t>(t.block));
    t.perm.resize(blocks);
    for (std::size_t i = 0; i < blocks; ++i) t.perm[i] = static_cast<int>(i);
    for (std::size_t i = blocks; i > 1; --i) std::swap(t.perm[i - 1], t.perm[rng.below(i)]);
  }
  if (t.kind == Transform::Kind::scale && t.random_factor) {
    t.factor = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    t.random_factor = false;
  }
  s.i_ref = toy::texture(res, rng);
  s.i_tgt = toy::apply(t, s.i_ref);
  s.s_ref = edge_map(s.i_ref);
  s.s_tgt = edge_map(s.i_tgt);
  s.transform = std::move(t);
  return s;
}

inline std::vector<ToySample> gen_toy_dataset(std::size_t n, std::size_t res, const Transform& t, std::uint64_t seed) {
  Rng master(seed);
  std::vector<ToySample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_toy_sample(res, t, master.next()));
  return out;
}

// Directory layout: manifest.txt plus NNNN_{i_ref,i_tgt}.ppm and NNNN_{s_ref,s_tgt}.pgm.
namespace detail {

inline std::string sample_stem(const std::filesystem::path& dir, std::size_t i) {
  std::ostringstream os;
  os.width(4);
  os.fill('0');
  os << i;
  return (dir / os.str()).string();
}

}  // namespace detail

inline void save_toy_dataset(const std::string& dir, const std::vector<ToySample>& data) {
  std::filesystem::create_directories(dir);
  std::ofstream man(std::filesystem::path(dir) / "manifest.txt");
  if (!man) throw FormatError("cannot write manifest in " + dir);
  man << "dynast-toy v1\n" << data.size() << ' ' << (data.empty() ? 0 : data[0].resolution()) << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    const ToySample& s = data[i];
    man << s.seed << ' ' << s.transform.record() << '\n';
    const std::string stem = detail::sample_stem(dir, i);
    write_pnm(stem + "_i_ref.ppm", s.i_ref);
    write_pnm(stem + "_i_tgt.ppm", s.i_tgt);
    write_pnm(stem + "_s_ref.pgm", s.s_ref);
    write_pnm(stem + "_s_tgt.pgm", s.s_tgt);
  }
}

inline std::vector<ToySample> load_toy_dataset(const std::string& dir) {
  std::ifstream man(std::filesystem::path(dir) / "manifest.txt");
  if (!man) throw FormatError("no manifest.txt in " + dir);
  std::string magic;
  std::getline(man, magic);
  if (magic != "dynast-toy v1") throw FormatError(dir + ": not a toy dataset manifest");
  std::size_t n = 0, res = 0;
  if (!(man >> n >> res)) throw FormatError(dir + ": bad manifest header");
  std::vector<ToySample> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    ToySample& s = data[i];
    if (!(man >> s.seed)) throw FormatError(dir + ": manifest lists fewer than " + std::to_string(n) + " samples");
    s.transform = Transform::from_record(man);
    const std::string stem = detail::sample_stem(dir, i);
    s.i_ref = read_pnm(stem + "_i_ref.ppm");
    s.i_tgt = read_pnm(stem + "_i_tgt.ppm");
    s.s_ref = read_pnm(stem + "_s_ref.pgm");
    s.s_tgt = read_pnm(stem + "_s_tgt.pgm");
    const Shape img{toy::kChannels, res, res}, sem{1, res, res};
    if (s.i_ref.shape() != img || s.i_tgt.shape() != img || s.s_ref.shape() != sem || s.s_tgt.shape() != sem) {
      throw FormatError(stem + ": image sizes do not match the manifest resolution " + std::to_string(res));
    }
  }
  return data;
}

}  // namespace dynast
