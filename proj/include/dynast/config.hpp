#pragma once

// Model and training configuration, plus the line-oriented `key = value`
// file format. Every field is addressable; unknown keys are rejected.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dynast/numerics/errors.hpp"

namespace dynast {

enum class Task { supervised, style };

struct ModelConfig {
  int scales = 3;
  std::vector<int> resolutions{8, 16, 32};  // coarse -> fine
  std::vector<int> channels{64, 48, 32};    // coarse -> fine
  int pos_channels = 16;
  int embed_channels = 8;  // per-scale patch embedding width
  int semantic_channels = 1;
  int image_channels = 3;
  int k = 4;
  double tau = 100.0;
  int dense_blocks = 2;
  int inner_blocks = 1;
  int decoder_channels = 32;
  int spade_hidden = 16;

  double lambda_m = 100.0;
  double lambda_adv = 0.0;
  double lambda_s = 3.0;
  std::vector<double> lambda_perceptual{0.25, 0.125, 0.0625, 0.03125};  // taps 1..4, fine -> coarse

  // Ablations.
  bool disable_pruning = false;
  bool replace_inner_with_inter = false;
  int max_matching_resolution = 0;  // 0: match at every scale

  // Interpretation switches.
  bool topk_from_pruned = false;     // select top-k over the pruned map instead of A
  bool literal_scale_range = false;  // aggregate embeddings over 0 < j < M only
  bool prune_dense_blocks = false;   // give the coarsest dense blocks a prune head too
  bool share_prune_heads = false;    // one prune head per scale instead of per block
  double prune_bias_init = 0.5;      // final-layer bias of both prune MLPs
  double attn_init_gain = 0.0;       // alpha/beta init gain; 0 picks 1/sqrt(tau)
  bool style_matching = false;       // matching loss in style mode

  Task task = Task::supervised;

  // Scale index i: 0 is the finest scale, scales-1 the coarsest.
  int res(int i) const { return resolutions[static_cast<std::size_t>(scales - 1 - i)]; }
  int width(int i) const { return channels[static_cast<std::size_t>(scales - 1 - i)]; }
  int finest_resolution() const { return resolutions.back(); }
  int patch_side(int i) const { return 1 << i; }
  double effective_attn_gain() const { return attn_init_gain > 0.0 ? attn_init_gain : 1.0 / std::sqrt(tau); }
  bool matches_at(int i) const { return max_matching_resolution <= 0 || res(i) <= max_matching_resolution; }
  int blocks_at(int i) const { return i == scales - 1 ? dense_blocks : 1 + inner_blocks; }
  int ref_channels() const { return semantic_channels + image_channels; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (scales < 1) fail("scales must be >= 1");
    if (static_cast<int>(resolutions.size()) != scales) fail("resolutions needs one entry per scale");
    if (static_cast<int>(channels.size()) != scales) fail("channels needs one entry per scale");
    for (int i = 0; i < scales; ++i) {
      if (res(i) < 1 || width(i) < 1) fail("resolutions and channels must be positive");
      if (res(i) != finest_resolution() / patch_side(i) || finest_resolution() % patch_side(i) != 0) {
        fail("resolutions must double scale to scale (scale " + std::to_string(i) + " is " +
             std::to_string(res(i)) + ")");
      }
    }
    if (res(scales - 1) < 2) fail("coarsest resolution must be >= 2 (instance norm needs two positions)");
    if (pos_channels < 1 || embed_channels < 1 || semantic_channels < 1 || image_channels < 1) {
      fail("channel widths must be positive");
    }
    if (k < 1) fail("k must be >= 1");
    if (!(tau > 0.0)) fail("tau must be positive");
    if (dense_blocks < 1) fail("dense_blocks must be >= 1");
    if (inner_blocks < 0) fail("inner_blocks must be >= 0");
    if (decoder_channels < 1 || spade_hidden < 1) fail("decoder_channels and spade_hidden must be positive");
    if (lambda_perceptual.size() != 4) fail("lambda_perceptual needs 4 entries");
    if (literal_scale_range && scales < 2) fail("literal_scale_range needs at least 2 scales");
    if (!matches_at(scales - 1)) fail("max_matching_resolution below the coarsest scale disables all matching");
  }

  static ModelConfig desk() { return {}; }

  static ModelConfig paper() {
    ModelConfig c;
    c.scales = 4;
    c.resolutions = {32, 64, 128, 256};
    c.channels = {512, 256, 128, 64};
    c.lambda_adv = 10.0;
    return c;
  }

  // Small enough for exhaustive finite-difference checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.scales = 2;
    c.resolutions = {4, 8};
    c.channels = {8, 6};
    c.pos_channels = 3;
    c.embed_channels = 3;
    c.k = 2;
    c.decoder_channels = 4;
    c.spade_hidden = 3;
    return c;
  }
};

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch = 4;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct Config {
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_scalar(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  std::string rest;
  if (!is || (is >> rest)) throw ConfigError("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_scalar<T>(key, trim(item)));
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

struct Field {
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

template <typename T>
std::string to_str(const T& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  static const auto fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    // Members reached through Config::model / Config::train.
    auto m = [](auto ptr) { return [ptr](auto& c) -> auto& { return c.model.*ptr; }; };
    auto t = [](auto ptr) { return [ptr](auto& c) -> auto& { return c.train.*ptr; }; };
    auto add = [&](const char* key, auto access, auto parse, auto print) {
      f.push_back({key,
                   {[=](Config& c, const std::string& v) { access(c) = parse(key, v); },
                    [=](const Config& c) { return print(access(c)); }}});
    };
    auto p_int = [](const std::string& k, const std::string& v) { return parse_scalar<int>(k, v); };
    auto p_u64 = [](const std::string& k, const std::string& v) { return parse_scalar<std::uint64_t>(k, v); };
    auto p_real = [](const std::string& k, const std::string& v) { return parse_scalar<double>(k, v); };
    auto p_bool = [](const std::string& k, const std::string& v) { return parse_bool(k, v); };
    auto p_ints = [](const std::string& k, const std::string& v) { return parse_list<int>(k, v); };
    auto p_reals = [](const std::string& k, const std::string& v) { return parse_list<double>(k, v); };
    auto p_task = [](const std::string& k, const std::string& v) {
      if (v == "supervised") return Task::supervised;
      if (v == "style") return Task::style;
      throw ConfigError("config: bad task '" + v + "' for " + k);
    };
    auto s_num = [](const auto& v) { return to_str(v); };
    auto s_bool = [](bool v) { return std::string(v ? "true" : "false"); };
    auto s_list = [](const auto& v) { return join(v); };
    auto s_task = [](Task v) { return std::string(v == Task::style ? "style" : "supervised"); };

    add("scales", m(&ModelConfig::scales), p_int, s_num);
    add("resolutions", m(&ModelConfig::resolutions), p_ints, s_list);
    add("channels", m(&ModelConfig::channels), p_ints, s_list);
    add("pos_channels", m(&ModelConfig::pos_channels), p_int, s_num);
    add("embed_channels", m(&ModelConfig::embed_channels), p_int, s_num);
    add("semantic_channels", m(&ModelConfig::semantic_channels), p_int, s_num);
    add("image_channels", m(&ModelConfig::image_channels), p_int, s_num);
    add("k", m(&ModelConfig::k), p_int, s_num);
    add("tau", m(&ModelConfig::tau), p_real, s_num);
    add("dense_blocks", m(&ModelConfig::dense_blocks), p_int, s_num);
    add("inner_blocks", m(&ModelConfig::inner_blocks), p_int, s_num);
    add("decoder_channels", m(&ModelConfig::decoder_channels), p_int, s_num);
    add("spade_hidden", m(&ModelConfig::spade_hidden), p_int, s_num);
    add("lambda_m", m(&ModelConfig::lambda_m), p_real, s_num);
    add("lambda_adv", m(&ModelConfig::lambda_adv), p_real, s_num);
    add("lambda_s", m(&ModelConfig::lambda_s), p_real, s_num);
    add("lambda_perceptual", m(&ModelConfig::lambda_perceptual), p_reals, s_list);
    add("disable_pruning", m(&ModelConfig::disable_pruning), p_bool, s_bool);
    add("replace_inner_with_inter", m(&ModelConfig::replace_inner_with_inter), p_bool, s_bool);
    add("max_matching_resolution", m(&ModelConfig::max_matching_resolution), p_int, s_num);
    add("topk_from_pruned", m(&ModelConfig::topk_from_pruned), p_bool, s_bool);
    add("literal_scale_range", m(&ModelConfig::literal_scale_range), p_bool, s_bool);
    add("prune_dense_blocks", m(&ModelConfig::prune_dense_blocks), p_bool, s_bool);
    add("share_prune_heads", m(&ModelConfig::share_prune_heads), p_bool, s_bool);
    add("prune_bias_init", m(&ModelConfig::prune_bias_init), p_real, s_num);
    add("attn_init_gain", m(&ModelConfig::attn_init_gain), p_real, s_num);
    add("style_matching", m(&ModelConfig::style_matching), p_bool, s_bool);
    add("task", m(&ModelConfig::task), p_task, s_task);
    add("lr", t(&TrainConfig::lr), p_real, s_num);
    add("beta1", t(&TrainConfig::beta1), p_real, s_num);
    add("beta2", t(&TrainConfig::beta2), p_real, s_num);
    add("adam_eps", t(&TrainConfig::adam_eps), p_real, s_num);
    add("batch", t(&TrainConfig::batch), p_int, s_num);
    add("seed", t(&TrainConfig::seed), p_u64, s_num);
    add("threads", t(&TrainConfig::threads), p_int, s_num);
    return f;
  }();
  return fields;
}

}  // namespace detail

// Applies `key = value` lines on top of `base`. '#' starts a comment.
inline Config parse_config(const std::string& text, Config base = {}) {
  const auto& fields = detail::config_fields();
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (it == fields.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second.set(base, value);
  }
  base.model.validate();
  if (base.train.batch < 1 || base.train.threads < 1) throw ConfigError("config: batch and threads must be >= 1");
  return base;
}

inline Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline std::string config_to_text(const Config& c) {
  std::ostringstream os;
  for (const auto& [key, field] : detail::config_fields()) os << key << " = " << field.get(c) << '\n';
  return os.str();
}

}  // namespace dynast
