#pragma once

// Run configuration: flat `key = value` text, `#` comments.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cobit/model.hpp"
#include "cobit/objectives.hpp"
#include "cobit/optimizer.hpp"

namespace cobit {

struct DataConfig {
  std::uint64_t seed = 1;             // training scenes use seeds [seed, seed + train_pairs)
  std::size_t train_pairs = 8000;
  std::uint64_t eval_offset = 1000000;  // held-out scenes start at seed + eval_offset
  std::size_t codebook_images = 600;  // first images of the training range
  std::size_t codebook_iterations = 20;
  std::uint64_t codebook_seed = 11;
};

struct EvalConfig {
  std::size_t scenes = 500;       // zero-shot classification and captioning
  std::size_t retrieval = 256;
  std::size_t t2i_prompts = 100;
  std::size_t t2i_samples = 16;
  std::size_t t2i_top_k = 64;
  std::uint64_t seed = 5;
};

struct RunConfig {
  ModelConfig model;
  LossWeights weights;
  bool enable_con = true, enable_i2t = true, enable_t2i = true;
  CfgConfig cfg;
  AdamConfig adam;
  LrSchedule schedule;
  std::size_t batch_size = 32;
  DataConfig data;
  EvalConfig eval;

  /// Loss weights after the enable flags: a disabled loss has weight zero.
  LossWeights active_weights() const {
    LossWeights w = weights;
    if (!enable_con) w.con = 0;
    if (!enable_i2t) w.i2t = 0;
    if (!enable_t2i) w.t2i = 0;
    return w;
  }

  void validate() const {
    model.validate();
    weights.validate();
    cfg.validate();
    if (batch_size == 0) throw Error("batch_size must be positive");
    if (schedule.total == 0) throw Error("total_steps must be positive");
    if (data.train_pairs < batch_size) throw Error("train_pairs must be at least batch_size");
    if (data.codebook_images == 0 || data.codebook_images > data.train_pairs)
      throw Error("codebook_images must lie in [1, train_pairs]");
    if (data.eval_offset < data.train_pairs) throw Error("eval_offset must put held-out seeds past the training range");
    if (!enable_con && !enable_i2t && !enable_t2i) throw Error("at least one loss must be enabled");
    if (eval.t2i_top_k == 0 || eval.t2i_top_k > model.codebook_size) throw Error("t2i_top_k must lie in [1, codebook_size]");
  }
};

namespace detail {

struct ConfigField {
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <class U>
U parse_number(const std::string& key, const std::string& v) {
  U out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw Error("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw Error("config key '" + key + "': expected on/off, got '" + v + "'");
}

inline std::map<std::string, ConfigField> config_fields(RunConfig& c) {
  std::map<std::string, ConfigField> f;
  auto size = [&f](const std::string& k, std::size_t& x) {
    f[k] = {[&x] { return std::to_string(x); }, [&x, k](const std::string& v) { x = parse_number<std::size_t>(k, v); }};
  };
  auto u64 = [&f](const std::string& k, std::uint64_t& x) {
    f[k] = {[&x] { return std::to_string(x); }, [&x, k](const std::string& v) { x = parse_number<std::uint64_t>(k, v); }};
  };
  auto real = [&f](const std::string& k, double& x) {
    f[k] = {[&x] { return format_double(x); }, [&x, k](const std::string& v) { x = parse_number<double>(k, v); }};
  };
  auto flag = [&f](const std::string& k, bool& x) {
    f[k] = {[&x] { return std::string(x ? "on" : "off"); }, [&x, k](const std::string& v) { x = parse_bool(k, v); }};
  };
  ModelConfig& m = c.model;
  size("image_size", m.image_size);
  size("patch_size", m.patch_size);
  size("codebook_size", m.codebook_size);
  size("max_text_len", m.max_text_len);
  size("dim", m.dim);
  size("heads", m.heads);
  size("ffn_mult", m.ffn_mult);
  size("image_layers", m.image_layers);
  size("text_layers", m.text_layers);
  size("decoder_layers", m.decoder_layers);
  real("dropout", m.dropout);
  size("conv_kernel", m.conv_kernel);
  flag("text_encode_causal", m.text_encode_causal);
  flag("image_unicoder", m.image_unicoder);
  flag("text_unicoder", m.text_unicoder);
  flag("split_decoder", m.split_decoder);
  real("init_std", m.init_std);
  real("init_tau", m.init_tau);
  u64("init_seed", m.init_seed);

  real("weight_con", c.weights.con);
  real("weight_i2t", c.weights.i2t);
  real("weight_t2i", c.weights.t2i);
  flag("enable_con", c.enable_con);
  flag("enable_i2t", c.enable_i2t);
  flag("enable_t2i", c.enable_t2i);
  real("cfg_mask_prob", c.cfg.mask_prob);
  real("cfg_alpha", c.cfg.alpha);

  real("beta1", c.adam.beta1);
  real("beta2", c.adam.beta2);
  real("weight_decay", c.adam.weight_decay);
  real("adam_eps", c.adam.eps);
  real("lr_peak", c.schedule.peak);
  u64("lr_warmup", c.schedule.warmup);
  u64("total_steps", c.schedule.total);
  f["lr_decay"] = {[&c] { return std::string(c.schedule.cosine ? "cosine" : "linear"); },
                   [&c](const std::string& v) {
                     if (v != "cosine" && v != "linear") throw Error("config key 'lr_decay': expected cosine or linear");
                     c.schedule.cosine = v == "cosine";
                   }};
  size("batch_size", c.batch_size);

  u64("seed", c.data.seed);
  size("train_pairs", c.data.train_pairs);
  u64("eval_offset", c.data.eval_offset);
  size("codebook_images", c.data.codebook_images);
  size("codebook_iterations", c.data.codebook_iterations);
  u64("codebook_seed", c.data.codebook_seed);

  size("eval_scenes", c.eval.scenes);
  size("eval_retrieval", c.eval.retrieval);
  size("eval_t2i_prompts", c.eval.t2i_prompts);
  size("eval_t2i_samples", c.eval.t2i_samples);
  size("eval_t2i_top_k", c.eval.t2i_top_k);
  u64("eval_seed", c.eval.seed);
  return f;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Sets one key; unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  auto fields = detail::config_fields(c);
  auto it = fields.find(key);
  if (it == fields.end()) throw Error("unknown config key '" + key + "'");
  it->second.set(value);
}

/// Applies `key = value` lines on top of `c`.
inline void apply_config_text(RunConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  apply_config_text(c, text);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every key, sorted, one per line; parse_config(config_text(c)) == c.
inline std::string config_text(const RunConfig& c) {
  RunConfig copy = c;
  std::string out;
  for (const auto& [k, f] : detail::config_fields(copy)) out += k + " = " + f.get() + "\n";
  return out;
}

}  // namespace cobit
