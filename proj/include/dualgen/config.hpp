// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat key=value run configuration. One "key = value" per line, '#' starts a
// comment. Unknown keys are rejected; every value is validated on load.

#include <charconv>
#include <cstdio>
#include <functional>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgen/data.hpp"
#include "dualgen/decode.hpp"
#include "dualgen/model.hpp"
#include "dualgen/objectives.hpp"
#include "dualgen/optim.hpp"
#include "dualgen/train.hpp"

namespace dualgen {

struct ConfigParseError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  PretrainConfig pretrain;  // alpha, beta, p_dae, batch size, switches, corruption
  AdamConfig adam;
  double finetune_lr = 0.0;  // 0 selects the task default
  std::size_t finetune_epochs = 1;
  DecodeConfig decode;
  SyntheticConfig data;
  double val_fraction = 0.1;

  RunConfig() { model.text_vocab = grammar_vocab().word_count(); }

  void validate() const;
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();
  std::string to_string() const;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigParseError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out))
    throw ConfigParseError("config: '" + key + "' expects a finite number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigParseError("config: '" + key + "' expects true/false, got '" + v + "'");
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field size_field(const char* key, T RunConfig::*outer, std::size_t T::*inner) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.*outer.*inner); },
          [=](RunConfig& c, const std::string& v) { c.*outer.*inner = parse_u64(key, v); }};
}
template <class T>
Field double_field(const char* key, T RunConfig::*outer, double T::*inner) {
  return {key, [=](const RunConfig& c) { return format_double(c.*outer.*inner); },
          [=](RunConfig& c, const std::string& v) { c.*outer.*inner = parse_double(key, v); }};
}
template <class T>
Field bool_field(const char* key, T RunConfig::*outer, bool T::*inner) {
  return {key, [=](const RunConfig& c) { return std::string(c.*outer.*inner ? "true" : "false"); },
          [=](RunConfig& c, const std::string& v) { c.*outer.*inner = parse_bool(key, v); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using R = RunConfig;
    std::vector<Field> f;
    f.push_back({"seed", [](const R& c) { return std::to_string(c.seed); },
                 [](R& c, const std::string& v) { c.seed = parse_u64("seed", v); }});
    f.push_back(size_field("d_model", &R::model, &ModelConfig::d_model));
    f.push_back(size_field("n_layers_enc", &R::model, &ModelConfig::n_layers_enc));
    f.push_back(size_field("n_layers_dec", &R::model, &ModelConfig::n_layers_dec));
    f.push_back(size_field("n_heads", &R::model, &ModelConfig::n_heads));
    f.push_back(size_field("d_ff", &R::model, &ModelConfig::d_ff));
    f.push_back(size_field("visual_vocab", &R::model, &ModelConfig::visual_vocab));
    f.push_back(size_field("max_text_len", &R::model, &ModelConfig::max_text_len));
    f.push_back(size_field("max_patches", &R::model, &ModelConfig::max_patches));
    f.push_back(double_field("dropout", &R::model, &ModelConfig::dropout));
    f.push_back(double_field("ln_eps", &R::model, &ModelConfig::ln_eps));
    f.push_back({"patch_size", [](const R& c) { return std::to_string(c.model.patch_size); },
                 [](R& c, const std::string& v) { c.model.patch_size = c.data.patch_size = parse_u64("patch_size", v); }});
    f.push_back(size_field("d_feat", &R::model, &ModelConfig::d_feat));
    f.push_back(size_field("d_code", &R::model, &ModelConfig::d_code));

    f.push_back(double_field("alpha", &R::pretrain, &PretrainConfig::alpha));
    f.push_back(double_field("beta", &R::pretrain, &PretrainConfig::beta));
    f.push_back(double_field("p_dae", &R::pretrain, &PretrainConfig::p_dae));
    f.push_back(size_field("batch_size", &R::pretrain, &PretrainConfig::batch_size));
    f.push_back({"loss_image", [](const R& c) { return std::string(c.pretrain.switches.image ? "true" : "false"); },
                 [](R& c, const std::string& v) { c.pretrain.switches.image = parse_bool("loss_image", v); }});
    f.push_back({"loss_text", [](const R& c) { return std::string(c.pretrain.switches.text ? "true" : "false"); },
                 [](R& c, const std::string& v) { c.pretrain.switches.text = parse_bool("loss_text", v); }});
    f.push_back({"loss_commitment",
                 [](const R& c) { return std::string(c.pretrain.switches.commitment ? "true" : "false"); },
                 [](R& c, const std::string& v) { c.pretrain.switches.commitment = parse_bool("loss_commitment", v); }});
    f.push_back({"image_mask_rate", [](const R& c) { return format_double(c.pretrain.corruption.image_mask_rate); },
                 [](R& c, const std::string& v) { c.pretrain.corruption.image_mask_rate = parse_double("image_mask_rate", v); }});
    f.push_back({"text_mask_rate", [](const R& c) { return format_double(c.pretrain.corruption.text_mask_rate); },
                 [](R& c, const std::string& v) { c.pretrain.corruption.text_mask_rate = parse_double("text_mask_rate", v); }});
    f.push_back({"span_lambda", [](const R& c) { return format_double(c.pretrain.corruption.span_lambda); },
                 [](R& c, const std::string& v) { c.pretrain.corruption.span_lambda = parse_double("span_lambda", v); }});
    f.push_back({"mask_min_block", [](const R& c) { return std::to_string(c.pretrain.corruption.blocks.min_block); },
                 [](R& c, const std::string& v) { c.pretrain.corruption.blocks.min_block = parse_u64("mask_min_block", v); }});
    f.push_back({"mask_max_block", [](const R& c) { return std::to_string(c.pretrain.corruption.blocks.max_block); },
                 [](R& c, const std::string& v) { c.pretrain.corruption.blocks.max_block = parse_u64("mask_max_block", v); }});
    f.push_back({"mask_min_aspect", [](const R& c) { return format_double(c.pretrain.corruption.blocks.min_aspect); },
                 [](R& c, const std::string& v) { c.pretrain.corruption.blocks.min_aspect = parse_double("mask_min_aspect", v); }});

    f.push_back(double_field("lr", &R::adam, &AdamConfig::lr));
    f.push_back(double_field("adam_beta1", &R::adam, &AdamConfig::beta1));
    f.push_back(double_field("adam_beta2", &R::adam, &AdamConfig::beta2));
    f.push_back(double_field("adam_eps", &R::adam, &AdamConfig::eps));
    f.push_back(double_field("clip_norm", &R::adam, &AdamConfig::clip_norm));
    f.push_back({"finetune_lr", [](const R& c) { return format_double(c.finetune_lr); },
                 [](R& c, const std::string& v) { c.finetune_lr = parse_double("finetune_lr", v); }});
    f.push_back({"finetune_epochs", [](const R& c) { return std::to_string(c.finetune_epochs); },
                 [](R& c, const std::string& v) { c.finetune_epochs = parse_u64("finetune_epochs", v); }});

    f.push_back({"strategy", [](const R& c) { return std::string(strategy_name(c.decode.strategy)); },
                 [](R& c, const std::string& v) {
                   try {
                     c.decode.strategy = parse_strategy(v);
                   } catch (const std::exception&) {
                     throw ConfigParseError("config: unknown strategy '" + v + "'");
                   }
                 }});
    f.push_back(size_field("beam_size", &R::decode, &DecodeConfig::beam_size));
    f.push_back(double_field("top_p", &R::decode, &DecodeConfig::top_p));
    f.push_back(size_field("top_k", &R::decode, &DecodeConfig::top_k));
    f.push_back(size_field("n_samples", &R::decode, &DecodeConfig::n_samples));
    f.push_back(size_field("max_len", &R::decode, &DecodeConfig::max_len));
    f.push_back(double_field("temperature", &R::decode, &DecodeConfig::temperature));
    f.push_back(double_field("length_penalty", &R::decode, &DecodeConfig::length_penalty));
    f.push_back(bool_field("restrict_modality", &R::decode, &DecodeConfig::restrict_modality));

    f.push_back(size_field("image_size", &R::data, &SyntheticConfig::image_size));
    f.push_back(size_field("min_blocks", &R::data, &SyntheticConfig::min_blocks));
    f.push_back(size_field("max_blocks", &R::data, &SyntheticConfig::max_blocks));
    f.push_back({"val_fraction", [](const R& c) { return format_double(c.val_fraction); },
                 [](R& c, const std::string& v) { c.val_fraction = parse_double("val_fraction", v); }});
    return f;
  }();
  return table;
}

inline const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return f;
  throw ConfigParseError("config: unknown key '" + key + "'");
}

}  // namespace detail

inline const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> out = [] {
    std::vector<std::string> k;
    for (const auto& f : detail::fields()) k.emplace_back(f.key);
    return k;
  }();
  return out;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  detail::field(key).set(*this, detail::trim(value));
}

inline std::string RunConfig::get(const std::string& key) const { return detail::field(key).get(*this); }

inline void RunConfig::validate() const {
  try {
    model.validate();
    decode.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigParseError(e.what());
  }
  auto fail = [](const std::string& m) { throw ConfigParseError("config: " + m); };
  if (model.patch_size != data.patch_size) fail("internal patch size mismatch");
  if (!(pretrain.alpha >= 0.0)) fail("alpha must be >= 0");
  if (!(pretrain.beta >= 0.0)) fail("beta must be >= 0");
  if (!(pretrain.p_dae >= 0.0 && pretrain.p_dae <= 1.0)) fail("p_dae must lie in [0,1]");
  if (pretrain.batch_size < 1) fail("batch_size must be >= 1");
  const auto& cc = pretrain.corruption;
  if (!(cc.image_mask_rate > 0.0 && cc.image_mask_rate <= 1.0)) fail("image_mask_rate must lie in (0,1]");
  if (!(cc.text_mask_rate > 0.0 && cc.text_mask_rate <= 1.0)) fail("text_mask_rate must lie in (0,1]");
  if (!(cc.span_lambda > 0.0)) fail("span_lambda must be positive");
  if (cc.blocks.min_block < 1 || cc.blocks.max_block < cc.blocks.min_block)
    fail("mask block sizes need 1 <= mask_min_block <= mask_max_block");
  if (!(cc.blocks.min_aspect > 0.0 && cc.blocks.min_aspect <= 1.0)) fail("mask_min_aspect must lie in (0,1]");
  if (!(adam.lr > 0.0)) fail("lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    fail("Adam betas must lie in [0,1)");
  if (!(adam.eps > 0.0)) fail("adam_eps must be positive");
  if (!(finetune_lr >= 0.0)) fail("finetune_lr must be >= 0");
  if (finetune_epochs < 1) fail("finetune_epochs must be >= 1");
  if (data.image_size % model.patch_size != 0) fail("image_size must be a multiple of patch_size");
  const std::size_t side = data.image_size / model.patch_size;
  if (side < 4) fail("image_size / patch_size must be at least 4");
  if (side * side > model.max_patches) fail("image has more patches than max_patches");
  if (data.min_blocks < 1 || data.max_blocks < data.min_blocks || data.max_blocks > kPositionNames.size())
    fail("block counts need 1 <= min_blocks <= max_blocks <= 5");
  // "a <color> block at <pos...>" is at most 6 tokens, plus "and" between blocks.
  if (7 * data.max_blocks - 1 > model.max_text_len) fail("max_text_len too short for max_blocks captions");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction must lie in [0,1)");
}

inline std::string RunConfig::to_string() const {
  std::string out;
  for (const auto& f : detail::fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

// Applies the lines of a config document on top of `base`; validates the result.
inline RunConfig parse_run_config(std::istream& is, RunConfig base = {}) {
  std::size_t line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigParseError("config line " + std::to_string(line_no) + ": expected key = value");
    base.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  base.validate();
  return base;
}

inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  return parse_run_config(is, std::move(base));
}

// "key=value" override as given to --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigParseError("override '" + assignment + "' is not key=value");
  cfg.set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

}  // namespace dualgen
