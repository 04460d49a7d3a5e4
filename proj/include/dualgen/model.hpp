// SPDX-License-Identifier: Apache-2.0
#pragma once

// Encoder-decoder transformer with hybrid image embeddings: the encoder reads
// continuous patch features (through a learned projection), the decoder reads
// and emits discrete tokens from one unified text + visual + special space.

#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgen/autodiff.hpp"
#include "dualgen/corruption.hpp"
#include "dualgen/data.hpp"
#include "dualgen/rng.hpp"
#include "dualgen/vision.hpp"

namespace dualgen {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers_enc = 2;
  std::size_t n_layers_dec = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t text_vocab = 17;    // V_t, words only
  std::size_t visual_vocab = 64;  // K
  std::size_t max_text_len = 24;
  std::size_t max_patches = 64;
  double dropout = 0.0;
  double ln_eps = 1e-5;
  // Frozen image side.
  std::size_t patch_size = 4;
  std::size_t d_feat = 32;
  std::size_t d_code = 16;

  TokenSpace tokens() const { return {text_vocab, visual_vocab}; }
  std::size_t max_decoder_len() const { return std::max(max_text_len, max_patches) + 2; }

  void validate() const {
    const std::size_t extents[] = {d_model, n_layers_enc, n_layers_dec, n_heads, d_ff,  text_vocab,
                                   visual_vocab, max_text_len, max_patches, patch_size, d_feat, d_code};
    for (auto e : extents)
      if (e == 0) throw ConfigError("model config: every extent must be at least 1");
    if (d_model % n_heads != 0)
      throw ConfigError("model config: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model config: dropout must lie in [0,1)");
    if (!(ln_eps > 0.0)) throw ConfigError("model config: ln_eps must be positive");
  }
};

// Trainable parameter count as a closed form of the config:
//   embeddings  (S+V_t)·d + K·d + U + d_feat·d + d + d + (Lt + Lp + Ld)·d + 2d
//   encoder     n_enc · (4d² + 2·d·f + 9d + f)
//   decoder     n_dec · (8d² + 2·d·f + 15d + f)
//   final norms 4d
// with U = S+V_t+K, Lt = max_text_len, Lp = max_patches, Ld = max(Lt,Lp)+2.
inline std::size_t parameter_count_formula(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, u = c.tokens().size();
  const std::size_t emb = c.tokens().text_rows() * d + c.visual_vocab * d + u + c.d_feat * d + 2 * d +
                          (c.max_text_len + c.max_patches + c.max_decoder_len()) * d + 2 * d;
  const std::size_t enc = c.n_layers_enc * (4 * d * d + 2 * d * f + 9 * d + f);
  const std::size_t dec = c.n_layers_dec * (8 * d * d + 2 * d * f + 15 * d + f);
  return emb + enc + dec + 4 * d;
}

struct Attention {
  ad::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};
struct LayerNormParams {
  ad::Tensor gain, bias;
};
struct FeedForward {
  ad::Tensor w1, b1, w2, b2;
};
struct EncoderLayer {
  LayerNormParams ln1;
  Attention self_attn;
  LayerNormParams ln2;
  FeedForward ff;
};
struct DecoderLayer {
  LayerNormParams ln1;
  Attention self_attn;
  LayerNormParams ln2;
  Attention cross_attn;
  LayerNormParams ln3;
  FeedForward ff;
};

struct NamedParam {
  std::string name;
  ad::Tensor tensor;
};

// Optional training-time state for a forward pass.
struct ForwardContext {
  Rng* dropout_rng = nullptr;
};

enum Segment : std::size_t { kImageSegment = 0, kTextSegment = 1 };

class DualModel {
 public:
  DualModel() = default;

  const ModelConfig& config() const { return cfg_; }
  TokenSpace tokens() const { return cfg_.tokens(); }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const Featurizer& featurizer() const { return featurizer_; }
  const VisualCodebook& codebook() const { return codebook_; }

  // Shared by encoder input, decoder input and the generation head.
  const ad::Tensor& text_embed() const { return text_embed_; }
  // Decoder-side visual token embedding; also the visual rows of the head.
  const ad::Tensor& visual_embed() const { return visual_embed_; }
  const ad::Tensor& patch_proj_weight() const { return patch_w_; }
  const ad::Tensor& patch_proj_bias() const { return patch_b_; }
  const ad::Tensor& mask_embed() const { return mask_embed_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() const {
    for (auto p : params_) p.tensor.zero_grad();
  }

  // Deep copy with fresh storage.
  DualModel clone() const {
    DualModel m = *this;
    m.rebind_storage();
    return m;
  }

  // Learned patch projection of frozen features: [n x d_feat] -> [n x d_model].
  ad::Tensor project_patches(const ad::Tensor& features) const {
    return ad::add_bias(ad::matmul(features, patch_w_), patch_b_);
  }

  // Encoder states [L x d_model]: image segment first (or one [IMAGEPAD]),
  // then text segment (or one [TEXTPAD]).
  ad::Tensor encode(const std::vector<std::size_t>* text, const PatchSequence* image,
                    const PatchMask* patch_mask = nullptr, const ForwardContext& ctx = {}) const {
    if (text == nullptr && image == nullptr)
      throw std::invalid_argument("encode: at least one modality must be present");
    if (text && text->empty()) throw std::invalid_argument("encode: empty text; pass no text instead");
    ad::Tensor img_part;
    if (image) {
      const std::size_t n = image->n_patches();
      if (n > cfg_.max_patches)
        throw std::invalid_argument("encode: " + std::to_string(n) + " patches exceeds max_patches " +
                                    std::to_string(cfg_.max_patches));
      if (image->features.cols() != cfg_.d_feat)
        throw ad::ShapeError("encode: feature width does not match d_feat");
      ad::Tensor proj = project_patches(image->features);
      if (patch_mask) {
        if (patch_mask->masked.size() != n) throw std::invalid_argument("encode: mask size != patch count");
        std::vector<std::size_t> pick(n);
        for (std::size_t i = 0; i < n; ++i) pick[i] = patch_mask->masked[i] ? n : i;
        proj = ad::gather_rows(ad::concat_rows({proj, ad::as_row(mask_embed_)}), pick);
      }
      img_part = ad::add(proj, ad::gather_rows(enc_image_pos_, iota(n)));
    } else {
      const std::size_t pad[] = {SpecialTokens::kImagePad};
      img_part = ad::add(ad::gather_rows(text_embed_, pad), ad::gather_rows(enc_image_pos_, iota(1)));
    }
    img_part = ad::add_bias(img_part, ad::gather_rows(segment_, std::vector<std::size_t>{kImageSegment}));

    ad::Tensor txt_part;
    if (text) {
      const std::size_t m = text->size();
      if (m > cfg_.max_text_len)
        throw std::invalid_argument("encode: text length " + std::to_string(m) + " exceeds max_text_len " +
                                    std::to_string(cfg_.max_text_len));
      check_ids(*text, tokens().text_rows(), "encode");
      txt_part = ad::add(ad::gather_rows(text_embed_, *text), ad::gather_rows(enc_text_pos_, iota(m)));
    } else {
      const std::size_t pad[] = {SpecialTokens::kTextPad};
      txt_part = ad::add(ad::gather_rows(text_embed_, pad), ad::gather_rows(enc_text_pos_, iota(1)));
    }
    txt_part = ad::add_bias(txt_part, ad::gather_rows(segment_, std::vector<std::size_t>{kTextSegment}));

    ad::Tensor x = ad::concat_rows({img_part, txt_part});
    for (const auto& layer : encoder_) {
      x = ad::add(x, dropout(attention(layer.self_attn, norm(x, layer.ln1), nullptr, false), ctx));
      x = ad::add(x, dropout(feed_forward(layer.ff, norm(x, layer.ln2)), ctx));
    }
    return norm(x, enc_final_);
  }

  ad::Tensor encode(const std::optional<std::vector<std::size_t>>& text, const std::optional<PatchSequence>& image,
                    const std::optional<PatchMask>& mask = std::nullopt, const ForwardContext& ctx = {}) const {
    return encode(text ? &*text : nullptr, image ? &*image : nullptr, mask ? &*mask : nullptr, ctx);
  }

  // Teacher-forced decoder: logits [T x U] where row t scores the token that
  // follows inputs[0..t]. Causal self-attention, cross-attention to enc.
  ad::Tensor decode_forward(const std::vector<std::size_t>& inputs, const ad::Tensor& enc,
                            const ForwardContext& ctx = {}) const {
    if (inputs.empty()) throw std::invalid_argument("decode_forward: empty target prefix");
    if (inputs.size() > cfg_.max_decoder_len())
      throw std::invalid_argument("decode_forward: sequence longer than max decoder length");
    check_ids(inputs, tokens().size(), "decode_forward");
    const ad::Tensor table = ad::concat_rows({text_embed_, visual_embed_});
    ad::Tensor x = ad::add(ad::gather_rows(table, inputs), ad::gather_rows(dec_pos_, iota(inputs.size())));
    for (const auto& layer : decoder_) {
      x = ad::add(x, dropout(attention(layer.self_attn, norm(x, layer.ln1), nullptr, true), ctx));
      x = ad::add(x, dropout(attention(layer.cross_attn, norm(x, layer.ln2), &enc, false), ctx));
      x = ad::add(x, dropout(feed_forward(layer.ff, norm(x, layer.ln3)), ctx));
    }
    x = norm(x, dec_final_);
    return ad::add_bias(ad::matmul_bt(x, table), head_bias_);
  }

  friend DualModel init_model(const ModelConfig& cfg, std::uint64_t seed);

 private:
  static std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  }

  static void check_ids(const std::vector<std::size_t>& ids, std::size_t limit, const char* where) {
    for (auto id : ids)
      if (id >= limit)
        throw VocabularyError(std::string(where) + ": token id " + std::to_string(id) + " outside [0," +
                              std::to_string(limit) + ")");
  }

  ad::Tensor norm(const ad::Tensor& x, const LayerNormParams& ln) const {
    return ad::layer_norm(x, ln.gain, ln.bias, cfg_.ln_eps);
  }

  ad::Tensor dropout(const ad::Tensor& x, const ForwardContext& ctx) const {
    if (cfg_.dropout == 0.0 || ctx.dropout_rng == nullptr) return x;
    const double keep = 1.0 - cfg_.dropout;
    std::vector<double> m(x.size());
    for (double& v : m) v = ctx.dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    return ad::mul(x, ad::Tensor::constant(x.shape(), std::move(m)));
  }

  ad::Tensor feed_forward(const FeedForward& ff, const ad::Tensor& x) const {
    ad::Tensor h = ad::gelu(ad::add_bias(ad::matmul(x, ff.w1), ff.b1));
    return ad::add_bias(ad::matmul(h, ff.w2), ff.b2);
  }

  // Multi-head attention; keys/values come from memory when given.
  ad::Tensor attention(const Attention& a, const ad::Tensor& x, const ad::Tensor* memory, bool causal) const {
    const ad::Tensor& kv_src = memory ? *memory : x;
    const ad::Tensor q = ad::add_bias(ad::matmul(x, a.wq), a.bq);
    const ad::Tensor k = ad::add_bias(ad::matmul(kv_src, a.wk), a.bk);
    const ad::Tensor v = ad::add_bias(ad::matmul(kv_src, a.wv), a.bv);
    const std::size_t heads = cfg_.n_heads, dh = cfg_.d_model / heads;
    const std::size_t tq = x.rows(), tk = kv_src.rows();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> mask;
    if (causal) {
      mask.assign(tq * tk, 0.0);
      for (std::size_t i = 0; i < tq; ++i)
        for (std::size_t j = i + 1; j < tk; ++j) mask[i * tk + j] = -1e30;
    }
    std::vector<ad::Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const ad::Tensor qh = ad::slice_cols(q, h * dh, dh);
      const ad::Tensor kh = ad::slice_cols(k, h * dh, dh);
      const ad::Tensor vh = ad::slice_cols(v, h * dh, dh);
      ad::Tensor scores = ad::scale(ad::matmul_bt(qh, kh), inv_sqrt);
      if (causal) scores = ad::add_constant(scores, mask);
      outs.push_back(ad::matmul(ad::softmax_rows(scores), vh));
    }
    const ad::Tensor merged = heads == 1 ? outs.front() : ad::concat_cols(outs);
    return ad::add_bias(ad::matmul(merged, a.wo), a.bo);
  }

  void rebind_storage();
  void register_all();

  ModelConfig cfg_;
  Featurizer featurizer_;
  VisualCodebook codebook_;
  ad::Tensor text_embed_, visual_embed_, head_bias_;
  ad::Tensor patch_w_, patch_b_, mask_embed_;
  ad::Tensor enc_text_pos_, enc_image_pos_, dec_pos_, segment_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  LayerNormParams enc_final_, dec_final_;
  std::vector<NamedParam> params_;
};

// Registers every trainable tensor under a stable name, in a fixed order that
// the optimizer and checkpoints rely on.
inline void DualModel::register_all() {
  params_.clear();
  auto add = [this](std::string name, const ad::Tensor& t) { params_.push_back({std::move(name), t}); };
  auto add_attn = [&](const std::string& pre, const Attention& a) {
    add(pre + ".wq", a.wq), add(pre + ".bq", a.bq), add(pre + ".wk", a.wk), add(pre + ".bk", a.bk);
    add(pre + ".wv", a.wv), add(pre + ".bv", a.bv), add(pre + ".wo", a.wo), add(pre + ".bo", a.bo);
  };
  auto add_ln = [&](const std::string& pre, const LayerNormParams& ln) {
    add(pre + ".gain", ln.gain), add(pre + ".bias", ln.bias);
  };
  auto add_ff = [&](const std::string& pre, const FeedForward& ff) {
    add(pre + ".w1", ff.w1), add(pre + ".b1", ff.b1), add(pre + ".w2", ff.w2), add(pre + ".b2", ff.b2);
  };
  add("text_embed", text_embed_);
  add("visual_embed", visual_embed_);
  add("head_bias", head_bias_);
  add("patch_proj.w", patch_w_);
  add("patch_proj.b", patch_b_);
  add("mask_embed", mask_embed_);
  add("enc_text_pos", enc_text_pos_);
  add("enc_image_pos", enc_image_pos_);
  add("dec_pos", dec_pos_);
  add("segment", segment_);
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string pre = "enc." + std::to_string(i);
    add_ln(pre + ".ln1", encoder_[i].ln1);
    add_attn(pre + ".self", encoder_[i].self_attn);
    add_ln(pre + ".ln2", encoder_[i].ln2);
    add_ff(pre + ".ff", encoder_[i].ff);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const std::string pre = "dec." + std::to_string(i);
    add_ln(pre + ".ln1", decoder_[i].ln1);
    add_attn(pre + ".self", decoder_[i].self_attn);
    add_ln(pre + ".ln2", decoder_[i].ln2);
    add_attn(pre + ".cross", decoder_[i].cross_attn);
    add_ln(pre + ".ln3", decoder_[i].ln3);
    add_ff(pre + ".ff", decoder_[i].ff);
  }
  add_ln("enc.final", enc_final_);
  add_ln("dec.final", dec_final_);
}

inline void DualModel::rebind_storage() {
  auto fresh = [](ad::Tensor& t) {
    t = ad::Tensor::parameter(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
  };
  auto attn = [&](Attention& a) {
    for (ad::Tensor* t : {&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo}) fresh(*t);
  };
  auto ln = [&](LayerNormParams& l) { fresh(l.gain), fresh(l.bias); };
  auto ffn = [&](FeedForward& f) {
    for (ad::Tensor* t : {&f.w1, &f.b1, &f.w2, &f.b2}) fresh(*t);
  };
  for (ad::Tensor* t : {&text_embed_, &visual_embed_, &head_bias_, &patch_w_, &patch_b_, &mask_embed_,
                        &enc_text_pos_, &enc_image_pos_, &dec_pos_, &segment_})
    fresh(*t);
  for (auto& l : encoder_) ln(l.ln1), attn(l.self_attn), ln(l.ln2), ffn(l.ff);
  for (auto& l : decoder_) ln(l.ln1), attn(l.self_attn), ln(l.ln2), attn(l.cross_attn), ln(l.ln3), ffn(l.ff);
  ln(enc_final_), ln(dec_final_);
  register_all();
}

// Lookup tables (embeddings, positions, segment, mask) ~ U(-0.02, 0.02);
// weight matrices ~ U(-a, a) with a = sqrt(3 / fan_in); biases 0; norm gains 1.
// Draw order follows parameter registration order.
inline DualModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DualModel m;
  m.cfg_ = cfg;
  m.featurizer_ = Featurizer(cfg.patch_size, cfg.d_feat);
  m.codebook_ = make_codebook(cfg.visual_vocab, cfg.d_code, cfg.patch_size);

  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  auto zeros = [](ad::Shape s) { return ad::Tensor::zeros(std::move(s), true); };
  auto ones = [](std::size_t n) { return ad::Tensor::parameter({n}, std::vector<double>(n, 1.0)); };
  auto attn = [&] {
    return Attention{zeros({d, d}), zeros({d}), zeros({d, d}), zeros({d}),
                     zeros({d, d}), zeros({d}), zeros({d, d}), zeros({d})};
  };
  auto ln = [&] { return LayerNormParams{ones(d), zeros({d})}; };
  auto ffn = [&] { return FeedForward{zeros({d, f}), zeros({f}), zeros({f, d}), zeros({d})}; };

  m.text_embed_ = zeros({cfg.tokens().text_rows(), d});
  m.visual_embed_ = zeros({cfg.visual_vocab, d});
  m.head_bias_ = zeros({cfg.tokens().size()});
  m.patch_w_ = zeros({cfg.d_feat, d});
  m.patch_b_ = zeros({d});
  m.mask_embed_ = zeros({d});
  m.enc_text_pos_ = zeros({cfg.max_text_len, d});
  m.enc_image_pos_ = zeros({cfg.max_patches, d});
  m.dec_pos_ = zeros({cfg.max_decoder_len(), d});
  m.segment_ = zeros({2, d});
  for (std::size_t i = 0; i < cfg.n_layers_enc; ++i) m.encoder_.push_back({ln(), attn(), ln(), ffn()});
  for (std::size_t i = 0; i < cfg.n_layers_dec; ++i)
    m.decoder_.push_back({ln(), attn(), ln(), attn(), ln(), ffn()});
  m.enc_final_ = ln();
  m.dec_final_ = ln();
  m.register_all();

  Rng rng(seed);
  for (auto& p : m.params_) {
    const std::string& name = p.name;
    const bool is_bias_like = name.ends_with(".gain") || name.ends_with(".bias") || name.ends_with(".b") ||
                              name.ends_with(".bq") || name.ends_with(".bk") || name.ends_with(".bv") ||
                              name.ends_with(".bo") || name.ends_with(".b1") || name.ends_with(".b2") ||
                              name == "head_bias";
    if (is_bias_like) continue;
    const bool is_table = name.ends_with("embed") || name.ends_with("pos") || name == "segment";
    const double a = is_table ? 0.02 : std::sqrt(3.0 / static_cast<double>(p.tensor.shape()[0]));
    for (double& v : p.tensor.mutable_values()) v = rng.uniform(-a, a);
  }
  return m;
}

}  // namespace dualgen
