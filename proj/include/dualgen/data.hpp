// SPDX-License-Identifier: Apache-2.0
#pragma once

// Unified token space, the closed-grammar text vocabulary, the synthetic
// colored-block dataset and its line-oriented file format.

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgen/rng.hpp"
#include "dualgen/vision.hpp"

namespace dualgen {

// Fixed low ids shared by every vocabulary.
struct SpecialTokens {
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kMask = 3;
  static constexpr std::size_t kImagePad = 4;
  static constexpr std::size_t kTextPad = 5;
  static constexpr std::size_t kBoi = 6;
  static constexpr std::size_t kEoi = 7;
  static constexpr std::size_t kCount = 8;

  static constexpr std::array<const char*, kCount> kNames = {
      "[PAD]", "[BOS]", "[EOS]", "[MASK]", "[IMAGEPAD]", "[TEXTPAD]", "[BOI]", "[EOI]"};
};

// Layout of the unified id space: specials, then text words, then visual
// tokens. Every decoder logit row spans the whole space.
struct TokenSpace {
  std::size_t text_words = 0;   // V_t
  std::size_t visual = 0;       // K

  std::size_t text_rows() const { return SpecialTokens::kCount + text_words; }
  std::size_t size() const { return text_rows() + visual; }
  std::size_t visual_id(std::size_t code) const { return text_rows() + code; }
  std::size_t code_of(std::size_t id) const { return id - text_rows(); }
  bool is_special(std::size_t id) const { return id < SpecialTokens::kCount; }
  bool is_word(std::size_t id) const { return id >= SpecialTokens::kCount && id < text_rows(); }
  bool is_visual(std::size_t id) const { return id >= text_rows() && id < size(); }
};

struct UnknownTokenError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class TextVocab {
 public:
  TextVocab() = default;
  explicit TextVocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], SpecialTokens::kCount + i).second)
        throw std::invalid_argument("TextVocab: duplicate word '" + words_[i] + "'");
    }
    for (std::size_t i = 0; i < SpecialTokens::kCount; ++i) index_.emplace(SpecialTokens::kNames[i], i);
  }

  std::size_t word_count() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw UnknownTokenError("unknown token '" + token + "'");
    return it->second;
  }

  const std::string& token(std::size_t id) const {
    static const std::array<std::string, SpecialTokens::kCount> specials = [] {
      std::array<std::string, SpecialTokens::kCount> a;
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = SpecialTokens::kNames[i];
      return a;
    }();
    if (id < SpecialTokens::kCount) return specials[id];
    if (id - SpecialTokens::kCount < words_.size()) return words_[id - SpecialTokens::kCount];
    throw VocabularyError("id " + std::to_string(id) + " is not a text token");
  }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
};

inline std::vector<std::size_t> encode_text(const std::string& s, const TextVocab& vocab) {
  std::istringstream is(s);
  std::vector<std::size_t> ids;
  std::vector<std::string> unknown;
  for (std::string w; is >> w;) {
    try {
      ids.push_back(vocab.id(w));
    } catch (const UnknownTokenError&) {
      unknown.push_back(w);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "unknown token(s):";
    for (const auto& w : unknown) msg += " '" + w + "'";
    throw UnknownTokenError(msg);
  }
  return ids;
}

inline std::string decode_text(std::span<const std::size_t> ids, const TextVocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic colored-block grammar

inline constexpr std::array<const char*, 5> kPositionNames = {
    "top left", "top right", "center", "bottom left", "bottom right"};

struct Block {
  std::size_t color = 1;     // index into kPalette, 1..8
  std::size_t position = 0;  // index into kPositionNames
  friend bool operator==(const Block&, const Block&) = default;
};

struct SyntheticConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t min_blocks = 1;
  std::size_t max_blocks = 3;
};

inline TextVocab grammar_vocab() {
  std::vector<std::string> words = {"a", "block", "at", "and", "top", "bottom", "left", "right", "center"};
  for (std::size_t c = 1; c < kPaletteNames.size(); ++c) words.emplace_back(kPaletteNames[c]);
  return TextVocab(std::move(words));
}

struct PairedExample {
  ImageGrid image;
  std::vector<std::size_t> caption;
  std::vector<Block> meta;
};

inline std::string caption_text(const std::vector<Block>& blocks) {
  std::string s;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) s += " and ";
    s += std::string("a ") + kPaletteNames[blocks[i].color] + " block at " +
         kPositionNames[blocks[i].position];
  }
  return s;
}

inline std::string spec_string(const std::vector<Block>& blocks) {
  std::string s;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) s += ';';
    std::string pos = kPositionNames[blocks[i].position];
    std::replace(pos.begin(), pos.end(), ' ', '_');
    s += std::string(kPaletteNames[blocks[i].color]) + "@" + pos;
  }
  return s;
}

inline std::vector<Block> parse_spec_string(const std::string& spec) {
  std::vector<Block> blocks;
  std::istringstream is(spec);
  for (std::string item; std::getline(is, item, ';');) {
    const auto at = item.find('@');
    if (at == std::string::npos) throw std::runtime_error("spec item without '@': " + item);
    std::string color = item.substr(0, at), pos = item.substr(at + 1);
    std::replace(pos.begin(), pos.end(), '_', ' ');
    Block b;
    auto ci = std::find_if(kPaletteNames.begin() + 1, kPaletteNames.end(),
                           [&](const char* n) { return color == n; });
    auto pi = std::find_if(kPositionNames.begin(), kPositionNames.end(),
                           [&](const char* n) { return pos == n; });
    if (ci == kPaletteNames.end() || pi == kPositionNames.end())
      throw std::runtime_error("unrecognised block spec: " + item);
    b.color = static_cast<std::size_t>(ci - kPaletteNames.begin());
    b.position = static_cast<std::size_t>(pi - kPositionNames.begin());
    blocks.push_back(b);
  }
  if (blocks.empty()) throw std::runtime_error("empty block spec");
  return blocks;
}

// Patch-aligned rectangle for a named position on a rows x cols patch grid.
struct PatchRect {
  std::size_t top, left, height, width;
};

inline PatchRect position_rect(std::size_t position, GridDims g) {
  const std::size_t bh = std::max<std::size_t>(g.rows / 4, 1), bw = std::max<std::size_t>(g.cols / 4, 1);
  const std::size_t top = g.rows / 8, mid_r = 3 * g.rows / 8, bottom = 5 * g.rows / 8;
  const std::size_t left = g.cols / 8, mid_c = 3 * g.cols / 8, right = 5 * g.cols / 8;
  switch (position) {
    case 0: return {top, left, bh, bw};
    case 1: return {top, right, bh, bw};
    case 2: return {mid_r, mid_c, bh, bw};
    case 3: return {bottom, left, bh, bw};
    case 4: return {bottom, right, bh, bw};
    default: throw std::out_of_range("position index");
  }
}

inline ImageGrid render_blocks(const std::vector<Block>& blocks, const SyntheticConfig& cfg) {
  const GridDims g = patch_grid(cfg.image_size, cfg.image_size, cfg.patch_size);
  if (g.rows < 4 || g.cols < 4) throw std::invalid_argument("synthetic images need at least a 4x4 patch grid");
  ImageGrid img = ImageGrid::filled(cfg.image_size, cfg.image_size, kPalette[0]);
  for (const Block& b : blocks) {
    const PatchRect r = position_rect(b.position, g);
    for (std::size_t y = r.top * cfg.patch_size; y < (r.top + r.height) * cfg.patch_size; ++y)
      for (std::size_t x = r.left * cfg.patch_size; x < (r.left + r.width) * cfg.patch_size; ++x)
        img.set(y, x, kPalette[b.color]);
  }
  return img;
}

inline PairedExample make_example(std::vector<Block> blocks, const TextVocab& vocab,
                                  const SyntheticConfig& cfg) {
  std::sort(blocks.begin(), blocks.end(),
            [](const Block& a, const Block& b) { return a.position < b.position; });
  for (std::size_t i = 1; i < blocks.size(); ++i)
    if (blocks[i].position == blocks[i - 1].position)
      throw std::invalid_argument("blocks must occupy distinct positions");
  PairedExample ex;
  ex.image = render_blocks(blocks, cfg);
  ex.caption = encode_text(caption_text(blocks), vocab);
  ex.meta = std::move(blocks);
  return ex;
}

inline std::vector<PairedExample> gen_dataset(std::size_t n, std::uint64_t seed, const TextVocab& vocab,
                                              const SyntheticConfig& cfg = {}) {
  if (n == 0) throw std::invalid_argument("gen_dataset: n must be at least 1");
  if (cfg.min_blocks < 1 || cfg.max_blocks > kPositionNames.size() || cfg.min_blocks > cfg.max_blocks)
    throw std::invalid_argument("gen_dataset: block count range must lie in [1,5]");
  Rng rng(seed);
  std::vector<PairedExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(cfg.min_blocks),
                                                        static_cast<std::int64_t>(cfg.max_blocks)));
    std::array<std::size_t, 5> pos{0, 1, 2, 3, 4};
    for (std::size_t j = 0; j < k; ++j) std::swap(pos[j], pos[j + rng.below(pos.size() - j)]);
    std::vector<Block> blocks;
    for (std::size_t j = 0; j < k; ++j)
      blocks.push_back({1 + static_cast<std::size_t>(rng.below(kPaletteNames.size() - 1)), pos[j]});
    out.push_back(make_example(std::move(blocks), vocab, cfg));
  }
  return out;
}

// Deterministic split by index hash: roughly val_fraction of indices land in
// the validation side, and the two sides never overlap.
inline bool in_validation_split(std::size_t index, double val_fraction) {
  const std::uint64_t h = named_seed("split/" + std::to_string(index));
  return static_cast<double>(h % 1000000) < val_fraction * 1e6;
}

template <class T>
std::pair<std::vector<T>, std::vector<T>> split_dataset(const std::vector<T>& all, double val_fraction) {
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i = 0; i < all.size(); ++i)
    (in_validation_split(i, val_fraction) ? out.second : out.first).push_back(all[i]);
  return out;
}

// Dataset file: one "<caption text>\t<spec string>" record per line.
inline void write_dataset(std::ostream& os, const std::vector<PairedExample>& data, const TextVocab& vocab) {
  for (const auto& ex : data) os << decode_text(ex.caption, vocab) << '\t' << spec_string(ex.meta) << '\n';
}

inline std::vector<PairedExample> read_dataset(std::istream& is, const TextVocab& vocab,
                                               const SyntheticConfig& cfg = {}) {
  std::vector<PairedExample> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("dataset line " + std::to_string(line_no) + ": missing tab separator");
    PairedExample ex;
    ex.meta = parse_spec_string(line.substr(tab + 1));
    ex.image = render_blocks(ex.meta, cfg);
    ex.caption = encode_text(line.substr(0, tab), vocab);
    out.push_back(std::move(ex));
  }
  return out;
}

inline void save_dataset(const std::string& path, const std::vector<PairedExample>& data, const TextVocab& vocab) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_dataset(os, data, vocab);
}

inline std::vector<PairedExample> load_dataset(const std::string& path, const TextVocab& vocab,
                                               const SyntheticConfig& cfg = {}) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_dataset(is, vocab, cfg);
}

}  // namespace dualgen
