// SPDX-License-Identifier: Apache-2.0
#pragma once

// Image-side plumbing: patch extraction, the frozen patch featurizer, and the
// fixed-codebook quantizer (tokenizer + visual decoder).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgen/autodiff.hpp"
#include "dualgen/rng.hpp"

namespace dualgen {

struct VocabularyError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct Rgb {
  double r, g, b;
};

// Background first, then the eight caption colors.
inline constexpr std::array<const char*, 9> kPaletteNames = {
    "black", "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"};
inline constexpr std::array<Rgb, 9> kPalette = {{{0.0, 0.0, 0.0},
                                                 {1.0, 0.0, 0.0},
                                                 {0.0, 1.0, 0.0},
                                                 {0.0, 0.0, 1.0},
                                                 {1.0, 1.0, 0.0},
                                                 {0.0, 1.0, 1.0},
                                                 {1.0, 0.0, 1.0},
                                                 {1.0, 1.0, 1.0},
                                                 {1.0, 0.5, 0.0}}};

// RGB image, row-major pixels with interleaved channels, values in [0,1].
class ImageGrid {
 public:
  static constexpr std::size_t kChannels = 3;

  ImageGrid() = default;
  ImageGrid(std::size_t height, std::size_t width, std::vector<double> pixels)
      : height_(height), width_(width), pixels_(std::move(pixels)) {
    if (height == 0 || width == 0) throw std::invalid_argument("ImageGrid: empty image");
    if (pixels_.size() != height * width * kChannels)
      throw std::invalid_argument("ImageGrid: pixel count does not match dimensions");
    for (double& v : pixels_) v = std::clamp(v, 0.0, 1.0);
  }
  static ImageGrid filled(std::size_t height, std::size_t width, Rgb c) {
    std::vector<double> px(height * width * kChannels);
    for (std::size_t i = 0; i < height * width; ++i) {
      px[3 * i] = c.r;
      px[3 * i + 1] = c.g;
      px[3 * i + 2] = c.b;
    }
    return ImageGrid(height, width, std::move(px));
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  const std::vector<double>& pixels() const { return pixels_; }
  double at(std::size_t y, std::size_t x, std::size_t ch) const {
    return pixels_[(y * width_ + x) * kChannels + ch];
  }
  void set(std::size_t y, std::size_t x, Rgb c) {
    double* p = &pixels_[(y * width_ + x) * kChannels];
    p[0] = std::clamp(c.r, 0.0, 1.0);
    p[1] = std::clamp(c.g, 0.0, 1.0);
    p[2] = std::clamp(c.b, 0.0, 1.0);
  }

  friend bool operator==(const ImageGrid&, const ImageGrid&) = default;

 private:
  std::size_t height_ = 0, width_ = 0;
  std::vector<double> pixels_;
};

struct GridDims {
  std::size_t rows = 0, cols = 0;
  std::size_t count() const { return rows * cols; }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

inline GridDims patch_grid(std::size_t height, std::size_t width, std::size_t p) {
  if (p == 0) throw std::invalid_argument("patch size must be positive");
  if (height % p != 0 || width % p != 0)
    throw std::invalid_argument("image " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by patch size " + std::to_string(p));
  return {height / p, width / p};
}

inline std::size_t patch_dim(std::size_t p) { return p * p * ImageGrid::kChannels; }

// Row-major patch order; each patch vector is (dy, dx, channel) ordered.
inline ad::Tensor extract_patches(const ImageGrid& img, std::size_t p) {
  const GridDims g = patch_grid(img.height(), img.width(), p);
  const std::size_t dim = patch_dim(p);
  std::vector<double> out(g.count() * dim);
  for (std::size_t pr = 0; pr < g.rows; ++pr)
    for (std::size_t pc = 0; pc < g.cols; ++pc) {
      double* dst = &out[(pr * g.cols + pc) * dim];
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch)
            *dst++ = img.at(pr * p + dy, pc * p + dx, ch);
    }
  return ad::Tensor::constant({g.count(), dim}, std::move(out));
}

// Inverse of extract_patches.
inline ImageGrid assemble_patches(std::span<const double> patches, GridDims g, std::size_t p) {
  const std::size_t dim = patch_dim(p);
  if (patches.size() != g.count() * dim)
    throw std::invalid_argument("assemble_patches: patch buffer does not match grid");
  const std::size_t h = g.rows * p, w = g.cols * p;
  std::vector<double> px(h * w * 3);
  for (std::size_t pr = 0; pr < g.rows; ++pr)
    for (std::size_t pc = 0; pc < g.cols; ++pc) {
      const double* src = &patches[(pr * g.cols + pc) * dim];
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch)
            px[((pr * p + dy) * w + pc * p + dx) * 3 + ch] = *src++;
    }
  return ImageGrid(h, w, std::move(px));
}

// FNV-1a from a fixed basis, used to turn component names into fixed seeds.
inline std::uint64_t named_seed(std::string_view name) {
  std::uint64_t h = 0x431c1aa704cf2458ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct PatchSequence {
  ad::Tensor features;  // [n_patches x d_feat]
  GridDims grid;
  std::size_t n_patches() const { return grid.count(); }
};

// Frozen stand-in for a pretrained patch encoder: tanh(patch · W + b) with
// parameters drawn from a fixed named seed.
class Featurizer {
 public:
  Featurizer() = default;
  Featurizer(std::size_t p, std::size_t d_feat, bool trainable = false) : p_(p) {
    Rng rng(named_seed("featurizer"));
    const std::size_t in = patch_dim(p);
    const double a = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * d_feat), b(d_feat);
    for (double& v : w) v = rng.uniform(-a, a);
    for (double& v : b) v = rng.uniform(-0.5, 0.5);
    weight_ = trainable ? ad::Tensor::parameter({in, d_feat}, std::move(w))
                        : ad::Tensor::constant({in, d_feat}, std::move(w));
    bias_ = trainable ? ad::Tensor::parameter({d_feat}, std::move(b))
                      : ad::Tensor::constant({d_feat}, std::move(b));
  }

  std::size_t patch_size() const { return p_; }
  std::size_t d_feat() const { return bias_.size(); }
  const ad::Tensor& weight() const { return weight_; }
  const ad::Tensor& bias() const { return bias_; }

  PatchSequence featurize(const ad::Tensor& patches, GridDims grid) const {
    if (patches.rows() != grid.count())
      throw std::invalid_argument("featurize: patch count does not match grid");
    return {ad::tanh(ad::add_bias(ad::matmul(patches, weight_), bias_)), grid};
  }

  PatchSequence featurize(const ImageGrid& img) const {
    return featurize(extract_patches(img, p_), patch_grid(img.height(), img.width(), p_));
  }

 private:
  std::size_t p_ = 0;
  ad::Tensor weight_, bias_;
};

struct VisualTokenSeq {
  std::vector<std::size_t> tokens;
  GridDims grid;
};

// K frozen codewords plus a fixed linear renderer (code -> patch pixels) and
// its left inverse (patch pixels -> code) used by the tokenizer.
class VisualCodebook {
 public:
  VisualCodebook() = default;

  // embed: [K x d_code]; render: [d_code x p*p*3]; project: [p*p*3 x d_code].
  VisualCodebook(std::size_t p, std::vector<double> embed, std::size_t d_code,
                 std::vector<double> render, std::vector<double> project)
      : p_(p), d_code_(d_code), render_(std::move(render)), project_(std::move(project)) {
    const std::size_t dim = patch_dim(p);
    if (d_code == 0 || embed.empty() || embed.size() % d_code != 0)
      throw std::invalid_argument("VisualCodebook: embed size must be a multiple of d_code");
    if (render_.size() != d_code * dim || project_.size() != dim * d_code)
      throw std::invalid_argument("VisualCodebook: render/project shapes do not match");
    const std::size_t k = embed.size() / d_code;
    embed_ = ad::Tensor::constant({k, d_code}, std::move(embed));
    if (min_pairwise_distance() <= 0.0)
      throw std::invalid_argument("VisualCodebook: codewords must be pairwise distinct");
  }

  std::size_t size() const { return embed_.rows(); }
  std::size_t d_code() const { return d_code_; }
  std::size_t patch_size() const { return p_; }
  const ad::Tensor& embed() const { return embed_; }
  const std::vector<double>& render_matrix() const { return render_; }

  std::span<const double> codeword(std::size_t id) const {
    return embed_.values().subspan(id * d_code_, d_code_);
  }

  // Unclamped pixel patch for a code vector.
  std::vector<double> render(std::span<const double> code) const {
    const std::size_t dim = patch_dim(p_);
    std::vector<double> out(dim, 0.0);
    for (std::size_t k = 0; k < d_code_; ++k)
      for (std::size_t j = 0; j < dim; ++j) out[j] += code[k] * render_[k * dim + j];
    return out;
  }

  std::vector<double> project(std::span<const double> patch) const {
    const std::size_t dim = patch_dim(p_);
    std::vector<double> out(d_code_, 0.0);
    for (std::size_t j = 0; j < dim; ++j)
      for (std::size_t k = 0; k < d_code_; ++k) out[k] += patch[j] * project_[j * d_code_ + k];
    return out;
  }

  // Nearest codeword by Euclidean distance; ties go to the lowest id.
  std::size_t nearest(std::span<const double> code) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t id = 0; id < size(); ++id) {
      const auto cw = codeword(id);
      double d = 0.0;
      for (std::size_t k = 0; k < d_code_; ++k) d += (cw[k] - code[k]) * (cw[k] - code[k]);
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    return best;
  }

  double min_pairwise_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t j = i + 1; j < size(); ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < d_code_; ++k) {
          const double diff = codeword(i)[k] - codeword(j)[k];
          d += diff * diff;
        }
        best = std::min(best, std::sqrt(d));
      }
    return best;
  }

 private:
  std::size_t p_ = 0, d_code_ = 0;
  ad::Tensor embed_;
  std::vector<double> render_, project_;
};

// Default codebook: an orthonormal renderer whose first three directions are
// the per-channel constant patches, so every palette color is exactly
// renderable (codewords 0..8). The remaining codewords are drawn from a fixed
// seed and rejected unless they render inside [0,1] and keep min_distance to
// every earlier codeword.
inline VisualCodebook make_codebook(std::size_t k, std::size_t d_code, std::size_t p,
                                    std::uint64_t seed = named_seed("codebook"),
                                    double min_distance = 0.5) {
  const std::size_t dim = patch_dim(p);
  if (d_code < 3 || d_code > dim)
    throw std::invalid_argument("make_codebook: need 3 <= d_code <= p*p*3");
  if (k < kPalette.size())
    throw std::invalid_argument("make_codebook: codebook must hold the full palette");
  Rng rng(seed);

  // Columns of Q (dim x d_code), built by Gram-Schmidt.
  std::vector<std::vector<double>> cols;
  const double unit = 1.0 / static_cast<double>(p);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    std::vector<double> c(dim, 0.0);
    for (std::size_t i = ch; i < dim; i += 3) c[i] = unit;
    cols.push_back(std::move(c));
  }
  while (cols.size() < d_code) {
    std::vector<double> c(dim);
    for (double& v : c) v = rng.uniform(-1.0, 1.0);
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : cols) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += c[i] * q[i];
        for (std::size_t i = 0; i < dim; ++i) c[i] -= dot * q[i];
      }
    double norm = 0.0;
    for (double v : c) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (double& v : c) v /= norm;
    cols.push_back(std::move(c));
  }
  std::vector<double> render(d_code * dim), project(dim * d_code);
  for (std::size_t kk = 0; kk < d_code; ++kk)
    for (std::size_t i = 0; i < dim; ++i) {
      render[kk * dim + i] = cols[kk][i];
      project[i * d_code + kk] = cols[kk][i];
    }

  auto render_ok = [&](const std::vector<double>& code) {
    for (std::size_t i = 0; i < dim; ++i) {
      double v = 0.0;
      for (std::size_t kk = 0; kk < d_code; ++kk) v += code[kk] * render[kk * dim + i];
      if (v < 0.0 || v > 1.0) return false;
    }
    return true;
  };
  auto far_enough = [&](const std::vector<double>& embed, const std::vector<double>& code) {
    const std::size_t n = embed.size() / d_code;
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t kk = 0; kk < d_code; ++kk) {
        const double diff = embed[j * d_code + kk] - code[kk];
        d += diff * diff;
      }
      if (std::sqrt(d) < min_distance) return false;
    }
    return true;
  };

  std::vector<double> embed;
  embed.reserve(k * d_code);
  for (const Rgb& c : kPalette) {
    std::vector<double> code(d_code, 0.0);
    code[0] = c.r * static_cast<double>(p);
    code[1] = c.g * static_cast<double>(p);
    code[2] = c.b * static_cast<double>(p);
    embed.insert(embed.end(), code.begin(), code.end());
  }
  std::size_t attempts = 0;
  while (embed.size() < k * d_code) {
    if (++attempts > 1000000) throw std::runtime_error("make_codebook: rejection sampling stalled");
    std::vector<double> code(d_code);
    for (std::size_t kk = 0; kk < 3; ++kk) code[kk] = rng.uniform(0.15, 0.85) * static_cast<double>(p);
    for (std::size_t kk = 3; kk < d_code; ++kk) code[kk] = rng.uniform(-0.5, 0.5);
    if (!render_ok(code) || !far_enough(embed, code)) continue;
    embed.insert(embed.end(), code.begin(), code.end());
  }
  return VisualCodebook(p, std::move(embed), d_code, std::move(render), std::move(project));
}

inline VisualTokenSeq tokenize_image(const ImageGrid& img, const VisualCodebook& cb) {
  const std::size_t p = cb.patch_size();
  const GridDims g = patch_grid(img.height(), img.width(), p);
  const ad::Tensor patches = extract_patches(img, p);
  const std::size_t dim = patch_dim(p);
  VisualTokenSeq seq{{}, g};
  seq.tokens.reserve(g.count());
  for (std::size_t i = 0; i < g.count(); ++i)
    seq.tokens.push_back(cb.nearest(cb.project(patches.values().subspan(i * dim, dim))));
  return seq;
}

inline ImageGrid decode_tokens(std::span<const std::size_t> tokens, const VisualCodebook& cb,
                               GridDims grid) {
  if (tokens.size() != grid.count())
    throw std::invalid_argument("decode_tokens: " + std::to_string(tokens.size()) +
                                " tokens for a " + std::to_string(grid.rows) + "x" +
                                std::to_string(grid.cols) + " grid");
  const std::size_t dim = patch_dim(cb.patch_size());
  std::vector<double> patches;
  patches.reserve(tokens.size() * dim);
  for (std::size_t id : tokens) {
    if (id >= cb.size())
      throw VocabularyError("decode_tokens: visual token " + std::to_string(id) +
                            " outside codebook of size " + std::to_string(cb.size()));
    const auto px = cb.render(cb.codeword(id));
    patches.insert(patches.end(), px.begin(), px.end());
  }
  return assemble_patches(patches, grid, cb.patch_size());  // clamps to [0,1]
}

inline ImageGrid decode_tokens(const VisualTokenSeq& seq, const VisualCodebook& cb) {
  return decode_tokens(seq.tokens, cb, seq.grid);
}

// Text image format: header "DUALGEN-IMG v1 <rows> <cols>" then rows*cols*3
// whitespace-separated floats (row-major, RGB interleaved).
inline void write_image(std::ostream& os, const ImageGrid& img) {
  os << "DUALGEN-IMG v1 " << img.height() << ' ' << img.width() << '\n';
  os << std::setprecision(17);
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t ch = 0; ch < 3; ++ch)
        os << (x == 0 && ch == 0 ? "" : " ") << img.at(y, x, ch);
    os << '\n';
  }
}

inline ImageGrid read_image(std::istream& is) {
  std::string magic, version;
  std::size_t rows = 0, cols = 0;
  if (!(is >> magic >> version >> rows >> cols) || magic != "DUALGEN-IMG" || version != "v1")
    throw std::runtime_error("read_image: missing 'DUALGEN-IMG v1 <rows> <cols>' header");
  std::vector<double> px(rows * cols * 3);
  for (double& v : px)
    if (!(is >> v)) throw std::runtime_error("read_image: truncated pixel data");
  return ImageGrid(rows, cols, std::move(px));
}

inline void save_image(const std::string& path, const ImageGrid& img) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_image(os, img);
}

inline ImageGrid load_image(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_image(is);
}

}  // namespace dualgen
