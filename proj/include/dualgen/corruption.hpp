// SPDX-License-Identifier: Apache-2.0
#pragma once

// Blockwise image-patch masking and Poisson span text infilling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "dualgen/rng.hpp"
#include "dualgen/vision.hpp"

namespace dualgen {

struct PatchMask {
  GridDims grid;
  std::vector<bool> masked;

  std::size_t count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true)); }
  double fraction() const { return static_cast<double>(count()) / static_cast<double>(masked.size()); }
  bool at(std::size_t r, std::size_t c) const { return masked[r * grid.cols + c]; }
};

struct BlockMaskParams {
  std::size_t min_block = 4;
  std::size_t max_block = 16;
  double min_aspect = 0.3;  // upper bound is 1/min_aspect
};

inline std::size_t mask_target(double rate, std::size_t n) {
  // Guard against 0.5*98 style products landing a hair above an integer.
  return static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));
}

// Unions random rectangles (area uniform in [min_block, max_block], aspect
// log-uniform) into the mask until at least ceil(rate * rows * cols) patches
// are covered. A single block adds at most max_block patches, which bounds
// the overshoot.
inline PatchMask blockwise_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng,
                                const BlockMaskParams& params = {}) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("blockwise_mask: rate outside [0,1]");
  if (rows == 0 || cols == 0) throw std::invalid_argument("blockwise_mask: empty grid");
  if (params.min_block == 0 || params.min_block > params.max_block || !(params.min_aspect > 0.0) ||
      params.min_aspect > 1.0)
    throw std::invalid_argument("blockwise_mask: invalid block parameters");

  const std::size_t n = rows * cols;
  PatchMask mask{{rows, cols}, std::vector<bool>(n, false)};
  const std::size_t target = mask_target(rate, n);
  const std::size_t min_area = std::min(params.min_block, n);
  const double log_lo = std::log(params.min_aspect), log_hi = -log_lo;
  std::size_t count = 0;
  std::size_t attempts = 0;

  while (count < target) {
    if (++attempts > 1000 * n) {
      // Unreachable for sane parameters; finish deterministically.
      for (std::size_t i = 0; i < n && count < target; ++i)
        if (!mask.masked[i]) mask.masked[i] = true, ++count;
      break;
    }
    const double area = rng.uniform(static_cast<double>(params.min_block),
                                    static_cast<double>(params.max_block));
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    auto h = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    auto w = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    h = std::clamp<std::size_t>(h, 1, rows);
    w = std::clamp<std::size_t>(w, 1, cols);
    while (h * w > params.max_block) (h >= w ? h : w) -= 1;
    while (h * w < min_area) {
      if ((h <= w && h < rows) || w == cols) ++h;
      else ++w;
    }
    const std::size_t top = static_cast<std::size_t>(rng.below(rows - h + 1));
    const std::size_t left = static_cast<std::size_t>(rng.below(cols - w + 1));
    for (std::size_t r = top; r < top + h; ++r)
      for (std::size_t c = left; c < left + w; ++c)
        if (!mask.masked[r * cols + c]) {
          mask.masked[r * cols + c] = true;
          ++count;
        }
  }
  return mask;
}

struct CorruptedText {
  std::vector<std::size_t> corrupted;
  std::vector<std::size_t> original;
  std::size_t covered = 0;
  std::vector<std::size_t> span_lengths;  // per drawn span, after clamping
  std::size_t maximal_spans = 0;
};

// Marks Poisson-length spans (L=0 clamped to 1, L clipped to the uncovered run
// starting at a uniformly chosen uncovered position) until at least
// ceil(rate * maskable) tokens are covered, then collapses every maximal
// covered span to one mask token. Tokens for which is_special returns true are
// never covered and break runs.
inline CorruptedText span_infill(std::span<const std::size_t> tokens, double rate, double lambda,
                                 Rng& rng, std::size_t mask_id,
                                 const std::function<bool(std::size_t)>& is_special = {}) {
  if (tokens.empty()) throw std::invalid_argument("span_infill: empty token sequence");
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("span_infill: rate outside [0,1]");
  if (!(lambda > 0.0)) throw std::invalid_argument("span_infill: lambda must be positive");

  const std::size_t n = tokens.size();
  std::vector<bool> maskable(n), covered(n, false);
  std::size_t n_maskable = 0;
  for (std::size_t i = 0; i < n; ++i) {
    maskable[i] = !(is_special && is_special(tokens[i]));
    n_maskable += maskable[i];
  }

  CorruptedText out;
  out.original.assign(tokens.begin(), tokens.end());
  const std::size_t target = mask_target(rate, n_maskable);
  std::vector<std::size_t> free_positions;
  while (out.covered < target) {
    free_positions.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (maskable[i] && !covered[i]) free_positions.push_back(i);
    const std::size_t start = free_positions[rng.below(free_positions.size())];
    std::size_t run = 0;
    while (start + run < n && maskable[start + run] && !covered[start + run]) ++run;
    const std::size_t len =
        std::min<std::size_t>(std::max(rng.poisson(lambda), 1), run);
    for (std::size_t i = start; i < start + len; ++i) covered[i] = true;
    out.covered += len;
    out.span_lengths.push_back(len);
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (!covered[i]) {
      out.corrupted.push_back(tokens[i]);
    } else if (i == 0 || !covered[i - 1]) {
      out.corrupted.push_back(mask_id);
      ++out.maximal_spans;
    }
  }
  return out;
}

}  // namespace dualgen
