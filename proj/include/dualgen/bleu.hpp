// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <map>
#include <stdexcept>
#include <vector>

namespace dualgen {

namespace detail {
inline std::map<std::vector<std::size_t>, std::size_t> ngram_counts(const std::vector<std::size_t>& s,
                                                                    std::size_t n) {
  std::map<std::vector<std::size_t>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    ++counts[std::vector<std::size_t>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                      s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}
}  // namespace detail

// Sentence BLEU-4: clipped n-gram precisions, add-one smoothing for n >= 2,
// geometric mean, brevity penalty against the closest reference length
// (shorter wins ties).
inline double bleu4(const std::vector<std::size_t>& candidate,
                    const std::vector<std::vector<std::size_t>>& references) {
  if (references.empty()) throw std::invalid_argument("bleu4: at least one reference required");
  if (candidate.empty()) return 0.0;

  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cand = detail::ngram_counts(candidate, n);
    std::map<std::vector<std::size_t>, std::size_t> max_ref;
    for (const auto& ref : references)
      for (const auto& [gram, c] : detail::ngram_counts(ref, n)) max_ref[gram] = std::max(max_ref[gram], c);
    std::size_t matched = 0, total = 0;
    for (const auto& [gram, c] : cand) {
      total += c;
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    double precision;
    if (n == 1) {
      if (matched == 0) return 0.0;
      precision = static_cast<double>(matched) / static_cast<double>(total);
    } else {
      precision = static_cast<double>(matched + 1) / static_cast<double>(total + 1);
    }
    log_sum += std::log(precision);
  }

  const auto c = static_cast<double>(candidate.size());
  double r = static_cast<double>(references.front().size());
  for (const auto& ref : references) {
    const auto len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

}  // namespace dualgen
