// SPDX-License-Identifier: Apache-2.0
#pragma once

// Decoding protocols: greedy, beam search, nucleus and top-k sampling, image
// generation under a visual-token restriction, and cycle-consistency
// reranking of generated images.
//
// The search routines are written against a scorer, any callable mapping a
// token prefix to next-token logits, so they can be checked exhaustively on
// tiny synthetic models independent of the transformer.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgen/model.hpp"
#include "dualgen/objectives.hpp"
#include "dualgen/rng.hpp"
#include "dualgen/vision.hpp"

namespace dualgen {

enum class Strategy { kGreedy, kBeam, kNucleus, kTopK, kFull };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kGreedy: return "greedy";
    case Strategy::kBeam: return "beam";
    case Strategy::kNucleus: return "nucleus";
    case Strategy::kTopK: return "topk";
    case Strategy::kFull: return "full";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  for (Strategy v : {Strategy::kGreedy, Strategy::kBeam, Strategy::kNucleus, Strategy::kTopK, Strategy::kFull})
    if (s == strategy_name(v)) return v;
  throw std::invalid_argument("unknown decoding strategy '" + s + "'");
}

struct DecodeConfig {
  Strategy strategy = Strategy::kBeam;
  std::size_t beam_size = 5;
  double top_p = 0.9;
  std::size_t top_k = 50;
  std::size_t n_samples = 16;
  std::size_t max_len = 32;
  double temperature = 1.0;
  double length_penalty = 1.0;  // score = logprob / len^length_penalty
  bool restrict_modality = true;

  void validate() const {
    if (beam_size < 1) throw std::invalid_argument("decode config: beam_size must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("decode config: top_p must lie in (0,1]");
    if (top_k < 1) throw std::invalid_argument("decode config: k must be >= 1");
    if (n_samples < 1) throw std::invalid_argument("decode config: n_samples must be >= 1");
    if (max_len < 1) throw std::invalid_argument("decode config: max_len must be >= 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("decode config: temperature must be positive");
  }
};

using Scorer = std::function<std::vector<double>(const std::vector<std::size_t>&)>;
using AllowedFn = std::function<std::vector<bool>(std::size_t step)>;

// What to decode: a fixed start prefix (not part of the result), the token
// that terminates a hypothesis, a length cap (terminator included) and the
// per-step admissible ids.
struct SearchSpec {
  std::vector<std::size_t> prefix;
  std::size_t end_id = 0;
  std::size_t max_len = 1;
  AllowedFn allowed;  // empty: everything allowed
};

struct Hypothesis {
  std::vector<std::size_t> tokens;  // generated tokens, terminator included if emitted
  double logprob = 0.0;
  double score = 0.0;  // length-normalized
};

// Log-probabilities renormalized over the allowed ids; -inf elsewhere.
inline std::vector<double> masked_log_softmax(const std::vector<double>& logits, const std::vector<bool>& allowed,
                                              double temperature = 1.0) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<double> out(logits.size(), neg_inf);
  double mx = neg_inf;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (allowed.empty() || allowed[i]) mx = std::max(mx, logits[i] / temperature);
  if (mx == neg_inf) throw std::logic_error("masked_log_softmax: no admissible token");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (allowed.empty() || allowed[i]) s += std::exp(logits[i] / temperature - mx);
  const double lse = mx + std::log(s);
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (allowed.empty() || allowed[i]) out[i] = logits[i] / temperature - lse;
  return out;
}

inline double normalized_score(double logprob, std::size_t len, double length_penalty) {
  return logprob / std::pow(static_cast<double>(std::max<std::size_t>(len, 1)), length_penalty);
}

namespace detail {
// Scores within a relative 1e-12 are ties; ties go to the lexicographically
// smaller token sequence.
inline bool better(double sa, const std::vector<std::size_t>& a, double sb, const std::vector<std::size_t>& b) {
  const double tol = 1e-12 * std::max({1.0, std::abs(sa), std::abs(sb)});
  if (std::abs(sa - sb) > tol) return sa > sb;
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

inline std::vector<std::size_t> with_prefix(const std::vector<std::size_t>& prefix,
                                            const std::vector<std::size_t>& tail) {
  std::vector<std::size_t> s = prefix;
  s.insert(s.end(), tail.begin(), tail.end());
  return s;
}

inline std::vector<bool> allowed_at(const SearchSpec& spec, std::size_t step) {
  return spec.allowed ? spec.allowed(step) : std::vector<bool>{};
}
}  // namespace detail

template <class ScoreFn>
Hypothesis greedy_search(ScoreFn&& scorer, const SearchSpec& spec, double length_penalty = 1.0) {
  Hypothesis h;
  for (std::size_t step = 0; step < spec.max_len; ++step) {
    const auto lp = masked_log_softmax(scorer(detail::with_prefix(spec.prefix, h.tokens)),
                                       detail::allowed_at(spec, step));
    const auto best = static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.tokens.push_back(best);
    h.logprob += lp[best];
    if (best == spec.end_id) break;
  }
  h.score = normalized_score(h.logprob, h.tokens.size(), length_penalty);
  return h;
}

// Beam search over cumulative log-probability. Each round every live beam is
// expanded over the admissible ids, the best beam_size candidates survive
// (terminated ones move to the finished pool), and the answer is the best
// length-normalized hypothesis among finished, live-at-cap and the greedy
// path. With beam_size >= |V|^max_len this is exhaustive.
template <class ScoreFn>
Hypothesis beam_search(ScoreFn&& scorer, const SearchSpec& spec, std::size_t beam_size, double length_penalty = 1.0) {
  if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size must be >= 1");
  std::vector<Hypothesis> live{Hypothesis{}}, finished;
  for (std::size_t step = 0; step < spec.max_len && !live.empty(); ++step) {
    const auto allowed = detail::allowed_at(spec, step);
    std::vector<Hypothesis> cand;
    for (const auto& h : live) {
      const auto lp = masked_log_softmax(scorer(detail::with_prefix(spec.prefix, h.tokens)), allowed);
      for (std::size_t id = 0; id < lp.size(); ++id) {
        if (lp[id] == -std::numeric_limits<double>::infinity()) continue;
        Hypothesis c = h;
        c.tokens.push_back(id);
        c.logprob += lp[id];
        cand.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(beam_size, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                      [](const Hypothesis& a, const Hypothesis& b) {
                        return detail::better(a.logprob, a.tokens, b.logprob, b.tokens);
                      });
    cand.resize(keep);
    live.clear();
    for (auto& c : cand) (c.tokens.back() == spec.end_id ? finished : live).push_back(std::move(c));
  }
  for (auto& h : live) finished.push_back(std::move(h));
  finished.push_back(greedy_search(scorer, spec, length_penalty));

  Hypothesis* best = nullptr;
  for (auto& h : finished) {
    h.score = normalized_score(h.logprob, h.tokens.size(), length_penalty);
    if (!best || detail::better(h.score, h.tokens, best->score, best->tokens)) best = &h;
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Sampling filters over a probability vector

namespace detail {
inline std::vector<std::size_t> order_by_prob(const std::vector<double>& probs) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return idx;
}

inline std::vector<double> renormalize(std::vector<double> p) {
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= s;
  return p;
}
}  // namespace detail

// Smallest probability-sorted prefix with mass >= top_p, renormalized.
inline std::vector<double> nucleus_filter(const std::vector<double>& probs, double top_p) {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("nucleus_filter: top_p must lie in (0,1]");
  std::vector<double> out(probs.size(), 0.0);
  double mass = 0.0;
  for (std::size_t id : detail::order_by_prob(probs)) {
    if (probs[id] <= 0.0) break;
    out[id] = probs[id];
    mass += probs[id];
    if (mass >= top_p) break;
  }
  return detail::renormalize(std::move(out));
}

// The k most probable ids (ties to lower id), renormalized.
inline std::vector<double> top_k_filter(const std::vector<double>& probs, std::size_t k) {
  if (k < 1) throw std::invalid_argument("top_k_filter: k must be >= 1");
  std::vector<double> out(probs.size(), 0.0);
  const auto order = detail::order_by_prob(probs);
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) out[order[i]] = probs[order[i]];
  return detail::renormalize(std::move(out));
}

inline std::size_t sample_index(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cum += probs[i];
    last = i;
    if (u < cum) return i;
  }
  return last;
}

inline std::vector<double> step_distribution(const std::vector<double>& log_probs, Strategy s, const DecodeConfig& cfg) {
  std::vector<double> p(log_probs.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_probs[i]);
  switch (s) {
    case Strategy::kNucleus: return nucleus_filter(p, cfg.top_p);
    case Strategy::kTopK: return top_k_filter(p, cfg.top_k);
    case Strategy::kFull: return p;
    default: throw std::invalid_argument("step_distribution: not a sampling strategy");
  }
}

template <class ScoreFn>
Hypothesis sample_sequence(ScoreFn&& scorer, const SearchSpec& spec, Strategy s, const DecodeConfig& cfg, Rng& rng) {
  Hypothesis h;
  for (std::size_t step = 0; step < spec.max_len; ++step) {
    const auto lp = masked_log_softmax(scorer(detail::with_prefix(spec.prefix, h.tokens)),
                                       detail::allowed_at(spec, step), cfg.temperature);
    const std::size_t id = sample_index(step_distribution(lp, s, cfg), rng);
    h.tokens.push_back(id);
    h.logprob += lp[id];
    if (id == spec.end_id) break;
  }
  h.score = normalized_score(h.logprob, h.tokens.size(), cfg.length_penalty);
  return h;
}

template <class ScoreFn>
Hypothesis run_decode(ScoreFn&& scorer, const SearchSpec& spec, const DecodeConfig& cfg, Rng* rng) {
  cfg.validate();
  switch (cfg.strategy) {
    case Strategy::kGreedy: return greedy_search(scorer, spec, cfg.length_penalty);
    case Strategy::kBeam: return beam_search(scorer, spec, cfg.beam_size, cfg.length_penalty);
    default:
      if (!rng) throw std::invalid_argument("run_decode: sampling strategies need an rng");
      return sample_sequence(scorer, spec, cfg.strategy, cfg, *rng);
  }
}

// ---------------------------------------------------------------------------
// Model-backed decoding

// Next-token logits of the last prefix position.
inline Scorer model_scorer(const DualModel& model, const ad::Tensor& enc) {
  return [&model, enc](const std::vector<std::size_t>& prefix) {
    ad::NoGradGuard guard;
    const ad::Tensor logits = model.decode_forward(prefix, enc);
    const auto row = logits.values().subspan((logits.rows() - 1) * logits.cols(), logits.cols());
    return std::vector<double>(row.begin(), row.end());
  };
}

// Caption decoding: starts at [BOS], ends at [EOS]; when restricted, only
// words and [EOS] are admissible.
inline SearchSpec caption_search_spec(const DualModel& model, const DecodeConfig& cfg) {
  SearchSpec spec;
  spec.prefix = {SpecialTokens::kBos};
  spec.end_id = SpecialTokens::kEos;
  spec.max_len = std::min(cfg.max_len, model.config().max_text_len + 1);
  if (cfg.restrict_modality) {
    const TokenSpace ts = model.tokens();
    std::vector<bool> mask(ts.size(), false);
    for (std::size_t id = 0; id < ts.size(); ++id) mask[id] = ts.is_word(id);
    mask[SpecialTokens::kEos] = true;
    spec.allowed = [mask](std::size_t) { return mask; };
  }
  return spec;
}

inline Hypothesis beam_search(const DualModel& model, const ad::Tensor& enc, const DecodeConfig& cfg) {
  return beam_search(model_scorer(model, enc), caption_search_spec(model, cfg), cfg.beam_size, cfg.length_penalty);
}

inline Hypothesis nucleus_sample(const DualModel& model, const ad::Tensor& enc, const DecodeConfig& cfg, Rng& rng) {
  return sample_sequence(model_scorer(model, enc), caption_search_spec(model, cfg), Strategy::kNucleus, cfg, rng);
}

inline Hypothesis top_k_sample(const DualModel& model, const ad::Tensor& enc, const DecodeConfig& cfg, Rng& rng) {
  return sample_sequence(model_scorer(model, enc), caption_search_spec(model, cfg), Strategy::kTopK, cfg, rng);
}

// Caption for an image: the decoded words with [EOS] stripped.
inline std::vector<std::size_t> caption_image(const DualModel& model, const PatchSequence& image,
                                              const DecodeConfig& cfg, Rng* rng = nullptr) {
  ad::Tensor enc;
  {
    ad::NoGradGuard guard;
    enc = model.encode(nullptr, &image);
  }
  Hypothesis h = run_decode(model_scorer(model, enc), caption_search_spec(model, cfg), cfg, rng);
  if (!h.tokens.empty() && h.tokens.back() == SpecialTokens::kEos) h.tokens.pop_back();
  return h.tokens;
}

struct GeneratedImage {
  std::vector<std::size_t> tokens;  // [BOI] v_1 .. v_n [EOI], unified ids
  std::vector<std::size_t> codes;   // v_i as codebook ids
  ImageGrid image;
};

// Image decoding starts at [BOI]; exactly n_patches visual tokens are
// admissible, after which [EOI] is the only choice.
inline SearchSpec image_search_spec(const DualModel& model, std::size_t n_patches) {
  const TokenSpace ts = model.tokens();
  std::vector<bool> visual(ts.size(), false), close(ts.size(), false);
  for (std::size_t id = 0; id < ts.size(); ++id) visual[id] = ts.is_visual(id);
  close[SpecialTokens::kEoi] = true;
  SearchSpec spec;
  spec.prefix = {SpecialTokens::kBoi};
  spec.end_id = SpecialTokens::kEoi;
  spec.max_len = n_patches + 1;
  spec.allowed = [visual, close, n_patches](std::size_t step) { return step < n_patches ? visual : close; };
  return spec;
}

// n_samples candidate images for a caption. Each sample draws from its own
// child stream split off rng up front, so samples are independent of order.
inline std::vector<GeneratedImage> generate_image(const DualModel& model, const std::vector<std::size_t>& caption,
                                                  GridDims grid, const DecodeConfig& cfg, Rng& rng) {
  cfg.validate();
  if (grid.count() > model.config().max_patches)
    throw std::invalid_argument("generate_image: grid larger than max_patches");
  ad::Tensor enc;
  {
    ad::NoGradGuard guard;
    enc = model.encode(&caption, nullptr);
  }
  const Scorer scorer = model_scorer(model, enc);
  const SearchSpec spec = image_search_spec(model, grid.count());
  std::vector<Rng> streams;
  for (std::size_t i = 0; i < cfg.n_samples; ++i) streams.push_back(rng.split());

  std::vector<GeneratedImage> out;
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const Hypothesis h = run_decode(scorer, spec, cfg, &streams[i]);
    GeneratedImage g;
    g.tokens.push_back(SpecialTokens::kBoi);
    g.tokens.insert(g.tokens.end(), h.tokens.begin(), h.tokens.end());
    for (std::size_t k = 1; k + 1 < g.tokens.size(); ++k) g.codes.push_back(model.tokens().code_of(g.tokens[k]));
    g.image = decode_tokens(g.codes, model.codebook(), grid);
    out.push_back(std::move(g));
  }
  return out;
}

// Caption NLL of `caption` given only `image` under the model.
inline double caption_nll(const DualModel& model, const std::vector<std::size_t>& caption, const ImageGrid& image) {
  ad::NoGradGuard guard;
  TaskBatch b{TaskKind::kMtCaption, {}};
  TaskItem it;
  it.enc_image = model.featurizer().featurize(image);
  it.targets = text_targets(caption);
  b.items.push_back(std::move(it));
  return loss_mt_text(b, model).item();
}

struct RerankResult {
  std::size_t index = 0;
  std::vector<double> scores;
};

// Cycle-consistency reranker: score = -caption NLL of the prompt given the
// candidate image; the first maximum wins.
inline RerankResult rerank(const DualModel& model, const std::vector<std::size_t>& caption,
                           const std::vector<ImageGrid>& images) {
  if (images.empty()) throw std::invalid_argument("rerank: no candidate images");
  RerankResult r;
  for (const auto& img : images) r.scores.push_back(-caption_nll(model, caption, img));
  for (std::size_t i = 1; i < r.scores.size(); ++i)
    if (r.scores[i] > r.scores[r.index]) r.index = i;
  return r;
}

}  // namespace dualgen
