// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dualgen/dualgen.hpp"

using namespace dualgen;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  std::string detail;
  double worst = 0.0;
  for (int k = -1; k < 4; ++k) {
    const auto kind = k < 0 ? std::nullopt : std::optional<TaskKind>(static_cast<TaskKind>(k));
    const auto r = gradcheck_step(kind);
    worst = std::max(worst, r.max_rel_error);
    detail += fmt("%s=%.2e ", kind ? task_name(*kind) : "mixed", r.max_rel_error);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, detail + fmt("(%.1f s)", secs)};
}

Outcome stop_gradient_contract() {
  const DualModel m = init_model(ModelConfig{}, 3);
  const Featurizer trainable(m.config().patch_size, m.config().d_feat, true);
  const auto data = gen_dataset(8, 5, grammar_vocab());
  TaskBatch b{TaskKind::kMtT2i, {}};
  for (const auto& ex : data) {
    TaskItem it;
    it.clean_image = trainable.featurize(ex.image);
    it.codes = tokenize_image(ex.image, m.codebook()).tokens;
    it.enc_text = ex.caption;
    it.targets = image_targets(it.codes, m.tokens());
    b.items.push_back(std::move(it));
  }
  m.zero_grad();
  ad::backward(loss_commitment(b, m));
  auto max_abs = [](const ad::Tensor& t) {
    double a = 0.0;
    for (double g : t.grad()) a = std::max(a, std::abs(g));
    return a;
  };
  const double feat = std::max(max_abs(trainable.weight()), max_abs(trainable.bias()));
  const double proj = std::max(max_abs(m.patch_proj_weight()), max_abs(m.patch_proj_bias()));
  std::set<std::size_t> used;
  for (const auto& it : b.items) used.insert(it.codes.begin(), it.codes.end());
  const auto g = m.visual_embed().grad();
  const std::size_t d = m.config().d_model;
  std::size_t nonzero_rows = 0;
  for (std::size_t r : used) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::abs(g[r * d + c]);
    nonzero_rows += s > 0.0;
  }
  double other = 0.0;
  for (const auto& p : m.parameters())
    if (p.name != "visual_embed") other = std::max(other, max_abs(p.tensor));
  const bool pass = feat == 0.0 && proj == 0.0 && other == 0.0 && nonzero_rows == used.size();
  return {pass, fmt("max|dL/dfeaturizer|=%g max|dL/dpatch_proj|=%g other=%g nonzero visual rows %zu/%zu", feat, proj,
                    other, nonzero_rows, used.size())};
}

Outcome mixing_identities() {
  Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    LossTerms t;
    auto maybe = [&](std::optional<double>& v) {
      if (rng.uniform() < 0.8) v = rng.uniform(0.0, 10.0);
    };
    maybe(t.dae_image), maybe(t.dae_text), maybe(t.mt_image), maybe(t.mt_text), maybe(t.com);
    if (!t.dae_image && !t.dae_text && !t.mt_image && !t.mt_text && !t.com) t.mt_text = 1.0;
    for (double alpha : {0.0, 0.01, 0.05, 0.5, 1.0, 3.0})
      for (double beta : {0.0, 0.25, 1.0, 4.0}) {
        const auto b = total_loss(t, alpha, beta);
        const double want = t.dae_text.value_or(0) + t.mt_text.value_or(0) +
                            alpha * (t.dae_image.value_or(0) + t.mt_image.value_or(0) + beta * t.com.value_or(0));
        worst = std::max(worst, std::abs(b.l_total - want));
      }
  }
  // The differentiable total agrees with its breakdown on real batches.
  ModelConfig mc;
  mc.d_model = 16, mc.n_layers_enc = mc.n_layers_dec = 1, mc.n_heads = 2, mc.d_ff = 32;
  const DualModel m = init_model(mc, 2);
  const auto data = prepare_dataset(gen_dataset(3, 4, grammar_vocab()), m);
  std::vector<TaskBatch> parts;
  for (int k = 0; k < 4; ++k) parts.push_back(build_task_batch(data, static_cast<TaskKind>(k), rng, m.tokens()));
  double worst_tensor = 0.0;
  for (double alpha : {0.0, 0.05, 1.0})
    for (double beta : {0.0, 1.0, 2.5}) {
      const auto s = step_loss(std::span<const TaskBatch>(parts), m, alpha, beta);
      const auto& b = s->breakdown;
      const double want = b.l_dae_text + b.l_mt_text + alpha * (b.l_dae_image + b.l_mt_image + beta * b.l_com);
      worst_tensor = std::max(worst_tensor, std::abs(s->total.item() - want));
    }
  return {worst <= 1e-12 && worst_tensor <= 1e-12,
          fmt("max |deviation| %.1e over 24000 breakdowns, %.1e on model batches", worst, worst_tensor)};
}

// Fixed overfit recipe; data seed 1, model seed 7.
Outcome overfit() {
  const auto t0 = Clock::now();
  const TextVocab vocab = grammar_vocab();
  const auto data = gen_dataset(32, 1, vocab);
  TrainState s = make_train_state(ModelConfig{}, AdamConfig{}, 7);
  const auto prep = prepare_dataset(data, s.model);
  PretrainConfig pc;
  pc.batch_size = 64;
  const TaskKind kinds[] = {TaskKind::kDaeImage, TaskKind::kDaeText, TaskKind::kMtCaption, TaskKind::kMtT2i};
  double init[4], ratio[4];
  for (int i = 0; i < 4; ++i) init[i] = evaluate_task(prep, s.model, kinds[i], 1);
  pretrain(prep, s, 500, pc);
  bool ok = true;
  std::string detail;
  for (int i = 0; i < 4; ++i) {
    ratio[i] = evaluate_task(prep, s.model, kinds[i], 1) / init[i];
    ok = ok && ratio[i] < 0.1;
    detail += fmt("%s %.3f ", task_name(kinds[i]), ratio[i]);
  }
  DecodeConfig dc;
  dc.strategy = Strategy::kBeam;
  dc.beam_size = 5;
  std::size_t exact = 0;
  for (const auto& p : prep) exact += caption_image(s.model, p.image, dc) == p.caption;
  const double secs = seconds_since(t0);
  ok = ok && exact >= 29 && secs < 300.0;
  return {ok, "NLL/NLL0: " + detail + fmt("exact %zu/32 (%.0f s)", exact, secs)};
}

struct AblationArm {
  const char* name;
  LossSwitches sw;
};

// Held-out caption and text-to-image NLL after equal-budget pretraining.
Outcome ablation() {
  const auto t0 = Clock::now();
  constexpr std::size_t kPairs = 2000, kSteps = 300, kBatch = 32, kEval = 200;
  const AblationArm arms[] = {{"full", {true, true, true}},
                              {"no_image", {false, true, true}},
                              {"no_text", {true, false, true}},
                              {"no_commitment", {true, true, false}}};
  std::map<std::string, std::vector<double>> cap, img;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto data = gen_dataset(kPairs, 100 + seed, grammar_vocab());
    const DualModel probe = init_model(ModelConfig{}, seed);
    const auto all = prepare_dataset(data, probe);
    auto [train, val] = split_dataset(all, 0.1);
    val.resize(std::min(val.size(), kEval));
    for (const auto& arm : arms) {
      TrainState s = make_train_state(ModelConfig{}, AdamConfig{}, seed);
      PretrainConfig pc;
      pc.batch_size = kBatch;
      pc.switches = arm.sw;
      pretrain(train, s, kSteps, pc);
      cap[arm.name].push_back(evaluate_task(val, s.model, TaskKind::kMtCaption, seed));
      img[arm.name].push_back(evaluate_task(val, s.model, TaskKind::kMtT2i, seed));
    }
  }
  const double cap_full = median(cap["full"]), cap_noimg = median(cap["no_image"]);
  const double img_full = median(img["full"]), img_notext = median(img["no_text"]), img_nocom = median(img["no_commitment"]);
  const double secs = seconds_since(t0);
  const bool pass = cap_full <= cap_noimg && img_full <= img_notext && img_nocom >= img_full && secs < 1800.0;
  return {pass, fmt("median caption NLL full %.4f vs no_image %.4f; median image NLL full %.4f vs no_text %.4f, "
                    "no_commitment %.4f (%.0f s)",
                    cap_full, cap_noimg, img_full, img_notext, img_nocom, secs)};
}

Outcome corruption_statistics() {
  Rng rng(21);
  const BlockMaskParams bp;
  std::size_t lo = 1000, hi = 0, bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto m = blockwise_mask(14, 14, 0.5, rng, bp);
    const double f = m.fraction();
    bad += f < 0.5 || f > 0.5 + static_cast<double>(bp.max_block) / 196.0;
    lo = std::min(lo, m.count()), hi = std::max(hi, m.count());
  }
  std::vector<std::size_t> tokens(1000);
  std::iota(tokens.begin(), tokens.end(), std::size_t{10});
  std::size_t under = 0, spans = 0, covered = 0;
  for (int t = 0; t < 200; ++t) {
    const auto c = span_infill(tokens, 0.5, 3.0, rng, SpecialTokens::kMask);
    under += c.covered < 500;
    spans += c.span_lengths.size();
    covered += c.covered;
  }
  const double mean_len = static_cast<double>(covered) / static_cast<double>(spans);
  const bool pass = bad == 0 && under == 0 && mean_len >= 2.57 && mean_len <= 2.66;
  return {pass, fmt("mask count range [%zu, %zu] of 196, %zu out of band; span coverage < 0.5 in %zu/200; "
                    "mean span length %.4f (band [2.57, 2.66])",
                    lo, hi, bad, under, mean_len)};
}

Outcome quantizer_round_trip() {
  const ModelConfig mc;
  const VisualCodebook cb = make_codebook(mc.visual_vocab, mc.d_code, mc.patch_size);
  std::vector<std::size_t> all(cb.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const GridDims g{8, 8};
  std::size_t failures = tokenize_image(decode_tokens(all, cb, g), cb).tokens != all;
  Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::size_t> ids(g.count());
    for (auto& id : ids) id = rng.below(cb.size());
    failures += tokenize_image(decode_tokens(ids, cb, g), cb).tokens != ids;
  }
  return {failures == 0, fmt("%zu/101 grids changed; min codeword distance %.3f", failures, cb.min_pairwise_distance())};
}

// Random autoregressive model: logits = W_out · tanh(E[last] + P[position] + c·mean(E[prefix])).
Scorer random_tiny_model(std::size_t vocab, Rng& rng) {
  const std::size_t h = 6;
  auto draw = [&](std::size_t n, double a) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-a, a);
    return v;
  };
  auto e = std::make_shared<std::vector<double>>(draw(vocab * h, 1.5));
  auto p = std::make_shared<std::vector<double>>(draw(8 * h, 1.5));
  auto w = std::make_shared<std::vector<double>>(draw(h * vocab, 2.0));
  const double c = rng.uniform(-1.0, 1.0);
  return [=](const std::vector<std::size_t>& prefix) {
    std::vector<double> x(h, 0.0), avg(h, 0.0);
    for (std::size_t t : prefix)
      for (std::size_t j = 0; j < h; ++j) avg[j] += (*e)[t * h + j] / static_cast<double>(prefix.size());
    for (std::size_t j = 0; j < h; ++j)
      x[j] = std::tanh((*e)[prefix.back() * h + j] + (*p)[(prefix.size() - 1) * h + j] + c * avg[j]);
    std::vector<double> logits(vocab, 0.0);
    for (std::size_t k = 0; k < vocab; ++k)
      for (std::size_t j = 0; j < h; ++j) logits[k] += x[j] * (*w)[j * vocab + k];
    return logits;
  };
}

Outcome decoding_correctness() {
  Rng rng(41);
  std::size_t beam_mismatch = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t vocab = 2 + rng.below(11), max_len = 1 + rng.below(4);
    const Scorer f = random_tiny_model(vocab, rng);
    const SearchSpec spec{{0}, vocab - 1, max_len, {}};
    double best = -1e300;
    std::vector<std::size_t> best_seq;
    std::function<void(std::vector<std::size_t>, double)> walk = [&](std::vector<std::size_t> seq, double lp) {
      if (!seq.empty() && (seq.back() == spec.end_id || seq.size() == max_len)) {
        const double s = normalized_score(lp, seq.size(), 1.0);
        if (s > best) best = s, best_seq = seq;
        return;
      }
      const auto l = masked_log_softmax(f(detail::with_prefix(spec.prefix, seq)), {});
      for (std::size_t id = 0; id < vocab; ++id) {
        auto next = seq;
        next.push_back(id);
        walk(next, lp + l[id]);
      }
    };
    walk({}, 0.0);
    std::size_t width = 1;
    for (std::size_t i = 0; i < max_len; ++i) width *= vocab;
    const Hypothesis b = beam_search(f, spec, width);
    beam_mismatch += std::abs(b.score - best) > 1e-12 || b.tokens != best_seq;
  }

  // Samplers: one decoding step over a 12-way random distribution.
  std::size_t support_errors = 0;
  double min_p = 1.0;
  std::string detail;
  for (Strategy st : {Strategy::kNucleus, Strategy::kTopK}) {
    for (int trial = 0; trial < 3; ++trial) {
      const Scorer f = random_tiny_model(12, rng);
      const SearchSpec spec{{0}, 11, 1, {}};
      DecodeConfig cfg;
      cfg.strategy = st;
      cfg.top_p = 0.8;
      cfg.top_k = 5;
      const auto lp = masked_log_softmax(f(spec.prefix), {});
      const auto expected = step_distribution(lp, st, cfg);
      std::vector<std::size_t> counts(12, 0);
      const int draws = 10000;
      for (int i = 0; i < draws; ++i) ++counts[sample_sequence(f, spec, st, cfg, rng).tokens[0]];
      double chi2 = 0.0;
      std::size_t cells = 0;
      for (std::size_t k = 0; k < 12; ++k) {
        if (expected[k] == 0.0) {
          support_errors += counts[k] != 0;
          continue;
        }
        support_errors += counts[k] == 0 && expected[k] * draws > 20;
        const double e = expected[k] * draws;
        chi2 += (static_cast<double>(counts[k]) - e) * (static_cast<double>(counts[k]) - e) / e;
        ++cells;
      }
      // Support size is prescribed: top-k keeps k ids, nucleus the shortest prefix reaching top_p.
      std::vector<double> probs(12);
      for (std::size_t k = 0; k < 12; ++k) probs[k] = std::exp(lp[k]);
      std::sort(probs.rbegin(), probs.rend());
      std::size_t want = 0;
      if (st == Strategy::kTopK) {
        want = cfg.top_k;
      } else {
        for (double mass = 0.0; mass < cfg.top_p;) mass += probs[want++];
      }
      support_errors += cells != want;
      double p = 1.0;
      if (cells > 1) p = 1.0 - boost::math::cdf(boost::math::chi_squared(static_cast<double>(cells - 1)), chi2);
      min_p = std::min(min_p, p);
    }
  }
  const bool pass = beam_mismatch == 0 && support_errors == 0 && min_p > 0.001;
  return {pass, fmt("beam vs exhaustive mismatches %zu/100; support errors %zu; min chi-square p %.4f", beam_mismatch,
                    support_errors, min_p)};
}

std::string checkpoint_bytes(const RunConfig& cfg, const TrainState& s) { return serialize_checkpoint(cfg, s); }

Outcome determinism() {
  RunConfig cfg;
  cfg.pretrain.batch_size = 8;
  const auto data = gen_dataset(64, 9, grammar_vocab());
  auto run = [&](std::size_t steps, TrainState s) {
    const auto prep = prepare_dataset(data, s.model);
    pretrain(prep, s, steps, cfg.pretrain);
    return s;
  };
  const auto fresh = [&] { return make_train_state(cfg.model, cfg.adam, cfg.seed); };
  const std::string a = checkpoint_bytes(cfg, run(100, fresh()));
  const std::string b = checkpoint_bytes(cfg, run(100, fresh()));

  const auto dir = std::filesystem::temp_directory_path() / "dualgen_acceptance";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "half.ckpt").string();
  save_checkpoint(path, cfg, run(50, fresh()));
  Checkpoint ck = load_checkpoint(path);
  const std::string c = checkpoint_bytes(ck.config, run(50, std::move(ck.state)));
  std::filesystem::remove_all(dir);
  return {a == b && a == c, fmt("repeat run %s, 50+save/load+50 vs 100 %s (%zu bytes)", a == b ? "identical" : "differs",
                                a == c ? "identical" : "differs", a.size())};
}

Outcome shape_ledger() {
  bool ok = true;
  std::string detail;
  for (std::size_t side : {224, 384}) {
    ModelConfig mc;
    mc.patch_size = 16;
    mc.d_feat = 8;
    mc.d_code = 8;
    mc.d_model = 8, mc.n_heads = 2, mc.d_ff = 8, mc.n_layers_enc = mc.n_layers_dec = 1;
    const std::size_t n = patch_grid(side, side, 16).count();
    mc.max_patches = n;
    const DualModel m = init_model(mc, 1);
    const ImageGrid img = ImageGrid::filled(side, side, kPalette[4]);
    const PatchSequence seq = m.featurizer().featurize(img);
    const std::size_t enc_rows = m.encode(nullptr, &seq).rows() - 1;  // minus [TEXTPAD]
    const std::size_t dec_tokens = tokenize_image(img, m.codebook()).tokens.size();
    const std::size_t want = side == 224 ? 196 : 576;
    ok = ok && n == want && enc_rows == want && dec_tokens == want;
    detail += fmt("%zu^2/16: encoder %zu, decoder %zu; ", side, enc_rows, dec_tokens);
  }
  ModelConfig small;
  small.d_model = 16, small.n_heads = 2, small.d_ff = 32, small.n_layers_enc = small.n_layers_dec = 1;
  const DualModel m = init_model(small, 2);
  Rng rng(51);
  std::size_t generated = 0, bracket_errors = 0;
  for (Strategy st : {Strategy::kNucleus, Strategy::kTopK, Strategy::kFull, Strategy::kGreedy}) {
    for (GridDims g : {GridDims{4, 4}, GridDims{8, 8}, GridDims{5, 7}}) {
      DecodeConfig cfg;
      cfg.strategy = st;
      cfg.n_samples = 2;
      const std::vector<std::size_t> caption = {8, 15, 9};
      for (const auto& out : generate_image(m, caption, g, cfg, rng)) {
        ++generated;
        std::size_t visual = 0;
        for (std::size_t id : out.tokens) visual += m.tokens().is_visual(id);
        bracket_errors += out.tokens.front() != SpecialTokens::kBoi || out.tokens.back() != SpecialTokens::kEoi ||
                          visual != g.count() || out.tokens.size() != g.count() + 2;
      }
    }
  }
  ok = ok && bracket_errors == 0;
  return {ok, detail + fmt("%zu generated images, %zu bracket/length violations", generated, bracket_errors)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient integrity", gradient_integrity},
      {"stop-gradient contract", stop_gradient_contract},
      {"loss-mixing identities", mixing_identities},
      {"overfit", overfit},
      {"dual-vs-uni ablation", ablation},
      {"corruption statistics", corruption_statistics},
      {"quantizer round trip", quantizer_round_trip},
      {"decoding correctness", decoding_correctness},
      {"determinism and persistence", determinism},
      {"shape ledger", shape_ledger},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
